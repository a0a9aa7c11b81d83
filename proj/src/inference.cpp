#include "flexi/inference.hpp"

#include "tape.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flexi {

namespace {

// Sum of next-token negative log-likelihoods over consecutive windows that all
// have length seq_len.
double window_nll(const Model& model, std::span<const Token> tokens, std::size_t windows, std::size_t seq_len) {
    const Matrix logits = detail::forward_batch(model, tokens, windows, seq_len, false, nullptr, nullptr);
    double total = 0.0;
    for (std::size_t w = 0; w < windows; ++w) {
        for (std::size_t t = 0; t + 1 < seq_len; ++t) {
            auto row = logits.row(w * seq_len + t);
            const double mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (double x : row) sum += std::exp(x - mx);
            total += mx + std::log(sum) - row[tokens[w * seq_len + t + 1]];
        }
    }
    return total;
}

void check_context(const Model& model, std::size_t length) {
    if (length > model.config.max_seq_len) {
        throw InputError("decode: context overflow, " + std::to_string(length) + " tokens exceed max_seq_len " +
                         std::to_string(model.config.max_seq_len));
    }
}

}  // namespace

double perplexity(const Model& model, const Corpus& corpus, std::size_t seq_len, std::size_t max_windows) {
    if (corpus.tokens.size() < 2) throw std::invalid_argument("perplexity: corpus needs at least 2 tokens");
    if (seq_len < 2) throw std::invalid_argument("perplexity: seq_len must be >= 2");
    seq_len = std::min(seq_len, model.config.max_seq_len);
    std::size_t full = corpus.tokens.size() / seq_len;
    std::size_t tail = corpus.tokens.size() % seq_len;
    if (max_windows > 0 && full >= max_windows) {
        full = max_windows;
        tail = 0;
    }
    constexpr std::size_t kChunk = 16;
    double nll = 0.0;
    std::size_t count = 0;
    const std::span<const Token> all(corpus.tokens);
    for (std::size_t w = 0; w < full; w += kChunk) {
        const std::size_t n = std::min(kChunk, full - w);
        nll += window_nll(model, all.subspan(w * seq_len, n * seq_len), n, seq_len);
        count += n * (seq_len - 1);
    }
    if (tail >= 2) {
        nll += window_nll(model, all.subspan(full * seq_len, tail), 1, tail);
        count += tail - 1;
    }
    return std::exp(nll / static_cast<double>(count));
}

Token argmax(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i)
        if (row[i] > row[best]) best = i;
    return static_cast<Token>(best);
}

std::vector<Token> greedy_decode(const Model& model, std::span<const Token> prompt, std::size_t n_new) {
    if (prompt.empty()) throw InputError("decode: empty prompt");
    check_context(model, prompt.size() + n_new);
    std::vector<Token> seq(prompt.begin(), prompt.end());
    for (std::size_t i = 0; i < n_new; ++i) {
        const Matrix logits = forward(model, seq).logits;
        seq.push_back(argmax(logits.row(logits.rows() - 1)));
    }
    return seq;
}

DecodeResult speculative_decode(const Model& model, std::span<const Token> prompt, const DecodeConfig& cfg) {
    if (prompt.empty()) throw InputError("decode: empty prompt");
    if (cfg.draft_k < 1) throw std::invalid_argument("decode: draft_k must be >= 1");
    check_context(model, prompt.size() + cfg.max_new_tokens);
    DecodeResult res;
    res.tokens.assign(prompt.begin(), prompt.end());
    const std::size_t target = prompt.size() + cfg.max_new_tokens;
    const ForwardOptions draft_opts{.trace = false, .skip_shared = true};

    while (res.tokens.size() < target) {
        const std::size_t remaining = target - res.tokens.size();
        // Drafting k tokens and verifying can emit up to k + 1 tokens.
        const std::size_t k = std::min(cfg.draft_k, remaining - 1);
        std::vector<Token> draft = res.tokens;
        for (std::size_t i = 0; i < k; ++i) {
            const Matrix logits = forward(model, draft, draft_opts).logits;
            ++res.stats.draft_forward_calls;
            draft.push_back(argmax(logits.row(logits.rows() - 1)));
        }
        res.stats.proposed += k;

        // One full pass scores every drafted position at once.
        const std::size_t base = res.tokens.size();
        const Matrix logits = forward(model, std::span<const Token>(draft).subspan(0, base + k)).logits;
        ++res.stats.full_forward_calls;
        std::size_t accepted = 0;
        while (accepted < k) {
            const Token verified = argmax(logits.row(base - 1 + accepted));
            if (verified != draft[base + accepted]) break;
            res.tokens.push_back(verified);
            ++accepted;
        }
        res.stats.accepted += accepted;
        res.tokens.push_back(argmax(logits.row(base - 1 + accepted)));
    }
    return res;
}

DecodeResult decode(const Model& model, std::span<const Token> prompt, const DecodeConfig& cfg) {
    if (cfg.mode == DecodeMode::speculative) return speculative_decode(model, prompt, cfg);
    DecodeResult res;
    res.tokens = greedy_decode(model, prompt, cfg.max_new_tokens);
    res.stats.full_forward_calls = cfg.max_new_tokens;
    return res;
}

std::string decode_transcript_json(std::span<const Token> prompt, const DecodeResult& result,
                                   const DecodeConfig& cfg) {
    nlohmann::ordered_json j;
    j["mode"] = cfg.mode == DecodeMode::greedy ? "greedy" : "speculative";
    j["draft_k"] = cfg.draft_k;
    j["prompt"] = std::vector<Token>(prompt.begin(), prompt.end());
    j["generated"] = std::vector<Token>(result.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                        result.tokens.end());
    j["stats"] = {{"proposed", result.stats.proposed},
                  {"accepted", result.stats.accepted},
                  {"acceptance_rate", result.stats.acceptance_rate()},
                  {"full_forward_calls", result.stats.full_forward_calls},
                  {"draft_forward_calls", result.stats.draft_forward_calls}};
    return j.dump(2) + "\n";
}

}  // namespace flexi
