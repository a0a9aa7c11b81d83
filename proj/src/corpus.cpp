#include "flexi/corpus.hpp"

#include "flexi/random.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flexi {

std::string_view split_name(Split s) { return s == Split::train ? "train" : "valid"; }

MarkovSource::MarkovSource(std::uint64_t seed, std::size_t vocab_size, MarkovSourceOptions opts)
    : vocab_(vocab_size), opts_(opts) {
    if (vocab_size < 4) throw std::invalid_argument("MarkovSource: vocab_size must be >= 4");
    if (opts_.rank < 1) throw std::invalid_argument("MarkovSource: rank must be >= 1");
    if (!(opts_.near_scale >= 0.0) || !(opts_.far_scale >= 0.0))
        throw std::invalid_argument("MarkovSource: scales must be >= 0");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    // Rows are stored exponentiated and shifted by their max, which cancels
    // in the normalization.
    auto make_table = [&](double scale) {
        Matrix g(vocab_size, opts_.rank);
        Matrix h(opts_.rank, vocab_size);
        for (double& x : g.values()) x = normal(rng);
        for (double& x : h.values()) x = normal(rng);
        Matrix t(vocab_size, vocab_size);
        gemm(g, false, h, false, t, scale / std::sqrt(static_cast<double>(opts_.rank)));
        for (std::size_t r = 0; r < vocab_size; ++r) {
            auto row = t.row(r);
            const double top = *std::max_element(row.begin(), row.end());
            for (double& x : row) x = std::exp(x - top);
        }
        return t;
    };
    near_ = make_table(opts_.near_scale);
    far_ = make_table(opts_.far_scale);
    z_ = Matrix(vocab_size, vocab_size);
    gemm(far_, false, near_, true, z_);  // z[a][b] = sum_c far[a][c] near[b][c]
}

std::vector<double> MarkovSource::conditional(Token a, Token b) const {
    std::vector<double> p(vocab_);
    const double z = z_(a, b);
    for (std::size_t c = 0; c < vocab_; ++c) p[c] = near_(b, c) * far_(a, c) / z;
    return p;
}

std::vector<Token> MarkovSource::sample(std::uint64_t stream_seed, std::size_t n_tokens) const {
    std::vector<Token> out;
    out.reserve(n_tokens);
    if (n_tokens == 0) return out;
    Rng rng(stream_seed);
    std::uniform_int_distribution<Token> any(0, static_cast<Token>(vocab_ - 1));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Token a = any(rng);
    Token b = any(rng);
    for (std::size_t i = 0; i < n_tokens; ++i) {
        double u = unit(rng) * z_(a, b);
        Token c = static_cast<Token>(vocab_ - 1);
        for (std::size_t k = 0; k + 1 < vocab_; ++k) {
            const double w = near_(b, k) * far_(a, k);
            if (u < w) {
                c = static_cast<Token>(k);
                break;
            }
            u -= w;
        }
        out.push_back(c);
        a = b;
        b = c;
    }
    return out;
}

std::vector<double> MarkovSource::stationary_pairs(double tol, int max_iter) const {
    const std::size_t V = vocab_;
    Matrix pi(V, V);  // [a][b]
    std::fill(pi.values().begin(), pi.values().end(), 1.0 / static_cast<double>(V * V));
    Matrix w(V, V);
    Matrix next(V, V);
    for (int it = 0; it < max_iter; ++it) {
        // next[b][c] = near[b][c] * sum_a pi[a][b] / z[a][b] * far[a][c]
        for (std::size_t i = 0; i < V * V; ++i) w.values()[i] = pi.values()[i] / z_.values()[i];
        gemm(w, true, far_, false, next);
        double total = 0.0;
        for (std::size_t i = 0; i < V * V; ++i) total += next.values()[i] *= near_.values()[i];
        double delta = 0.0;
        for (std::size_t i = 0; i < V * V; ++i) {
            next.values()[i] /= total;
            delta += std::abs(next.values()[i] - pi.values()[i]);
        }
        std::swap(pi, next);
        if (delta < tol) break;
    }
    return {pi.values().begin(), pi.values().end()};
}

std::vector<double> MarkovSource::stationary_unigram() const {
    const std::size_t V = vocab_;
    const auto pi = stationary_pairs();
    std::vector<double> uni(V, 0.0);
    for (std::size_t a = 0; a < V; ++a)
        for (std::size_t b = 0; b < V; ++b) uni[b] += pi[a * V + b];
    return uni;
}

double MarkovSource::entropy_rate() const {
    const std::size_t V = vocab_;
    const auto pi = stationary_pairs();
    double h = 0.0;
    for (std::size_t a = 0; a < V; ++a) {
        for (std::size_t b = 0; b < V; ++b) {
            const double w = pi[a * V + b];
            if (w == 0.0) continue;
            h += w * entropy(conditional(static_cast<Token>(a), static_cast<Token>(b)));
        }
    }
    return h;
}

MarkovSource corpus_source(std::uint64_t seed, std::size_t vocab_size) {
    return MarkovSource(derive_seed(seed, "markov-table"), vocab_size);
}

Corpus synth_corpus(std::uint64_t seed, std::size_t n_tokens, std::size_t vocab_size, Split split) {
    const MarkovSource src = corpus_source(seed, vocab_size);
    Corpus c;
    c.split = split;
    c.vocab_size = vocab_size;
    c.tokens = src.sample(derive_seed(seed, split_name(split)), n_tokens);
    return c;
}

double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

std::vector<double> unigram_frequencies(std::span<const Token> tokens, std::size_t vocab_size) {
    std::vector<double> f(vocab_size, 0.0);
    for (Token t : tokens) f.at(t) += 1.0;
    if (!tokens.empty())
        for (double& x : f) x /= static_cast<double>(tokens.size());
    return f;
}

}  // namespace flexi
