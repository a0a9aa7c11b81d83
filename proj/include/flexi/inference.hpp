#pragma once

// Perplexity, greedy decoding, and lossless self-speculative decoding.

#include "flexi/corpus.hpp"
#include "flexi/model.hpp"

#include <string>
#include <vector>

namespace flexi {

/// exp(mean next-token cross-entropy) over non-overlapping windows of
/// `seq_len` tokens. A trailing partial window of >= 2 tokens is included.
/// max_windows = 0 evaluates every window.
double perplexity(const Model& model, const Corpus& corpus, std::size_t seq_len, std::size_t max_windows = 0);

/// Lowest id wins ties.
Token argmax(std::span<const double> row);

std::vector<Token> greedy_decode(const Model& model, std::span<const Token> prompt, std::size_t n_new);

enum class DecodeMode { greedy, speculative };

struct DecodeConfig {
    std::size_t max_new_tokens = 64;
    std::size_t draft_k = 4;
    DecodeMode mode = DecodeMode::speculative;
};

struct SpecDecodeStats {
    std::size_t proposed = 0;
    std::size_t accepted = 0;
    std::size_t full_forward_calls = 0;
    std::size_t draft_forward_calls = 0;

    double acceptance_rate() const { return proposed ? double(accepted) / double(proposed) : 0.0; }
};

struct DecodeResult {
    std::vector<Token> tokens;  // prompt followed by generated ids
    SpecDecodeStats stats;
};

/// Drafts k greedy tokens with every Shared block skipped, verifies them with
/// one full forward pass, keeps the agreeing prefix plus the full model's
/// next token. Output is token-identical to greedy_decode on the full model.
DecodeResult speculative_decode(const Model& model, std::span<const Token> prompt, const DecodeConfig& cfg);

/// Dispatches on cfg.mode. Greedy mode counts one full forward call per token.
DecodeResult decode(const Model& model, std::span<const Token> prompt, const DecodeConfig& cfg);

std::string decode_transcript_json(std::span<const Token> prompt, const DecodeResult& result,
                                   const DecodeConfig& cfg);

}  // namespace flexi
