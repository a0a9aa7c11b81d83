#pragma once

// Synthetic token streams from a seeded order-2 Markov source.
//
// The transition table is log-linear in the two previous tokens:
//   P(c | a, b) proportional to exp(Near[b][c] + Far[a][c])
// with Near = near_scale * G1 H1 / sqrt(k) and Far = far_scale * G2 H2 / sqrt(k)
// for standard Gaussian factors of inner dimension k. Keeping k well below
// the model width lets a softmax output layer represent the table exactly.
// Every entry is positive, so the chain is irreducible and aperiodic and has
// a unique stationary distribution.

#include "flexi/linalg.hpp"
#include "flexi/model.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace flexi {

enum class Split { train, valid };
std::string_view split_name(Split s);

struct Corpus {
    std::vector<Token> tokens;
    Split split = Split::train;
    std::size_t vocab_size = 0;
};

struct MarkovSourceOptions {
    std::size_t rank = 8;
    double near_scale = 2.6;
    double far_scale = 2.4;
};

class MarkovSource {
public:
    MarkovSource(std::uint64_t seed, std::size_t vocab_size, MarkovSourceOptions opts = {});

    std::size_t vocab_size() const { return vocab_; }
    /// P(c | a, b) as a dense row of length V.
    std::vector<double> conditional(Token a, Token b) const;
    std::vector<Token> sample(std::uint64_t stream_seed, std::size_t n_tokens) const;

    /// Stationary distribution over pair states (a, b), index a * V + b,
    /// by power iteration.
    std::vector<double> stationary_pairs(double tol = 1e-14, int max_iter = 100000) const;
    /// Unigram marginal of the stationary pair distribution.
    std::vector<double> stationary_unigram() const;
    /// Conditional entropy H(next | previous two) under stationarity, in nats.
    double entropy_rate() const;

private:
    std::size_t vocab_;
    MarkovSourceOptions opts_;
    Matrix near_;  // exp(Near), row b
    Matrix far_;   // exp(Far), row a
    Matrix z_;     // normalizer, [a][b]
};

/// The source synth_corpus(seed, ...) draws from.
MarkovSource corpus_source(std::uint64_t seed, std::size_t vocab_size);

/// Pre: vocab_size >= 4. The transition table is fixed by `seed`; the train
/// and valid splits are independent streams from the same table.
Corpus synth_corpus(std::uint64_t seed, std::size_t n_tokens, std::size_t vocab_size,
                    Split split = Split::train);

/// Shannon entropy in nats.
double entropy(std::span<const double> probs);
std::vector<double> unigram_frequencies(std::span<const Token> tokens, std::size_t vocab_size);

}  // namespace flexi
