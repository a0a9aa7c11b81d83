#include "doctest.h"

#include "flexi/corpus.hpp"

#include <cmath>
#include <numeric>

using namespace flexi;

TEST_CASE("synth_corpus is deterministic and splits differ") {
    const Corpus a = synth_corpus(5, 2000, 32);
    const Corpus b = synth_corpus(5, 2000, 32);
    const Corpus v = synth_corpus(5, 2000, 32, Split::valid);
    CHECK(a.tokens == b.tokens);
    CHECK(a.tokens != v.tokens);
    CHECK(a.vocab_size == 32);
    CHECK(v.split == Split::valid);
    for (Token t : a.tokens) CHECK(t < 32);
}

TEST_CASE("empty corpus") {
    CHECK(synth_corpus(1, 0, 16).tokens.empty());
}

TEST_CASE("conditional rows are distributions with full support") {
    const MarkovSource src(3, 20);
    for (Token a = 0; a < 20; a += 7) {
        for (Token b = 0; b < 20; b += 3) {
            const auto row = src.conditional(a, b);
            CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
            for (double p : row) CHECK(p > 0.0);
        }
    }
}

TEST_CASE("stationary distribution is a fixed point") {
    const MarkovSource src(4, 12);
    const auto pi = src.stationary_pairs();
    std::vector<double> next(pi.size(), 0.0);
    for (Token a = 0; a < 12; ++a)
        for (Token b = 0; b < 12; ++b) {
            const auto row = src.conditional(a, b);
            for (Token c = 0; c < 12; ++c) next[b * 12 + c] += pi[a * 12 + b] * row[c];
        }
    for (std::size_t i = 0; i < pi.size(); ++i) CHECK(std::abs(next[i] - pi[i]) < 1e-12);
}

TEST_CASE("empirical unigram entropy tracks the stationary marginal") {
    const std::size_t V = 64;
    const MarkovSource src(9, V);
    const auto toks = src.sample(123, 1'000'000);
    const double h_emp = entropy(unigram_frequencies(toks, V));
    const double h_ref = entropy(src.stationary_unigram());
    CHECK(std::abs(h_emp - h_ref) <= 0.02 * h_ref);
    CHECK(src.entropy_rate() < h_ref);
}

TEST_CASE("entropy helper") {
    const std::vector<double> u(8, 0.125);
    CHECK(entropy(u) == doctest::Approx(std::log(8.0)));
    CHECK(entropy(std::vector<double>{1.0, 0.0}) == 0.0);
}
