#include "doctest.h"
#include "support.hpp"

#include "flexi/corpus.hpp"
#include "flexi/inference.hpp"
#include "flexi/surgery.hpp"

#include <cmath>

using namespace flexi;
using testing_util::random_matrix;
using testing_util::random_tokens;
using testing_util::tiny_config;

namespace {

ExtensionSpec range_spec(std::size_t a, std::size_t b, ExtensionPattern p) {
    ExtensionSpec s;
    s.start = a;
    s.end = b;
    s.pattern = p;
    return s;
}

}  // namespace

TEST_CASE("output norm examples") {
    OutputNorm zero{std::vector<double>(4, 0.0), 1e-5};
    for (double y : output_norm_apply(std::vector<double>{1, -2, 7, 0.5}, zero)) CHECK(y == 0.0);

    OutputNorm unit{{1.0, 1.0}, 1e-300};
    const auto y = output_norm_apply(std::vector<double>{1.0, 3.0}, unit);
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-14));

    OutputNorm any{{2.0, -3.0, 0.5}, 1e-5};
    for (double v : output_norm_apply(std::vector<double>{5, 5, 5}, any)) CHECK(v == 0.0);

    flexi::Rng rng(4);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> h(16), g(16);
        fill_normal(h, rng, 3.0);
        fill_normal(g, rng, 1.0);
        const OutputNorm n{g, 1e-5};
        const auto got = output_norm_apply(h, n);
        const auto ref = oracle::output_norm(h, g, 1e-5);
        for (std::size_t i = 0; i < h.size(); ++i) CHECK(std::abs(got[i] - ref[i]) <= 1e-12);
    }
}

TEST_CASE("adapter init is the best rank-r approximation of the difference") {
    const Matrix w = random_matrix(6, 5, 1);
    CHECK(frobenius_norm(init_adapters(w, w, 2).delta()) == 0.0);

    const LoraAdapter d = init_adapters(Matrix{{4, 0}, {0, 2}}, Matrix(2, 2), 1);
    CHECK(max_abs_diff(d.delta(), Matrix{{4, 0}, {0, 0}}) <= 1e-14);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix wi = random_matrix(8, 8, 10 + seed), wj = random_matrix(8, 8, 20 + seed);
        const LoraAdapter ad = init_adapters(wi, wj, 3);
        CHECK(ad.a.rows() == 8);
        CHECK(ad.a.cols() == 3);
        CHECK(ad.b.rows() == 3);
        CHECK(ad.b.cols() == 8);
        const auto s = oracle::singular_values(sub(wi, wj));
        double tail = 0.0;
        for (std::size_t k = 3; k < s.size(); ++k) tail += s[k] * s[k];
        const double resid = frobenius_norm(sub(sub(wi, wj), ad.delta()));
        CHECK(std::abs(resid * resid - tail) <= 1e-10);
    }
    CHECK_THROWS(init_adapters(w, w, 6));
}

TEST_CASE("zero-product adapter starts at zero") {
    flexi::Rng rng(3);
    const LoraAdapter z = zero_product_adapter(8, 5, 2, rng);
    CHECK(frobenius_norm(z.a) == 0.0);
    CHECK(frobenius_norm(z.b) > 0.0);
    CHECK(frobenius_norm(z.delta()) == 0.0);
}

TEST_CASE("gamma zero replacement equals delete-only pruning") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Model base = init_random(tiny_config(5), seed);
        ReplaceOptions opts;
        opts.gamma_init = 0.0;
        opts.rank = 2;
        Model replaced = base;
        prune_and_replace(replaced, {{1, 0}, {3, 4}}, opts);
        Model deleted = base;
        delete_blocks(deleted, {1, 3});
        CHECK(deleted.blocks.size() == 3);
        for (int k = 0; k < 5; ++k) {
            const auto toks = random_tokens(12, 11, 100 * seed + k);
            CHECK(max_abs_diff(forward(replaced, toks).logits, forward(deleted, toks).logits) <= 1e-12);
        }
        const Corpus v = synth_corpus(seed, 300, 11, Split::valid);
        CHECK(std::abs(perplexity(replaced, v, 16) - perplexity(deleted, v, 16)) <= 1e-9);
    }
}

TEST_CASE("pruning nothing leaves the model unchanged") {
    const Model base = init_random(tiny_config(3), 1);
    Model m = base;
    const SurgerySummary s = prune_and_replace(m, std::map<std::size_t, std::size_t>{}, {});
    CHECK(testing_util::params_equal(m, base));
    CHECK(s.params_before == s.params_after);
}

TEST_CASE("replacement adapters hit the Eckart-Young residual for every role") {
    const Model base = init_random(tiny_config(3), 6);
    Model m = base;
    ReplaceOptions opts;
    opts.rank = 3;
    const SurgerySummary s = prune_and_replace(m, {{2, 0}}, opts);
    REQUIRE(s.replaced.size() == 1);
    const AdaptedBlock* ad = as_adapted(m.blocks[2]);
    REQUIRE(ad != nullptr);
    CHECK(ad->base_index == 0);
    for (Role r : kRoles) {
        const Matrix& wi = base.weights_at(2).weight(r);
        const Matrix& wj = base.weights_at(0).weight(r);
        const Matrix eff = add(wj, ad->adapter(r).delta());
        const auto sv = oracle::singular_values(sub(wi, wj));
        double tail = 0.0;
        for (std::size_t k = 3; k < sv.size(); ++k) tail += sv[k] * sv[k];
        const double resid = frobenius_norm(sub(wi, eff));
        CHECK(std::abs(resid * resid - tail) <= 1e-10);
        CHECK(std::abs(s.replaced[0].residual[role_index(r)] - resid) <= 1e-12);
    }
    CHECK(ad->attn_norm.gamma == std::vector<double>(8, 1e-4));
}

TEST_CASE("parameter count after replacement follows the closed form") {
    ModelConfig c = tiny_config(8);
    const Model base = init_random(c, 2);
    Model m = base;
    const std::size_t r = 2;
    ReplaceOptions opts;
    opts.rank = r;
    prune_and_replace(m, {{1, 0}, {5, 4}}, opts);
    const std::size_t d = c.d_model, f = c.d_ff;
    const std::size_t block = 4 * d * d + 2 * d * f + 2 * d;
    const std::size_t replaced = r * (10 * d + 2 * f) + 2 * d;
    CHECK(count_params(m).total == count_params(base).total - 2 * block + 2 * replaced);
    CHECK(compression_ratio(m, base) ==
          doctest::Approx(1.0 - double(count_params(m).total) / double(count_params(base).total)));
}

TEST_CASE("surgery errors") {
    Model m = init_random(tiny_config(4), 1);
    CHECK_THROWS(prune_and_replace(m, {{1, 1}}, {}));
    CHECK_THROWS(prune_and_replace(m, {{1, 2}, {2, 0}}, {}));
    CHECK_THROWS(prune_and_replace(m, {{1, 9}}, {}));
    ReplaceOptions big;
    big.rank = 9;
    CHECK_THROWS(prune_and_replace(m, {{1, 0}}, big));
    ReplaceOptions neg;
    neg.gamma_init = -1.0;
    CHECK_THROWS(prune_and_replace(m, {{1, 0}}, neg));

    prune_and_replace(m, {{1, 0}}, {});
    CHECK_THROWS(delete_blocks(m, {0}));
    CHECK_THROWS(prune_and_replace(m, {{2, 1}}, {}));
    CHECK_NOTHROW(delete_blocks(m, {2}));
    CHECK(as_adapted(m.blocks[1])->base_index == 0);
}

TEST_CASE("extension layouts") {
    CHECK(extension_layout(6, range_spec(2, 4, ExtensionPattern::block)) ==
          std::vector<std::size_t>{0, 1, 2, 2, 3, 3, 4, 4, 5});
    CHECK(extension_layout(6, range_spec(2, 4, ExtensionPattern::sequential)) ==
          std::vector<std::size_t>{0, 1, 2, 3, 4, 2, 3, 4, 5});
    ExtensionSpec two = range_spec(1, 2, ExtensionPattern::sequential);
    two.repeats = 2;
    CHECK(extension_layout(4, two) == std::vector<std::size_t>{0, 1, 2, 1, 2, 1, 2, 3});
    CHECK_THROWS(extension_layout(6, range_spec(4, 2, ExtensionPattern::block)));
    CHECK_THROWS(extension_layout(6, range_spec(2, 6, ExtensionPattern::block)));
    ExtensionSpec none = range_spec(0, 0, ExtensionPattern::block);
    none.repeats = 0;
    CHECK_THROWS(extension_layout(6, none));
}

TEST_CASE("extend builds repeated blocks on the first occurrence") {
    for (auto pattern : {ExtensionPattern::block, ExtensionPattern::sequential}) {
        const Model base = init_random(tiny_config(6), 3);
        Model m = base;
        ExtensionSpec spec = range_spec(2, 4, pattern);
        spec.rank = 2;
        const SurgerySummary s = extend(m, spec);
        REQUIRE(m.blocks.size() == 9);
        CHECK(m.config.n_layers == 9);
        CHECK(m.count_kind(BlockKindTag::repeated) == 3);
        CHECK(s.layout == extension_layout(6, spec));
        for (std::size_t p = 0; p < 9; ++p) {
            CHECK(m.weights_at(p).w_q == base.weights_at(s.layout[p]).w_q);
            if (const AdaptedBlock* ad = as_adapted(m.blocks[p])) {
                CHECK(kind_of(m.blocks[ad->base_index]) == BlockKindTag::native);
                CHECK(ad->base_index < p);
                CHECK(frobenius_norm(ad->adapter(Role::up).delta()) == 0.0);
            }
        }
    }
}

TEST_CASE("gamma zero extension preserves logits and perplexity") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const Model base = init_random(tiny_config(4), seed);
        Model m = base;
        ExtensionSpec spec = range_spec(1, 2, ExtensionPattern::sequential);
        spec.gamma_init = 0.0;
        spec.seed = seed;
        extend(m, spec);
        const auto toks = random_tokens(14, 11, seed);
        CHECK(max_abs_diff(forward(m, toks).logits, forward(base, toks).logits) <= 1e-12);
        const Corpus v = synth_corpus(seed, 500, 11, Split::valid);
        CHECK(std::abs(perplexity(m, v, 16) - perplexity(base, v, 16)) <= 1e-9);
    }
}

TEST_CASE("surgery summary json names the operation") {
    Model m = init_random(tiny_config(4), 1);
    const std::string js = prune_and_replace(m, {{3, 2}}, {}).to_json();
    CHECK(js.find("\"operation\"") != std::string::npos);
    CHECK(js.find("\"adapter_residual\"") != std::string::npos);
}
