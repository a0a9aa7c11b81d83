#include "doctest.h"
#include "gradcheck.hpp"
#include "support.hpp"

#include "flexi/inference.hpp"
#include "flexi/scoring.hpp"
#include "flexi/selection.hpp"
#include "flexi/surgery.hpp"
#include "flexi/training.hpp"

#include <cmath>

using namespace flexi;
using testing_util::random_tokens;
using testing_util::tiny_config;

TEST_CASE("zero unembedding gives ln(vocab) loss") {
    Model m = init_random(tiny_config(), 1);
    m.unembed.set_zero();
    const auto toks = random_tokens(24, 11, 3);
    CHECK(batch_loss(m, toks, 3, 8) == doctest::Approx(std::log(11.0)).epsilon(1e-14));
    CHECK(loss_and_grads(m, toks, 3, 8).loss == doctest::Approx(std::log(11.0)).epsilon(1e-14));
}

TEST_CASE("single-token vocabulary gives zero loss") {
    ModelConfig c = tiny_config();
    c.vocab_size = 1;
    const Model m = init_random(c, 1);
    const std::vector<Token> toks(12, 0);
    CHECK(loss_and_grads(m, toks, 2, 6).loss == 0.0);
}

TEST_CASE("batch_loss matches the oracle loss") {
    Model m = init_random(tiny_config(2), 8);
    prune_and_replace(m, {{1, 0}}, {});
    testing_util::scramble(m, 9, 0.3);
    const auto toks = random_tokens(20, 11, 4);
    CHECK(std::abs(batch_loss(m, toks, 2, 10) - oracle::loss(m, toks, 2, 10)) < 1e-12);
    CHECK(loss_and_grads(m, toks, 2, 10).loss == doctest::Approx(batch_loss(m, toks, 2, 10)).epsilon(1e-13));
}

TEST_CASE("backprop agrees with central finite differences") {
    const gradcheck::Result r = gradcheck::run(17);
    CHECK(r.rel_error.size() == 9);
    for (const auto& [cls, err] : r.rel_error) {
        CAPTURE(cls);
        CHECK(err <= 1e-6);
    }
    CHECK(r.multisite_entries > 0);
    CHECK(r.multisite_rel_error <= 1e-6);
    CHECK(r.multisite_consistency <= 1e-6);
}

TEST_CASE("Adam leaves parameters alone on zero gradients and respects the mask") {
    std::vector<double> a{1.0, -2.0}, b{3.0};
    std::vector<std::span<double>> params{std::span<double>(a), std::span<double>(b)};
    std::vector<Matrix> grads{Matrix(1, 2), Matrix(1, 1, 0.5)};
    Adam adam;
    adam.step(params, grads, {true, true}, 0.1);
    CHECK(a == std::vector<double>{1.0, -2.0});
    CHECK(b[0] != 3.0);
    CHECK(adam.steps_taken() == 1);

    const double b_after = b[0];
    grads[0] = Matrix(1, 2, 1.0);
    for (int i = 0; i < 10; ++i) adam.step(params, grads, {true, false}, 0.1);
    CHECK(b[0] == b_after);
    CHECK(a[0] != 1.0);
    CHECK(adam.steps_taken() == 11);
}

TEST_CASE("Adam first step moves each coordinate by lr against the gradient sign") {
    std::vector<double> x{0.0, 0.0};
    std::vector<std::span<double>> params{std::span<double>(x)};
    std::vector<Matrix> grads{Matrix{{3.0, -0.25}}};
    Adam adam;
    adam.step(params, grads, {true}, 0.01);
    CHECK(x[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(x[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("Adam minimises a one-parameter quadratic") {
    std::vector<double> x{0.0};
    std::vector<std::span<double>> params{std::span<double>(x)};
    TrainConfig tc;
    tc.lr = 0.1;
    tc.steps = 2000;
    Adam adam;
    std::vector<Matrix> g{Matrix(1, 1)};
    for (std::size_t s = 0; s < tc.steps; ++s) {
        g[0](0, 0) = 2.0 * (x[0] - 3.0);
        adam.step(params, g, {true}, scheduled_lr(tc, s));
    }
    CHECK(std::abs(x[0] - 3.0) <= 1e-6);
}

TEST_CASE("cosine schedule endpoints") {
    TrainConfig tc;
    tc.lr = 2.0;
    tc.steps = 11;
    CHECK(scheduled_lr(tc, 0) == 2.0);
    CHECK(scheduled_lr(tc, 10) == doctest::Approx(0.2));
    CHECK(scheduled_lr(tc, 5) == doctest::Approx(1.1));
    tc.schedule = Schedule::constant;
    CHECK(scheduled_lr(tc, 7) == 2.0);
}

TEST_CASE("shared-only trainable set") {
    Model m = init_random(tiny_config(3), 2);
    prune_and_replace(m, {{2, 0}}, {});
    const auto params = list_params(m);
    const auto mask = trainable_mask(m, TrainableSet::adapters_norms_bases);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        bool expect = false;
        if (p.cls == ParamClass::adapter_a || p.cls == ParamClass::adapter_b || p.cls == ParamClass::gamma) expect = true;
        if ((p.cls == ParamClass::native_weight || p.cls == ParamClass::norm_gain) && p.block == 0) expect = true;
        CAPTURE(p.name);
        CHECK(mask[i] == expect);
    }
}

TEST_CASE("finetune: zero steps, determinism, frozen tensors") {
    const Corpus train = synth_corpus(1, 4000, 11);
    const Corpus valid = synth_corpus(1, 400, 11, Split::valid);
    Model base = init_random(tiny_config(3), 3);
    prune_and_replace(base, {{2, 0}}, {});

    TrainConfig tc;
    tc.steps = 0;
    tc.seq_len = 8;
    tc.batch_size = 4;
    Model same = base;
    const FinetuneResult none = finetune(same, train, &valid, tc);
    CHECK(none.train_loss.empty());
    CHECK(testing_util::params_equal(same, base));

    tc.steps = 20;
    tc.eval_every = 5;
    tc.trainable = TrainableSet::adapters_norms_bases;
    Model a = base, b = base;
    const FinetuneResult ra = finetune(a, train, &valid, tc);
    const FinetuneResult rb = finetune(b, train, &valid, tc);
    CHECK(ra.train_loss == rb.train_loss);
    CHECK(testing_util::params_equal(a, b));
    CHECK(ra.train_loss.size() == 20);
    REQUIRE(ra.evals.size() == 5);
    CHECK(ra.evals.front().step == 0);
    CHECK(ra.evals.back().step == 20);

    // Block 1 is native but nobody's base, so it stays put.
    CHECK(a.weights_at(1).w_q == base.weights_at(1).w_q);
    CHECK(a.tok_emb == base.tok_emb);
    CHECK_FALSE(a.weights_at(0).w_q == base.weights_at(0).w_q);
}

TEST_CASE("divergence aborts with step context") {
    const Corpus train = synth_corpus(1, 2000, 11);
    Model m = init_random(tiny_config(), 1);
    TrainConfig tc;
    tc.steps = 3;
    tc.seq_len = 8;
    tc.batch_size = 2;
    tc.divergence_loss = 0.1;
    try {
        finetune(m, train, nullptr, tc);
        FAIL("expected divergence");
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
}

TEST_CASE("small-gamma replacement does not jump in perplexity at the start of fine-tuning") {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_ff = 64;
    c.vocab_size = 32;
    c.max_seq_len = 32;
    const Corpus train = synth_corpus(2, 100'000, 32);
    const Corpus valid = synth_corpus(2, 4096, 32, Split::valid);
    Model m = init_random(c, 2);
    TrainConfig tc;
    tc.steps = 300;
    tc.seq_len = 32;
    tc.batch_size = 8;
    finetune(m, train, nullptr, tc);

    const Corpus calib = synth_corpus(2, 2048, 32, Split::valid);
    const BiReport bi = score_model(m, calib, 16, 32);
    const auto pruned = choose_prune_set(bi, 0.25);
    prune_and_replace(m, select_bases(m, pruned, 4, DistanceMetricKind::proposed), {});

    tc.steps = 50;
    tc.eval_every = 1;
    tc.eval_windows = 0;
    tc.lr = 1e-3;
    tc.seed = 5;
    const FinetuneResult r = finetune(m, train, &valid, tc);
    REQUIRE(r.evals.size() == 51);
    for (const EvalPoint& e : r.evals) CHECK(e.valid_ppl <= 1.05 * r.evals.front().valid_ppl);
}
