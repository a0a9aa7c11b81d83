#include "flexi/training.hpp"

#include "flexi/inference.hpp"
#include "flexi/random.hpp"
#include "flexi/report_io.hpp"
#include "tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace flexi {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (seq_len < 2) throw std::invalid_argument("TrainConfig: seq_len must be >= 2");
    const auto unit = [](double b) { return b >= 0.0 && b < 1.0; };
    if (!unit(adam.beta1) || !unit(adam.beta2)) throw std::invalid_argument("TrainConfig: Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw std::invalid_argument("TrainConfig: Adam eps must be > 0");
}

Gradients Gradients::zeros_like(const Model& model) {
    Gradients g;
    for (const auto& p : list_params(model)) g.tensors.emplace_back(p.rows, p.cols);
    return g;
}

double Gradients::global_norm() const {
    double s = 0.0;
    for (const Matrix& m : tensors)
        for (double x : m.values()) s += x * x;
    return std::sqrt(s);
}

std::span<const double> Gradients::at(const ParamRef& ref) const {
    return tensors.at(ref.tensor).values().subspan(ref.begin, ref.end - ref.begin);
}

namespace {

using detail::BlockTape;
using detail::ForwardTape;

// Index of the first tensor of each block position in list_params order.
std::vector<std::size_t> block_offsets(const Model& model) {
    std::vector<std::size_t> off(model.blocks.size());
    std::size_t next = 2;  // tok_emb, pos_emb
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        off[i] = next;
        next += kind_of(model.blocks[i]) == BlockKindTag::native ? 8 : 14;
    }
    return off;
}

void check_batch(const Model& model, std::span<const Token> tokens, std::size_t batch, std::size_t seq_len) {
    if (batch == 0 || seq_len < 2) throw std::invalid_argument("loss: need batch >= 1 and seq_len >= 2");
    if (tokens.size() != batch * seq_len) throw std::invalid_argument("loss: token count != batch * seq_len");
    (void)model;
}

// Softmax cross-entropy over rows that have a successor in the same window.
// Writes d(loss)/d(logits) into `dlogits` when non-null.
double cross_entropy(const Matrix& logits, std::span<const Token> tokens, std::size_t batch,
                     std::size_t seq_len, Matrix* dlogits) {
    using Row = Eigen::Map<const Eigen::ArrayXd>;
    using MutRow = Eigen::Map<Eigen::ArrayXd>;
    const auto V = static_cast<Eigen::Index>(logits.cols());
    const double n = static_cast<double>(batch * (seq_len - 1));
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t + 1 < seq_len; ++t) {
            const std::size_t r = b * seq_len + t;
            const Token target = tokens[r + 1];
            const Row lr(logits.row(r).data(), V);
            const double mx = lr.maxCoeff();
            const double lse = mx + std::log((lr - mx).exp().sum());
            total += lse - lr[target];
            if (dlogits != nullptr) {
                MutRow dr(dlogits->row(r).data(), V);
                dr = (lr - lse).exp() / n;
                dr[target] -= 1.0 / n;
            }
        }
    }
    return total / n;
}

struct BlockGradSlots {
    std::array<Matrix*, 6> weight{};
    std::span<double> attn_gain;
    std::span<double> mlp_gain;
    std::array<Matrix*, 6> a{};
    std::array<Matrix*, 6> b{};
    std::span<double> attn_gamma;
    std::span<double> mlp_gamma;
};

// dx = dy * W^T (+ (dy * b^T) * a^T); accumulates weight and adapter grads.
void project_backward(const Matrix& x, const Matrix& w, const LoraAdapter* ad, const detail::ProjTape& pt,
                      const Matrix& dy, Matrix& dx, Matrix& dw, Matrix* da, Matrix* db) {
    if (dx.rows() != x.rows() || dx.cols() != x.cols()) dx = Matrix(x.rows(), x.cols());
    gemm(dy, false, w, true, dx);
    gemm(x, true, dy, false, dw, 1.0, 1.0);
    if (ad != nullptr) {
        Matrix dxa(dy.rows(), ad->rank());
        gemm(dy, false, ad->b, true, dxa);
        gemm(dxa, false, ad->a, true, dx, 1.0, 1.0);
        gemm(x, true, dxa, false, *da, 1.0, 1.0);
        gemm(pt.xa, true, dy, false, *db, 1.0, 1.0);
    }
}

void add_into(Matrix& dst, const Matrix& src) {
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Backward through one block. `dx` holds d(loss)/d(block output) on entry
// and d(loss)/d(block input) on exit.
void block_backward(const Model& model, std::size_t pos, const BlockTape& t, std::size_t batch,
                    std::size_t seq_len, Matrix& dx, BlockGradSlots& g) {
    const BlockWeights& w = model.weights_at(pos);
    const AdaptedBlock* ad = as_adapted(model.blocks[pos]);
    auto adapter = [&](Role r) -> const LoraAdapter* { return ad ? &ad->adapter(r) : nullptr; };
    const double eps = model.config.norm_eps;
    const auto ri = [](Role r) { return role_index(r); };

    // MLP sublayer.
    Matrix dm;
    if (ad != nullptr) {
        detail::output_norm_backward(t.m_hat, ad->mlp_norm.gamma, t.inv_std_m, dx, dm, g.mlp_gamma);
    } else {
        dm = dx;
    }
    Matrix dg;
    project_backward(t.g, w.w_down, adapter(Role::down), t.proj[ri(Role::down)], dm, dg,
                     *g.weight[ri(Role::down)], g.a[ri(Role::down)], g.b[ri(Role::down)]);
    detail::gelu_backward(t.u.values(), t.tanh_u, dg.values());
    Matrix dh2;
    project_backward(t.h2, w.w_up, adapter(Role::up), t.proj[ri(Role::up)], dg, dh2,
                     *g.weight[ri(Role::up)], g.a[ri(Role::up)], g.b[ri(Role::up)]);
    Matrix dx1_norm;
    detail::rms_norm_backward(t.x1, w.mlp_gain, t.inv_rms2, dh2, dx1_norm, g.mlp_gain);
    add_into(dx, dx1_norm);  // dx is now d/dx1

    // Attention sublayer.
    Matrix dout;
    if (ad != nullptr) {
        detail::output_norm_backward(t.o_hat, ad->attn_norm.gamma, t.inv_std_o, dx, dout, g.attn_gamma);
    } else {
        dout = dx;
    }
    Matrix datt;
    project_backward(t.att, w.w_o, adapter(Role::o), t.proj[ri(Role::o)], dout, datt,
                     *g.weight[ri(Role::o)], g.a[ri(Role::o)], g.b[ri(Role::o)]);
    Matrix dq, dk, dv;
    detail::causal_attention_backward(t.q, t.k, t.v, t.probs, datt, batch, seq_len, model.config.n_heads,
                                      dq, dk, dv);
    Matrix dh1, tmp;
    project_backward(t.h1, w.w_q, adapter(Role::q), t.proj[ri(Role::q)], dq, dh1, *g.weight[ri(Role::q)],
                     g.a[ri(Role::q)], g.b[ri(Role::q)]);
    project_backward(t.h1, w.w_k, adapter(Role::k), t.proj[ri(Role::k)], dk, tmp, *g.weight[ri(Role::k)],
                     g.a[ri(Role::k)], g.b[ri(Role::k)]);
    add_into(dh1, tmp);
    project_backward(t.h1, w.w_v, adapter(Role::v), t.proj[ri(Role::v)], dv, tmp, *g.weight[ri(Role::v)],
                     g.a[ri(Role::v)], g.b[ri(Role::v)]);
    add_into(dh1, tmp);
    Matrix dx_norm;
    detail::rms_norm_backward(t.x_in, w.attn_gain, t.inv_rms1, dh1, dx_norm, g.attn_gain);
    add_into(dx, dx_norm);
    (void)eps;
}

}  // namespace

double batch_loss(const Model& model, std::span<const Token> tokens, std::size_t batch, std::size_t seq_len) {
    check_batch(model, tokens, batch, seq_len);
    const Matrix logits = detail::forward_batch(model, tokens, batch, seq_len, false, nullptr, nullptr);
    return cross_entropy(logits, tokens, batch, seq_len, nullptr);
}

LossAndGrads loss_and_grads(const Model& model, std::span<const Token> tokens, std::size_t batch,
                            std::size_t seq_len) {
    check_batch(model, tokens, batch, seq_len);
    // Reused across calls so the activation buffers are allocated once.
    thread_local ForwardTape tape;
    const Matrix logits = detail::forward_batch(model, tokens, batch, seq_len, false, &tape, nullptr);
    Matrix dlogits(logits.rows(), logits.cols());
    LossAndGrads out;
    out.loss = cross_entropy(logits, tokens, batch, seq_len, &dlogits);
    if (!std::isfinite(out.loss)) throw TrainingError("non-finite loss " + std::to_string(out.loss));

    out.grads = Gradients::zeros_like(model);
    auto& G = out.grads.tensors;
    const std::size_t n_tensors = G.size();
    Matrix& g_unembed = G[n_tensors - 1];
    Matrix& g_final = G[n_tensors - 2];

    gemm(tape.hf, true, dlogits, false, g_unembed, 1.0, 1.0);
    Matrix dhf(tape.hf.rows(), tape.hf.cols());
    gemm(dlogits, false, model.unembed, true, dhf);
    Matrix dx;
    detail::rms_norm_backward(tape.x_final, model.final_gain, tape.inv_rms_f, dhf, dx, g_final.values());

    const auto offsets = block_offsets(model);
    for (std::size_t pos = model.blocks.size(); pos-- > 0;) {
        const BlockTape& t = tape.blocks[pos];
        if (t.skipped) continue;
        BlockGradSlots slots;
        const AdaptedBlock* ad = as_adapted(model.blocks[pos]);
        const std::size_t base = ad ? ad->base_index : pos;
        const std::size_t bo = offsets[base];
        for (Role r : kRoles) slots.weight[role_index(r)] = &G[bo + role_index(r)];
        slots.attn_gain = G[bo + 6].values();
        slots.mlp_gain = G[bo + 7].values();
        if (ad != nullptr) {
            const std::size_t ao = offsets[pos];
            for (Role r : kRoles) {
                slots.a[role_index(r)] = &G[ao + 2 * role_index(r)];
                slots.b[role_index(r)] = &G[ao + 2 * role_index(r) + 1];
            }
            slots.attn_gamma = G[ao + 12].values();
            slots.mlp_gamma = G[ao + 13].values();
        }
        block_backward(model, pos, t, batch, seq_len, dx, slots);
    }

    Matrix& g_tok = G[0];
    Matrix& g_pos = G[1];
    const std::size_t d = model.config.d_model;
    for (std::size_t r = 0; r < dx.rows(); ++r) {
        auto src = dx.row(r);
        auto te = g_tok.row(tokens[r]);
        auto pe = g_pos.row(r % seq_len);
        for (std::size_t c = 0; c < d; ++c) {
            te[c] += src[c];
            pe[c] += src[c];
        }
    }
    return out;
}

std::vector<bool> trainable_mask(const Model& model, TrainableSet set) {
    const auto params = list_params(model);
    std::vector<bool> mask(params.size(), set == TrainableSet::all);
    if (set == TrainableSet::all) return mask;
    std::vector<bool> is_base(model.blocks.size(), false);
    for (const Block& b : model.blocks)
        if (const AdaptedBlock* a = as_adapted(b)) is_base.at(a->base_index) = true;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        switch (p.cls) {
            case ParamClass::adapter_a:
            case ParamClass::adapter_b:
            case ParamClass::gamma: mask[i] = true; break;
            case ParamClass::native_weight:
            case ParamClass::norm_gain: mask[i] = is_base[p.block]; break;
            default: mask[i] = false;
        }
    }
    return mask;
}

void Adam::step(std::span<const std::span<double>> params, std::span<const Matrix> grads,
                const std::vector<bool>& mask, double lr) {
    if (params.size() != grads.size() || mask.size() != params.size()) {
        throw std::invalid_argument("Adam::step: params, grads and mask disagree in length");
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("Adam::step: parameter set changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!mask[i]) continue;
        auto p = params[i];
        auto g = grads[i].values();
        if (g.size() != p.size()) throw std::invalid_argument("Adam::step: gradient shape mismatch");
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void Adam::step(Model& model, const Gradients& grads, const std::vector<bool>& mask, double lr) {
    auto params = list_params(model);
    std::vector<std::span<double>> spans;
    spans.reserve(params.size());
    for (auto& p : params) spans.push_back(p.values);
    step(spans, grads.tensors, mask, lr);
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
    if (step < cfg.warmup_steps) {
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    const std::size_t span = cfg.steps > cfg.warmup_steps ? cfg.steps - cfg.warmup_steps : 0;
    if (cfg.schedule == Schedule::constant || span <= 1) return cfg.lr;
    const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span - 1);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return cfg.lr * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
}

namespace {

// The backward pass allocates and frees multi-megabyte temporaries every
// step. With glibc's defaults those round-trip through mmap or get trimmed
// back to the OS, and the page faults cost more than the arithmetic.
void keep_freed_memory() {
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
#endif
}

}  // namespace

FinetuneResult finetune(Model& model, const Corpus& train, const Corpus* valid, const TrainConfig& cfg) {
    cfg.validate();
    keep_freed_memory();
    FinetuneResult result;
    if (cfg.steps == 0) return result;
    if (train.tokens.size() < cfg.seq_len) throw std::invalid_argument("finetune: training corpus shorter than seq_len");

    auto evaluate = [&](std::size_t step) {
        if (valid == nullptr) return;
        result.evals.push_back({step, perplexity(model, *valid, cfg.seq_len, cfg.eval_windows)});
    };
    evaluate(0);

    const auto mask = trainable_mask(model, cfg.trainable);
    Adam adam(cfg.adam);
    Rng rng(derive_seed(cfg.seed, "batches"));
    std::uniform_int_distribution<std::size_t> offset(0, train.tokens.size() - cfg.seq_len);
    std::vector<Token> batch(cfg.batch_size * cfg.seq_len);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t start = offset(rng);
            std::copy_n(train.tokens.begin() + static_cast<std::ptrdiff_t>(start), cfg.seq_len,
                        batch.begin() + static_cast<std::ptrdiff_t>(b * cfg.seq_len));
        }
        LossAndGrads lg;
        try {
            lg = loss_and_grads(model, batch, cfg.batch_size, cfg.seq_len);
        } catch (const TrainingError& e) {
            throw TrainingError("step " + std::to_string(step + 1) + ": " + e.what());
        }
        if (lg.loss > cfg.divergence_loss) {
            throw TrainingError("step " + std::to_string(step + 1) + ": loss " + std::to_string(lg.loss) +
                                " exceeds divergence threshold " + std::to_string(cfg.divergence_loss));
        }
        result.train_loss.push_back(lg.loss);
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (std::size_t i = 0; i < mask.size(); ++i)
                if (mask[i])
                    for (double x : lg.grads.tensors[i].values()) sq += x * x;
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) {
                const double s = cfg.grad_clip / norm;
                for (Matrix& g : lg.grads.tensors)
                    for (double& x : g.values()) x *= s;
            }
        }
        adam.step(model, lg.grads, mask, scheduled_lr(cfg, step));
        const std::size_t done = step + 1;
        if (valid != nullptr && ((cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps)) {
            evaluate(done);
        }
    }
    return result;
}

void write_loss_csv(const FinetuneResult& result, const std::filesystem::path& path) {
    CsvTable t;
    t.header = {"step", "train_loss", "valid_ppl"};
    std::size_t e = 0;
    const std::size_t last = result.train_loss.size();
    for (std::size_t step = 0; step <= last; ++step) {
        std::string ppl;
        while (e < result.evals.size() && result.evals[e].step < step) ++e;
        if (e < result.evals.size() && result.evals[e].step == step) ppl = format_double_exact(result.evals[e].valid_ppl);
        if (step == 0 && ppl.empty()) continue;
        t.rows.push_back({std::to_string(step), step == 0 ? "" : format_double_exact(result.train_loss[step - 1]), ppl});
    }
    write_csv(t, path);
}

}  // namespace flexi
