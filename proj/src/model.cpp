#include "flexi/model.hpp"

#include "flexi/random.hpp"
#include "tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace flexi {

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 1) {
        throw std::invalid_argument("ModelConfig: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("ModelConfig: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) {
        throw std::invalid_argument("ModelConfig: norm_eps must be positive");
    }
}

std::string_view role_name(Role role) {
    switch (role) {
        case Role::q: return "q";
        case Role::k: return "k";
        case Role::v: return "v";
        case Role::o: return "o";
        case Role::up: return "up";
        case Role::down: return "down";
    }
    return "?";
}

BlockWeights BlockWeights::zeros(const ModelConfig& cfg) {
    const auto d = cfg.d_model;
    return BlockWeights{Matrix(d, d),         Matrix(d, d), Matrix(d, d), Matrix(d, d),
                        Matrix(d, cfg.d_ff),  Matrix(cfg.d_ff, d),
                        std::vector<double>(d, 1.0), std::vector<double>(d, 1.0)};
}

Matrix& BlockWeights::weight(Role role) {
    return const_cast<Matrix&>(std::as_const(*this).weight(role));
}

const Matrix& BlockWeights::weight(Role role) const {
    switch (role) {
        case Role::q: return w_q;
        case Role::k: return w_k;
        case Role::v: return w_v;
        case Role::o: return w_o;
        case Role::up: return w_up;
        case Role::down: return w_down;
    }
    throw std::logic_error("bad role");
}

std::size_t BlockWeights::param_count() const {
    std::size_t n = attn_gain.size() + mlp_gain.size();
    for (Role r : kRoles) n += weight(r).size();
    return n;
}

BlockKindTag kind_of(const Block& b) {
    switch (b.index()) {
        case 0: return BlockKindTag::native;
        case 1: return BlockKindTag::shared;
        default: return BlockKindTag::repeated;
    }
}

std::string_view kind_name(BlockKindTag k) {
    switch (k) {
        case BlockKindTag::native: return "native";
        case BlockKindTag::shared: return "shared";
        case BlockKindTag::repeated: return "repeated";
    }
    return "?";
}

const AdaptedBlock* as_adapted(const Block& b) {
    if (auto* s = std::get_if<SharedBlock>(&b)) return s;
    if (auto* r = std::get_if<RepeatedBlock>(&b)) return r;
    return nullptr;
}

AdaptedBlock* as_adapted(Block& b) {
    return const_cast<AdaptedBlock*>(as_adapted(std::as_const(b)));
}

const BlockWeights& Model::weights_at(std::size_t position) const {
    const Block& b = blocks.at(position);
    if (auto* n = std::get_if<NativeBlock>(&b)) return n->weights;
    const std::size_t base = as_adapted(b)->base_index;
    if (base >= blocks.size()) {
        throw std::invalid_argument("block " + std::to_string(position) + " references missing base " +
                                    std::to_string(base));
    }
    auto* n = std::get_if<NativeBlock>(&blocks[base]);
    if (n == nullptr) {
        throw std::invalid_argument("block " + std::to_string(position) + " base " +
                                    std::to_string(base) + " is not a native block");
    }
    return n->weights;
}

std::size_t Model::count_kind(BlockKindTag k) const {
    return static_cast<std::size_t>(
        std::count_if(blocks.begin(), blocks.end(), [k](const Block& b) { return kind_of(b) == k; }));
}

namespace {

void expect_shape(const Matrix& m, std::size_t r, std::size_t c, const std::string& what) {
    if (m.rows() != r || m.cols() != c) {
        throw std::invalid_argument(what + ": expected " + std::to_string(r) + "x" +
                                    std::to_string(c) + ", got " + m.shape_string());
    }
}

void expect_len(std::span<const double> v, std::size_t n, const std::string& what) {
    if (v.size() != n) {
        throw std::invalid_argument(what + ": expected length " + std::to_string(n) + ", got " +
                                    std::to_string(v.size()));
    }
}

std::pair<std::size_t, std::size_t> role_shape(const ModelConfig& c, Role r) {
    if (r == Role::up) return {c.d_model, c.d_ff};
    if (r == Role::down) return {c.d_ff, c.d_model};
    return {c.d_model, c.d_model};
}

}  // namespace

void Model::validate() const {
    config.validate();
    const auto d = config.d_model;
    expect_shape(tok_emb, config.vocab_size, d, "tok_emb");
    expect_shape(pos_emb, config.max_seq_len, d, "pos_emb");
    expect_shape(unembed, d, config.vocab_size, "unembed");
    expect_len(final_gain, d, "final_gain");
    if (blocks.empty()) throw std::invalid_argument("model has no blocks");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string tag = "block " + std::to_string(i);
        if (auto* n = std::get_if<NativeBlock>(&blocks[i])) {
            for (Role r : kRoles) {
                auto [rows, cols] = role_shape(config, r);
                expect_shape(n->weights.weight(r), rows, cols, tag + " w_" + std::string(role_name(r)));
            }
            expect_len(n->weights.attn_gain, d, tag + " attn_gain");
            expect_len(n->weights.mlp_gain, d, tag + " mlp_gain");
            continue;
        }
        const AdaptedBlock* a = as_adapted(blocks[i]);
        (void)weights_at(i);
        const std::size_t rank = a->rank();
        for (Role r : kRoles) {
            auto [rows, cols] = role_shape(config, r);
            expect_shape(a->adapter(r).a, rows, rank, tag + " adapter a_" + std::string(role_name(r)));
            expect_shape(a->adapter(r).b, rank, cols, tag + " adapter b_" + std::string(role_name(r)));
        }
        expect_len(a->attn_norm.gamma, d, tag + " attn gamma");
        expect_len(a->mlp_norm.gamma, d, tag + " mlp gamma");
        if (!(a->attn_norm.eps > 0.0) || !(a->mlp_norm.eps > 0.0)) {
            throw std::invalid_argument(tag + ": output norm eps must be positive");
        }
    }
}

Model init_random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    constexpr double kScale = 0.02;
    Rng rng(seed);
    Model m;
    m.config = config;
    const auto d = config.d_model;
    m.tok_emb = Matrix(config.vocab_size, d);
    m.pos_emb = Matrix(config.max_seq_len, d);
    fill_normal(m.tok_emb.values(), rng, kScale);
    fill_normal(m.pos_emb.values(), rng, kScale);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        BlockWeights w = BlockWeights::zeros(config);
        for (Role r : kRoles) fill_normal(w.weight(r).values(), rng, kScale);
        m.blocks.emplace_back(NativeBlock{std::move(w)});
    }
    m.final_gain.assign(d, 1.0);
    m.unembed = Matrix(d, config.vocab_size);
    fill_normal(m.unembed.values(), rng, kScale);
    return m;
}

namespace detail {

namespace {

using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using ConstHead = Eigen::Map<const RM, 0, Strided>;
using MutHead = Eigen::Map<RM, 0, Strided>;
using ProbMap = Eigen::Map<RM>;
using ConstProbMap = Eigen::Map<const RM>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

void rms_norm(const Matrix& x, std::span<const double> gain, double eps, Matrix& out,
              std::vector<double>& inv_rms) {
    const std::size_t n = x.cols();
    if (out.rows() != x.rows() || out.cols() != n) out = Matrix(x.rows(), n);
    inv_rms.resize(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        double ms = 0.0;
        for (double v : xr) ms += v * v;
        ms /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(ms + eps);
        inv_rms[r] = inv;
        auto o = out.row(r);
        for (std::size_t c = 0; c < n; ++c) o[c] = xr[c] * inv * gain[c];
    }
}

void rms_norm_backward(const Matrix& x, std::span<const double> gain,
                       const std::vector<double>& inv_rms, const Matrix& dy, Matrix& dx,
                       std::span<double> dgain) {
    const std::size_t n = x.cols();
    if (dx.rows() != x.rows() || dx.cols() != n) dx = Matrix(x.rows(), n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto dyr = dy.row(r);
        auto dxr = dx.row(r);
        const double inv = inv_rms[r];
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const double xhat = xr[c] * inv;
            const double dxhat = dyr[c] * gain[c];
            dgain[c] += dyr[c] * xhat;
            dot += dxhat * xhat;
        }
        dot /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
            const double xhat = xr[c] * inv;
            dxr[c] = inv * (dyr[c] * gain[c] - xhat * dot);
        }
    }
}

void output_norm(const Matrix& h, std::span<const double> gamma, double eps, Matrix& out,
                 Matrix& normalized, std::vector<double>& inv_std) {
    const std::size_t n = h.cols();
    if (out.rows() != h.rows() || out.cols() != n) out = Matrix(h.rows(), n);
    if (normalized.rows() != h.rows() || normalized.cols() != n) normalized = Matrix(h.rows(), n);
    inv_std.resize(h.rows());
    for (std::size_t r = 0; r < h.rows(); ++r) {
        auto hr = h.row(r);
        double mean = 0.0;
        for (double v : hr) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : hr) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        auto nr = normalized.row(r);
        auto o = out.row(r);
        for (std::size_t c = 0; c < n; ++c) {
            nr[c] = (hr[c] - mean) * inv;
            o[c] = nr[c] * gamma[c];
        }
    }
}

void output_norm_backward(const Matrix& normalized, std::span<const double> gamma,
                          const std::vector<double>& inv_std, const Matrix& dy, Matrix& dh,
                          std::span<double> dgamma) {
    const std::size_t n = normalized.cols();
    if (dh.rows() != normalized.rows() || dh.cols() != n) dh = Matrix(normalized.rows(), n);
    for (std::size_t r = 0; r < normalized.rows(); ++r) {
        auto nr = normalized.row(r);
        auto dyr = dy.row(r);
        auto dhr = dh.row(r);
        double mean_dn = 0.0;
        double mean_dn_n = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const double dn = dyr[c] * gamma[c];
            dgamma[c] += dyr[c] * nr[c];
            mean_dn += dn;
            mean_dn_n += dn * nr[c];
        }
        mean_dn /= static_cast<double>(n);
        mean_dn_n /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
            dhr[c] = inv_std[r] * (dyr[c] * gamma[c] - mean_dn - nr[c] * mean_dn_n);
        }
    }
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// tanh via a vectorized exp; glibc's scalar tanh dominated the MLP cost.
void gelu_forward(std::span<const double> u, std::span<double> out, std::span<double> tanh_out) {
    const Eigen::Map<const Eigen::ArrayXd> x(u.data(), static_cast<Eigen::Index>(u.size()));
    Eigen::Map<Eigen::ArrayXd> o(out.data(), static_cast<Eigen::Index>(out.size()));
    if (tanh_out.empty()) {
        o = x - x / (1.0 + (2.0 * kGeluC * (x + 0.044715 * x.cube())).exp());
        return;
    }
    Eigen::Map<Eigen::ArrayXd> t(tanh_out.data(), static_cast<Eigen::Index>(tanh_out.size()));
    t = 1.0 - 2.0 / (1.0 + (2.0 * kGeluC * (x + 0.044715 * x.cube())).exp());
    o = 0.5 * x * (1.0 + t);
}

void gelu_backward(std::span<const double> u, std::span<const double> tanh_u, std::span<double> grad) {
    const auto n = static_cast<Eigen::Index>(u.size());
    const Eigen::Map<const Eigen::ArrayXd> x(u.data(), n);
    const Eigen::Map<const Eigen::ArrayXd> t(tanh_u.data(), n);
    Eigen::Map<Eigen::ArrayXd> g(grad.data(), n);
    g *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x.square());
}

void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t batch,
                      std::size_t seq_len, std::size_t heads, Matrix& out,
                      AlignedBuffer& probs) {
    const std::size_t d = q.cols();
    const std::size_t dh = d / heads;
    const auto T = static_cast<Eigen::Index>(seq_len);
    const auto DH = static_cast<Eigen::Index>(dh);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (out.rows() != q.rows() || out.cols() != d) out = Matrix(q.rows(), d);
    probs.resize(batch * heads * seq_len * seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq_len * d + h * dh;
            ConstHead qh(q.data() + off, T, DH, Strided(d));
            ConstHead kh(k.data() + off, T, DH, Strided(d));
            ConstHead vh(v.data() + off, T, DH, Strided(d));
            ProbMap p(probs.data() + (b * heads + h) * seq_len * seq_len, T, T);
            p.noalias() = scale * (qh * kh.transpose());
            for (Eigen::Index i = 0; i < T; ++i) {
                auto row = p.row(i).head(i + 1).array();
                row = (row - row.maxCoeff()).exp();
                row /= row.sum();
                p.row(i).tail(T - i - 1).setZero();
            }
            MutHead oh(out.data() + off, T, DH, Strided(d));
            oh.noalias() = p * vh;
        }
    }
}

void causal_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AlignedBuffer& probs, const Matrix& dout,
                               std::size_t batch, std::size_t seq_len, std::size_t heads,
                               Matrix& dq, Matrix& dk, Matrix& dv) {
    const std::size_t d = q.cols();
    const std::size_t dh = d / heads;
    const auto T = static_cast<Eigen::Index>(seq_len);
    const auto DH = static_cast<Eigen::Index>(dh);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (Matrix* m : {&dq, &dk, &dv})
        if (m->rows() != q.rows() || m->cols() != d) *m = Matrix(q.rows(), d);
    RM dp(T, T);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq_len * d + h * dh;
            ConstHead qh(q.data() + off, T, DH, Strided(d));
            ConstHead kh(k.data() + off, T, DH, Strided(d));
            ConstHead vh(v.data() + off, T, DH, Strided(d));
            ConstHead doh(dout.data() + off, T, DH, Strided(d));
            ConstProbMap p(probs.data() + (b * heads + h) * seq_len * seq_len, T, T);
            MutHead dqh(dq.data() + off, T, DH, Strided(d));
            MutHead dkh(dk.data() + off, T, DH, Strided(d));
            MutHead dvh(dv.data() + off, T, DH, Strided(d));

            dvh.noalias() = p.transpose() * doh;
            dp.noalias() = doh * vh.transpose();
            for (Eigen::Index i = 0; i < T; ++i) {
                auto pr = p.row(i).head(i + 1).array();
                auto dr = dp.row(i).head(i + 1).array();
                const double s = (dr * pr).sum();
                dr = pr * (dr - s) * scale;
                dp.row(i).tail(T - i - 1).setZero();
            }
            dqh.noalias() = dp * kh;
            dkh.noalias() = dp.transpose() * qh;
        }
    }
}

namespace {

void project(const Matrix& x, const Matrix& w, const LoraAdapter* ad, Matrix& y, ProjTape& pt) {
    if (y.rows() != x.rows() || y.cols() != w.cols()) y = Matrix(x.rows(), w.cols());
    gemm(x, false, w, false, y);
    if (ad != nullptr) {
        if (pt.xa.rows() != x.rows() || pt.xa.cols() != ad->rank()) pt.xa = Matrix(x.rows(), ad->rank());
        gemm(x, false, ad->a, false, pt.xa);
        gemm(pt.xa, false, ad->b, false, y, 1.0, 1.0);
    }
}

// Runs one block in place on the residual stream x (batch*T rows).
void run_block(const Model& model, std::size_t pos, Matrix& x, std::size_t batch,
               std::size_t seq_len, BlockTape& t, bool keep_tanh) {
    const ModelConfig& cfg = model.config;
    const BlockWeights& w = model.weights_at(pos);
    const AdaptedBlock* ad = as_adapted(model.blocks[pos]);
    auto adapter = [&](Role r) -> const LoraAdapter* { return ad ? &ad->adapter(r) : nullptr; };

    t.skipped = false;
    t.x_in = x;
    rms_norm(x, w.attn_gain, cfg.norm_eps, t.h1, t.inv_rms1);
    project(t.h1, w.w_q, adapter(Role::q), t.q, t.proj[role_index(Role::q)]);
    project(t.h1, w.w_k, adapter(Role::k), t.k, t.proj[role_index(Role::k)]);
    project(t.h1, w.w_v, adapter(Role::v), t.v, t.proj[role_index(Role::v)]);
    causal_attention(t.q, t.k, t.v, batch, seq_len, cfg.n_heads, t.att, t.probs);
    project(t.att, w.w_o, adapter(Role::o), t.o, t.proj[role_index(Role::o)]);

    auto add_into = [](Matrix& dst, const Matrix& src) {
        auto dv = dst.values();
        auto sv = src.values();
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += sv[i];
    };

    if (ad != nullptr) {
        Matrix normed;
        output_norm(t.o, ad->attn_norm.gamma, ad->attn_norm.eps, normed, t.o_hat, t.inv_std_o);
        add_into(x, normed);
    } else {
        add_into(x, t.o);
    }
    t.x1 = x;

    rms_norm(x, w.mlp_gain, cfg.norm_eps, t.h2, t.inv_rms2);
    project(t.h2, w.w_up, adapter(Role::up), t.u, t.proj[role_index(Role::up)]);
    if (t.g.rows() != t.u.rows() || t.g.cols() != t.u.cols()) t.g = Matrix(t.u.rows(), t.u.cols());
    if (keep_tanh) {
        if (t.tanh_u.size() != t.u.size()) t.tanh_u.resize(t.u.size());
        gelu_forward(t.u.values(), t.g.values(), t.tanh_u);
    } else {
        gelu_forward(t.u.values(), t.g.values(), {});
    }
    project(t.g, w.w_down, adapter(Role::down), t.m, t.proj[role_index(Role::down)]);
    if (ad != nullptr) {
        Matrix normed;
        output_norm(t.m, ad->mlp_norm.gamma, ad->mlp_norm.eps, normed, t.m_hat, t.inv_std_m);
        add_into(x, normed);
    } else {
        add_into(x, t.m);
    }
}

}  // namespace

Matrix forward_batch(const Model& model, std::span<const Token> tokens, std::size_t batch,
                     std::size_t seq_len, bool skip_shared, ForwardTape* tape,
                     std::vector<Matrix>* trace) {
    const ModelConfig& cfg = model.config;
    if (tokens.size() != batch * seq_len) {
        throw InputError("forward: token count " + std::to_string(tokens.size()) +
                         " != batch * seq_len");
    }
    if (seq_len > cfg.max_seq_len) {
        throw InputError("forward: sequence length " + std::to_string(seq_len) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (Token t : tokens) {
        if (t >= cfg.vocab_size) {
            throw InputError("forward: token id " + std::to_string(t) + " out of range for vocab " +
                             std::to_string(cfg.vocab_size));
        }
    }
    const std::size_t d = cfg.d_model;
    const std::size_t rows = batch * seq_len;
    Matrix x(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
        auto te = model.tok_emb.row(tokens[r]);
        auto pe = model.pos_emb.row(r % seq_len);
        auto xr = x.row(r);
        for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }

    BlockTape scratch;
    if (tape != nullptr) {
        tape->batch = batch;
        tape->seq_len = seq_len;
        tape->blocks.resize(model.blocks.size());
    }
    if (trace != nullptr) trace->clear();
    for (std::size_t pos = 0; pos < model.blocks.size(); ++pos) {
        if (trace != nullptr) trace->push_back(x);
        BlockTape& t = tape != nullptr ? tape->blocks[pos] : scratch;
        if (skip_shared && kind_of(model.blocks[pos]) == BlockKindTag::shared) {
            t.skipped = true;
            continue;
        }
        run_block(model, pos, x, batch, seq_len, t, tape != nullptr);
    }
    if (trace != nullptr) trace->push_back(x);

    Matrix hf;
    std::vector<double> inv_rms_f;
    rms_norm(x, model.final_gain, cfg.norm_eps, hf, inv_rms_f);
    Matrix logits(rows, cfg.vocab_size);
    gemm(hf, false, model.unembed, false, logits);
    if (tape != nullptr) {
        tape->x_final = std::move(x);
        tape->hf = std::move(hf);
        tape->inv_rms_f = std::move(inv_rms_f);
    }
    return logits;
}

}  // namespace detail

ForwardResult forward(const Model& model, std::span<const Token> tokens, const ForwardOptions& opts) {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    ForwardResult res;
    if (opts.trace) {
        HiddenTrace tr;
        res.logits = detail::forward_batch(model, tokens, 1, tokens.size(), opts.skip_shared, nullptr,
                                           &tr.boundaries);
        res.trace = std::move(tr);
    } else {
        res.logits = detail::forward_batch(model, tokens, 1, tokens.size(), opts.skip_shared, nullptr,
                                           nullptr);
    }
    return res;
}

Matrix apply_block(const Model& model, std::size_t position, const Matrix& x) {
    if (position >= model.blocks.size()) throw std::out_of_range("apply_block: bad position");
    if (x.cols() != model.config.d_model) throw ShapeError("apply_block: width mismatch");
    Matrix out = x;
    detail::BlockTape t;
    detail::run_block(model, position, out, 1, x.rows(), t, false);
    return out;
}

std::string_view param_class_name(ParamClass c) {
    switch (c) {
        case ParamClass::token_embedding: return "token_embedding";
        case ParamClass::position_embedding: return "position_embedding";
        case ParamClass::native_weight: return "native_weight";
        case ParamClass::norm_gain: return "norm_gain";
        case ParamClass::adapter_a: return "adapter_a";
        case ParamClass::adapter_b: return "adapter_b";
        case ParamClass::gamma: return "gamma";
        case ParamClass::final_gain: return "final_gain";
        case ParamClass::unembedding: return "unembedding";
    }
    return "?";
}

namespace {

template <class T, class M>
std::vector<BasicParamTensor<T>> collect_params(M& model) {
    std::vector<BasicParamTensor<T>> out;
    auto mat = [&](std::string name, ParamClass cls, std::size_t block, auto& m) {
        out.push_back({std::move(name), cls, block, m.rows(), m.cols(), m.values()});
    };
    auto vec = [&](std::string name, ParamClass cls, std::size_t block, auto& v) {
        out.push_back({std::move(name), cls, block, 1, v.size(), std::span<T>(v)});
    };
    mat("tok_emb", ParamClass::token_embedding, kNoBlock, model.tok_emb);
    mat("pos_emb", ParamClass::position_embedding, kNoBlock, model.pos_emb);
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        auto& b = model.blocks[i];
        if (auto* n = std::get_if<NativeBlock>(&b)) {
            for (Role r : kRoles) {
                mat(prefix + "w_" + std::string(role_name(r)), ParamClass::native_weight, i,
                    n->weights.weight(r));
            }
            vec(prefix + "attn_gain", ParamClass::norm_gain, i, n->weights.attn_gain);
            vec(prefix + "mlp_gain", ParamClass::norm_gain, i, n->weights.mlp_gain);
        } else {
            auto* a = as_adapted(b);
            for (Role r : kRoles) {
                mat(prefix + "a_" + std::string(role_name(r)), ParamClass::adapter_a, i, a->adapter(r).a);
                mat(prefix + "b_" + std::string(role_name(r)), ParamClass::adapter_b, i, a->adapter(r).b);
            }
            vec(prefix + "attn_gamma", ParamClass::gamma, i, a->attn_norm.gamma);
            vec(prefix + "mlp_gamma", ParamClass::gamma, i, a->mlp_norm.gamma);
        }
    }
    vec("final_gain", ParamClass::final_gain, kNoBlock, model.final_gain);
    mat("unembed", ParamClass::unembedding, kNoBlock, model.unembed);
    return out;
}

}  // namespace

std::vector<ParamTensor> list_params(Model& model) { return collect_params<double>(model); }
std::vector<ConstParamTensor> list_params(const Model& model) {
    return collect_params<const double>(model);
}

ParamCount count_params(const Model& model) {
    ParamCount pc;
    pc.by_kind["embedding"] = model.tok_emb.size() + model.pos_emb.size();
    pc.by_kind["native"] = 0;
    pc.by_kind["adapter"] = 0;
    pc.by_kind["gamma"] = 0;
    for (const Block& b : model.blocks) {
        if (auto* n = std::get_if<NativeBlock>(&b)) {
            pc.by_kind["native"] += n->weights.param_count();
        } else {
            const AdaptedBlock* a = as_adapted(b);
            for (const LoraAdapter& ad : a->adapters) pc.by_kind["adapter"] += ad.a.size() + ad.b.size();
            pc.by_kind["gamma"] += a->attn_norm.gamma.size() + a->mlp_norm.gamma.size();
        }
    }
    pc.by_kind["final_norm"] = model.final_gain.size();
    pc.by_kind["unembedding"] = model.unembed.size();
    for (const auto& [_, n] : pc.by_kind) pc.total += n;
    return pc;
}

double compression_ratio(const Model& model, const Model& reference) {
    return 1.0 - static_cast<double>(count_params(model).total) /
                     static_cast<double>(count_params(reference).total);
}

}  // namespace flexi
