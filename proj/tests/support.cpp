#include "support.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <variant>

namespace oracle {

namespace {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

Rows to_rows(const Matrix& m) {
    Rows r(m.rows(), Vec(m.cols()));
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
    return r;
}

// y = x W (+ x A B)
Vec vec_mat(const Vec& x, const Matrix& w) {
    Vec y(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[i] * w(i, j);
    return y;
}

Vec project(const Vec& x, const Matrix& w, const flexi::LoraAdapter* ad) {
    Vec y = vec_mat(x, w);
    if (ad) {
        const Vec xa = vec_mat(x, ad->a);
        const Vec d = vec_mat(xa, ad->b);
        for (std::size_t j = 0; j < y.size(); ++j) y[j] += d[j];
    }
    return y;
}

Vec rms(const Vec& x, const Vec& g, double eps) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / std::sqrt(ms + eps) * g[i];
    return y;
}

double gelu(double x) {
    const double c = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

Vec output_norm(const Vec& h, const Vec& gamma, double eps) {
    double mu = 0.0;
    for (double v : h) mu += v;
    mu /= static_cast<double>(h.size());
    double var = 0.0;
    for (double v : h) var += (v - mu) * (v - mu);
    var /= static_cast<double>(h.size());
    Vec y(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) y[i] = (h[i] - mu) / std::sqrt(var + eps) * gamma[i];
    return y;
}

Matrix forward(const Model& model, const std::vector<Token>& tokens, bool skip_shared) {
    const auto& cfg = model.config;
    const std::size_t T = tokens.size(), d = cfg.d_model, H = cfg.n_heads, dh = d / H;
    Rows x(T, Vec(d));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < d; ++c) x[t][c] = model.tok_emb(tokens[t], c) + model.pos_emb(t, c);

    for (std::size_t pos = 0; pos < model.blocks.size(); ++pos) {
        const flexi::Block& blk = model.blocks[pos];
        if (skip_shared && std::holds_alternative<flexi::SharedBlock>(blk)) continue;
        const flexi::AdaptedBlock* ad = flexi::as_adapted(blk);
        const flexi::BlockWeights& w =
            ad ? std::get<flexi::NativeBlock>(model.blocks[ad->base_index]).weights : std::get<flexi::NativeBlock>(blk).weights;
        auto A = [&](flexi::Role r) { return ad ? &ad->adapter(r) : nullptr; };

        Rows q(T), k(T), v(T);
        for (std::size_t t = 0; t < T; ++t) {
            const Vec h = rms(x[t], w.attn_gain, cfg.norm_eps);
            q[t] = project(h, w.w_q, A(flexi::Role::q));
            k[t] = project(h, w.w_k, A(flexi::Role::k));
            v[t] = project(h, w.w_v, A(flexi::Role::v));
        }
        Rows att(T, Vec(d, 0.0));
        for (std::size_t hd = 0; hd < H; ++hd) {
            for (std::size_t i = 0; i < T; ++i) {
                Vec s(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) dot += q[i][hd * dh + c] * k[j][hd * dh + c];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (double& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j <= i; ++j)
                    for (std::size_t c = 0; c < dh; ++c) att[i][hd * dh + c] += s[j] / z * v[j][hd * dh + c];
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            Vec o = project(att[t], w.w_o, A(flexi::Role::o));
            if (ad) o = output_norm(o, ad->attn_norm.gamma, ad->attn_norm.eps);
            for (std::size_t c = 0; c < d; ++c) x[t][c] += o[c];
        }
        for (std::size_t t = 0; t < T; ++t) {
            const Vec h = rms(x[t], w.mlp_gain, cfg.norm_eps);
            Vec u = project(h, w.w_up, A(flexi::Role::up));
            for (double& e : u) e = gelu(e);
            Vec m = project(u, w.w_down, A(flexi::Role::down));
            if (ad) m = output_norm(m, ad->mlp_norm.gamma, ad->mlp_norm.eps);
            for (std::size_t c = 0; c < d; ++c) x[t][c] += m[c];
        }
    }
    Matrix logits(T, cfg.vocab_size);
    for (std::size_t t = 0; t < T; ++t) {
        const Vec y = vec_mat(rms(x[t], model.final_gain, cfg.norm_eps), model.unembed);
        for (std::size_t c = 0; c < y.size(); ++c) logits(t, c) = y[c];
    }
    return logits;
}

double loss(const Model& model, const std::vector<Token>& tokens, std::size_t batch, std::size_t seq_len) {
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const std::vector<Token> win(tokens.begin() + static_cast<long>(b * seq_len),
                                     tokens.begin() + static_cast<long>((b + 1) * seq_len));
        const Matrix lg = forward(model, win);
        for (std::size_t t = 0; t + 1 < seq_len; ++t) {
            double mx = -1e300;
            for (std::size_t c = 0; c < lg.cols(); ++c) mx = std::max(mx, lg(t, c));
            double z = 0.0;
            for (std::size_t c = 0; c < lg.cols(); ++c) z += std::exp(lg(t, c) - mx);
            total += mx + std::log(z) - lg(t, win[t + 1]);
        }
    }
    return total / static_cast<double>(batch * (seq_len - 1));
}

std::vector<double> block_influence(const flexi::HiddenTrace& t) {
    std::vector<double> out;
    for (std::size_t i = 0; i + 1 < t.boundaries.size(); ++i) {
        const Matrix& x = t.boundaries[i];
        const Matrix& y = t.boundaries[i + 1];
        double sum = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            double dot = 0.0, nx = 0.0, ny = 0.0;
            for (std::size_t c = 0; c < x.cols(); ++c) {
                dot += x(r, c) * y(r, c);
                nx += x(r, c) * x(r, c);
                ny += y(r, c) * y(r, c);
            }
            sum += dot / (std::sqrt(nx) * std::sqrt(ny));
        }
        out.push_back(1.0 - sum / static_cast<double>(x.rows()));
    }
    return out;
}

std::vector<double> singular_values(const Matrix& w) {
    Eigen::MatrixXd m(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) m(static_cast<long>(i), static_cast<long>(j)) = w(i, j);
    const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
    return {s.data(), s.data() + s.size()};
}

}  // namespace oracle

namespace testing_util {

flexi::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double lo, double hi) {
    flexi::Matrix m(rows, cols);
    flexi::Rng rng(seed);
    flexi::fill_uniform(m.values(), rng, lo, hi);
    return m;
}

flexi::Matrix random_orthogonal(std::size_t n, std::uint64_t seed) {
    const flexi::Matrix g = random_matrix(n, n, seed, -1.0, 1.0);
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(static_cast<long>(i), static_cast<long>(j)) = g(i, j);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    flexi::Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = q(static_cast<long>(i), static_cast<long>(j));
    return out;
}

flexi::ModelConfig tiny_config(std::size_t n_layers) {
    flexi::ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = 11;
    c.max_seq_len = 16;
    return c;
}

void scramble(flexi::Model& model, std::uint64_t seed, double stddev) {
    flexi::Rng rng(seed);
    for (auto& p : flexi::list_params(model)) {
        flexi::fill_normal(p.values, rng, stddev);
        if (p.cls == flexi::ParamClass::norm_gain || p.cls == flexi::ParamClass::final_gain ||
            p.cls == flexi::ParamClass::gamma) {
            for (double& g : p.values) g += 1.0;
        }
    }
}

std::vector<flexi::Token> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    flexi::Rng rng(seed);
    std::uniform_int_distribution<flexi::Token> pick(0, static_cast<flexi::Token>(vocab - 1));
    std::vector<flexi::Token> out(n);
    for (auto& t : out) t = pick(rng);
    return out;
}

bool params_equal(const flexi::Model& a, const flexi::Model& b) {
    if (a.blocks.size() != b.blocks.size()) return false;
    for (std::size_t i = 0; i < a.blocks.size(); ++i)
        if (flexi::kind_of(a.blocks[i]) != flexi::kind_of(b.blocks[i])) return false;
    const auto pa = flexi::list_params(a);
    const auto pb = flexi::list_params(b);
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!std::ranges::equal(pa[i].values, pb[i].values)) return false;
    return true;
}

}  // namespace testing_util
