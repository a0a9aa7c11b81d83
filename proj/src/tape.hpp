#pragma once

// Internal: batched forward pass with an optional activation tape consumed
// by the backward pass in training.cpp.

#include "flexi/model.hpp"

#include <array>
#include <vector>

namespace flexi::detail {

struct ProjTape {
    Matrix xa;  // input * adapter.a, empty for native blocks
};

struct BlockTape {
    bool skipped = false;
    Matrix x_in;
    Matrix h1;
    std::vector<double> inv_rms1;
    Matrix q, k, v;
    AlignedBuffer probs;  // batch * heads * T * T, row-major per (b, h)
    Matrix att;
    Matrix o;  // attention output before output-norm
    Matrix o_hat;
    std::vector<double> inv_std_o;
    Matrix x1;
    Matrix h2;
    std::vector<double> inv_rms2;
    Matrix u;
    Matrix g;
    AlignedBuffer tanh_u;  // only kept when taping
    Matrix m;
    Matrix m_hat;
    std::vector<double> inv_std_m;
    std::array<ProjTape, 6> proj;
};

struct ForwardTape {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<BlockTape> blocks;
    Matrix x_final;
    Matrix hf;
    std::vector<double> inv_rms_f;
};

/// tokens holds `batch` sequences of `seq_len` ids back to back. Returns
/// logits with batch*seq_len rows.
Matrix forward_batch(const Model& model, std::span<const Token> tokens, std::size_t batch,
                     std::size_t seq_len, bool skip_shared, ForwardTape* tape,
                     std::vector<Matrix>* trace);

// Row-wise kernels shared by forward and backward.
void rms_norm(const Matrix& x, std::span<const double> gain, double eps, Matrix& out,
              std::vector<double>& inv_rms);
void rms_norm_backward(const Matrix& x, std::span<const double> gain,
                       const std::vector<double>& inv_rms, const Matrix& dy, Matrix& dx,
                       std::span<double> dgain);

void output_norm(const Matrix& h, std::span<const double> gamma, double eps, Matrix& out,
                 Matrix& normalized, std::vector<double>& inv_std);
void output_norm_backward(const Matrix& normalized, std::span<const double> gamma,
                          const std::vector<double>& inv_std, const Matrix& dy, Matrix& dh,
                          std::span<double> dgamma);

double gelu(double x);
double gelu_grad(double x);
/// Batched forms; backward multiplies `grad` in place by gelu'(u).
/// tanh_out, when non-empty, receives the inner tanh for gelu_backward.
void gelu_forward(std::span<const double> u, std::span<double> out, std::span<double> tanh_out);
void gelu_backward(std::span<const double> u, std::span<const double> tanh_u, std::span<double> grad);

void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t batch,
                      std::size_t seq_len, std::size_t heads, Matrix& out,
                      AlignedBuffer& probs);
void causal_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AlignedBuffer& probs, const Matrix& dout,
                               std::size_t batch, std::size_t seq_len, std::size_t heads,
                               Matrix& dq, Matrix& dk, Matrix& dv);

}  // namespace flexi::detail
