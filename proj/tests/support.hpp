#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library's kernels: loops are straight-line and scalar.

#include "flexi/linalg.hpp"
#include "flexi/model.hpp"
#include "flexi/random.hpp"

#include <vector>

namespace oracle {

using flexi::Matrix;
using flexi::Model;
using flexi::Token;

/// Logits (T x vocab) of `model` on one sequence, computed row by row.
Matrix forward(const Model& model, const std::vector<Token>& tokens, bool skip_shared = false);

/// Mean next-token cross-entropy of one or more back-to-back windows.
double loss(const Model& model, const std::vector<Token>& tokens, std::size_t batch, std::size_t seq_len);

/// Singular values through Eigen's JacobiSVD, descending.
std::vector<double> singular_values(const Matrix& w);

/// 1 - mean row cosine between consecutive boundaries, one pair at a time.
std::vector<double> block_influence(const flexi::HiddenTrace& trace);

std::vector<double> output_norm(const std::vector<double>& h, const std::vector<double>& gamma, double eps);

}  // namespace oracle

namespace testing_util {

flexi::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double lo = -10.0,
                            double hi = 10.0);
flexi::Matrix random_orthogonal(std::size_t n, std::uint64_t seed);

/// Small config used by most model tests: 2 layers, d 8, 2 heads, d_ff 16,
/// vocab 11, max_seq 16.
flexi::ModelConfig tiny_config(std::size_t n_layers = 2);

/// Re-draws every parameter (including gains, gammas, adapters) with the
/// given spread so that gradients are not dominated by the 0.02 init.
void scramble(flexi::Model& model, std::uint64_t seed, double stddev);

std::vector<flexi::Token> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed);

/// Same block kinds and bit-identical tensors.
bool params_equal(const flexi::Model& a, const flexi::Model& b);

}  // namespace testing_util
