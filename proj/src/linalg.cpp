#include "flexi/linalg.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace flexi {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }
MutMap view(Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
    if (data_.size() != rows * cols) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + shape_string());
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
}

std::string Matrix::shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void Matrix::set_zero() noexcept { std::fill(data_.begin(), data_.end(), 0.0); }

Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (double& x : out.values()) x *= s;
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: shape mismatch " + a.shape_string() + " * " + b.shape_string());
    }
    Matrix c(a.rows(), b.cols());
    gemm(a, false, b, false, c);
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

void gemm(const Matrix& a, bool trans_a, const Matrix& b, bool trans_b, Matrix& c, double alpha,
          double beta) {
    const std::size_t m = trans_a ? a.cols() : a.rows();
    const std::size_t ka = trans_a ? a.rows() : a.cols();
    const std::size_t kb = trans_b ? b.cols() : b.rows();
    const std::size_t n = trans_b ? b.rows() : b.cols();
    if (ka != kb || c.rows() != m || c.cols() != n) {
        throw ShapeError("gemm: shape mismatch " + a.shape_string() + (trans_a ? "^T" : "") +
                         " * " + b.shape_string() + (trans_b ? "^T" : "") + " -> " +
                         c.shape_string());
    }
    auto cv = view(c);
    if (beta == 0.0) {
        cv.setZero();
    } else if (beta != 1.0) {
        cv *= beta;
    }
    if (m == 0 || n == 0 || ka == 0) return;
    auto av = view(a);
    auto bv = view(b);
    if (!trans_a && !trans_b) {
        cv.noalias() += alpha * av * bv;
    } else if (trans_a && !trans_b) {
        cv.noalias() += alpha * av.transpose() * bv;
    } else if (!trans_a && trans_b) {
        cv.noalias() += alpha * av * bv.transpose();
    } else {
        cv.noalias() += alpha * av.transpose() * bv.transpose();
    }
}

double frobenius_norm(const Matrix& w) {
    double s = 0.0;
    for (double x : w.values()) s += x * x;
    return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double d = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) d = std::max(d, std::abs(av[i] - bv[i]));
    return d;
}

Matrix SvdFactors::reconstruct() const {
    Matrix us = u;
    for (std::size_t r = 0; r < us.rows(); ++r)
        for (std::size_t c = 0; c < us.cols(); ++c) us(r, c) *= sigma[c];
    Matrix out(u.rows(), v.rows());
    gemm(us, false, v, true, out);
    return out;
}

namespace {

// Column-major working storage for the Jacobi sweeps.
struct Columns {
    std::size_t len;
    std::size_t count;
    std::vector<double> data;

    Columns(std::size_t len_, std::size_t count_) : len(len_), count(count_), data(len_ * count_) {}
    double* col(std::size_t j) { return data.data() + j * len; }
    const double* col(std::size_t j) const { return data.data() + j * len; }
};

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void rotate(double* p, double* q, std::size_t n, double c, double s) {
    for (std::size_t i = 0; i < n; ++i) {
        const double xp = p[i];
        const double xq = q[i];
        p[i] = c * xp - s * xq;
        q[i] = s * xp + c * xq;
    }
}

// Fills zero columns of an orthonormal set with unit vectors orthogonal to
// every other column (modified Gram-Schmidt against the standard basis).
void complete_basis(Columns& u, const std::vector<bool>& valid) {
    std::size_t next_basis = 0;
    for (std::size_t j = 0; j < u.count; ++j) {
        if (valid[j]) continue;
        std::vector<double> cand(u.len);
        for (; next_basis < u.len; ++next_basis) {
            std::fill(cand.begin(), cand.end(), 0.0);
            cand[next_basis] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t k = 0; k < u.count; ++k) {
                    if (!valid[k] && k >= j) continue;
                    const double proj = dot(cand.data(), u.col(k), u.len);
                    for (std::size_t i = 0; i < u.len; ++i) cand[i] -= proj * u.col(k)[i];
                }
            }
            const double norm = std::sqrt(dot(cand.data(), cand.data(), u.len));
            if (norm > 1e-6) {
                for (std::size_t i = 0; i < u.len; ++i) u.col(j)[i] = cand[i] / norm;
                ++next_basis;
                break;
            }
        }
    }
}

SvdFactors jacobi_tall(const Matrix& w, const SvdOptions& opts) {
    // Requires rows >= cols.
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    Columns a(m, n);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) a.col(c)[r] = w(r, c);
    Columns v(n, n);
    for (std::size_t c = 0; c < n; ++c) v.col(c)[c] = 1.0;

    bool converged = false;
    double worst = 0.0;
    for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
        converged = true;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = dot(a.col(p), a.col(p), m);
                const double beta = dot(a.col(q), a.col(q), m);
                const double gamma = dot(a.col(p), a.col(q), m);
                if (gamma == 0.0) continue;
                const double scale = std::sqrt(alpha) * std::sqrt(beta);
                const double rel = std::abs(gamma) / scale;
                if (!(rel > opts.tolerance)) continue;
                worst = std::max(worst, rel);
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
                const double c = 1.0 / std::hypot(1.0, t);
                const double s = c * t;
                rotate(a.col(p), a.col(q), m, c, s);
                rotate(v.col(p), v.col(q), n, c, s);
            }
        }
    }
    if (!converged) {
        throw SvdError("svd: no convergence after " + std::to_string(opts.max_sweeps) +
                       " sweeps on " + w.shape_string() + " matrix (residual off-diagonal " +
                       std::to_string(worst) + ")");
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(a.col(j), a.col(j), m));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    Columns u_sorted(m, n);
    Columns v_sorted(n, n);
    std::vector<double> sigma_sorted(n);
    std::vector<bool> valid(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        sigma_sorted[k] = sigma[j];
        std::copy_n(v.col(j), n, v_sorted.col(k));
        valid[k] = sigma[j] > std::numeric_limits<double>::min();
        if (valid[k]) {
            for (std::size_t i = 0; i < m; ++i) u_sorted.col(k)[i] = a.col(j)[i] / sigma[j];
        } else {
            sigma_sorted[k] = 0.0;
        }
    }
    complete_basis(u_sorted, valid);

    SvdFactors f{Matrix(m, n), std::move(sigma_sorted), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        // Sign convention: largest-magnitude entry of each u column is >= 0.
        const double* uc = u_sorted.col(k);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < m; ++i)
            if (std::abs(uc[i]) > std::abs(uc[arg])) arg = i;
        const double sign = uc[arg] < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < m; ++i) f.u(i, k) = sign * uc[i];
        for (std::size_t i = 0; i < n; ++i) f.v(i, k) = sign * v_sorted.col(k)[i];
    }
    return f;
}

}  // namespace

SvdFactors svd(const Matrix& w, const SvdOptions& opts) {
    if (w.rows() == 0 || w.cols() == 0) throw ShapeError("svd: empty matrix " + w.shape_string());
    if (!w.all_finite()) throw std::invalid_argument("svd: non-finite entry in " + w.shape_string());
    if (w.rows() >= w.cols()) return jacobi_tall(w, opts);

    // W^T = U' S V'^T  =>  W = V' S U'^T. Re-apply the sign convention on the
    // new left factor.
    SvdFactors t = jacobi_tall(transpose(w), opts);
    SvdFactors f{std::move(t.v), std::move(t.sigma), std::move(t.u)};
    for (std::size_t k = 0; k < f.sigma.size(); ++k) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < f.u.rows(); ++i)
            if (std::abs(f.u(i, k)) > std::abs(f.u(arg, k))) arg = i;
        if (f.u(arg, k) < 0.0) {
            for (std::size_t i = 0; i < f.u.rows(); ++i) f.u(i, k) = -f.u(i, k);
            for (std::size_t i = 0; i < f.v.rows(); ++i) f.v(i, k) = -f.v(i, k);
        }
    }
    return f;
}

LowRankApprox truncate(const SvdFactors& f, std::size_t r) {
    const std::size_t k = f.sigma.size();
    if (r < 1 || r > k) {
        throw std::out_of_range("truncate: rank " + std::to_string(r) + " outside [1, " +
                                std::to_string(k) + "]");
    }
    const std::size_t m = f.u.rows();
    const std::size_t n = f.v.rows();
    LowRankApprox out{Matrix(m, r), Matrix(r, n), r};
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < r; ++c) out.left(i, c) = f.u(i, c) * f.sigma[c];
    for (std::size_t c = 0; c < r; ++c)
        for (std::size_t j = 0; j < n; ++j) out.right(c, j) = f.v(j, c);
    return out;
}

double tail_energy(const SvdFactors& f, std::size_t r) {
    double s = 0.0;
    for (std::size_t k = r; k < f.sigma.size(); ++k) s += f.sigma[k] * f.sigma[k];
    return s;
}

}  // namespace flexi
