#pragma once

// Dense row-major matrices, singular value decomposition and low-rank
// truncation. All numerics are 64-bit.

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flexi {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SvdError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Cache-line aligned storage. The vectorized kernels split a buffer into a
/// scalar head and a packed body at the first aligned address, and the two
/// paths round differently; a fixed base alignment makes results independent
/// of where the allocator happened to place the data.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    std::string shape_string() const;
    bool all_finite() const noexcept;
    void set_zero() noexcept;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    AlignedBuffer data_;
};

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// c = alpha * op(a) * op(b) + beta * c, where op transposes when the flag is
/// set. `c` must already have the result shape. This is the hot path of the
/// model and trainer.
void gemm(const Matrix& a, bool trans_a, const Matrix& b, bool trans_b, Matrix& c,
          double alpha = 1.0, double beta = 0.0);

double frobenius_norm(const Matrix& w);
double max_abs_diff(const Matrix& a, const Matrix& b);

struct SvdFactors {
    Matrix u;                   // m x k
    std::vector<double> sigma;  // k, descending
    Matrix v;                   // n x k

    Matrix reconstruct() const;
};

/// Best rank-r approximation in factored form: left = (U Sigma)[:, :r],
/// right = (V[:, :r])^T.
struct LowRankApprox {
    Matrix left;   // m x r
    Matrix right;  // r x n
    std::size_t rank = 0;

    Matrix product() const { return matmul(left, right); }
};

struct SvdOptions {
    int max_sweeps = 30;
    double tolerance = 1e-12;
};

/// One-sided Jacobi SVD. Each column of u has its largest-magnitude entry
/// non-negative, with the paired column of v flipped to match.
SvdFactors svd(const Matrix& w, const SvdOptions& opts = {});

LowRankApprox truncate(const SvdFactors& f, std::size_t r);

/// Sum of squared singular values past index r (the squared Eckart-Young
/// residual of a rank-r truncation).
double tail_energy(const SvdFactors& f, std::size_t r);

}  // namespace flexi
