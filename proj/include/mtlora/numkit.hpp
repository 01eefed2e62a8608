// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense real-matrix kernels, stable nonlinearities, thin SVD, seeded RNG and
// a central-difference gradient oracle.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace mtlora::numkit {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    /// rows × 1 column.
    static Matrix column(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }
    Vector col(std::size_t c) const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    void fill(double value);
    bool all_finite() const noexcept;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s) noexcept;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ without materialising the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
/// m·x (column-vector convention).
Vector matvec(const Matrix& m, std::span<const double> x);
/// xᵀ·m (row-vector convention).
Vector vecmat(std::span<const double> x, const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double frobenius_norm(const Matrix& m);
/// Cosine similarity; 0 when either argument is the zero vector.
double cosine(std::span<const double> a, std::span<const double> b);

/// Max-subtracted softmax. Throws NumericError on NaN input.
Vector softmax(std::span<const double> x);
void softmax_inplace(std::span<double> x);

/// (x − mean)/sqrt(var + eps)·gamma + beta, biased variance.
Vector layernorm(std::span<const double> x, std::span<const double> gamma,
                 std::span<const double> beta, double eps);

struct EigenResult {
    Vector values;   // descending
    Matrix vectors;  // columns are eigenvectors
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
EigenResult symmetric_eigen(const Matrix& m, int max_sweeps = 100);

struct SvdResult {
    Matrix u;  // rows(m) × k
    Vector s;  // k singular values, descending
    Matrix v;  // cols(m) × k
};

/// Thin SVD via Jacobi eigendecomposition of the k×k Gram matrix,
/// k = min(rows, cols) ≤ 64. Ties (within 1e-12) ordered by the first
/// differing eigenvector component, larger first; each (u, v) pair is
/// sign-flipped so the largest-magnitude entry of u is positive.
SvdResult svd_thin(const Matrix& m);

/// Reconstruct u·diag(s)·vᵀ.
Matrix reconstruct(const SvdResult& svd);

/// Deterministic generator: mt19937_64 (bit-exact by the standard) with
/// hand-written real/normal/index transforms so draws do not depend on the
/// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    /// Uniform in [0, n).
    std::size_t index(std::size_t n);
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[index(i)]);
        }
    }
    /// Independent child stream keyed by `salt`.
    Rng derive(std::uint64_t salt) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central difference (f(p + h eᵢ) − f(p − h eᵢ)) / 2h.
Vector finite_diff_grad(const ScalarFn& f, std::span<const double> p, double h = 1e-5);

}  // namespace mtlora::numkit
