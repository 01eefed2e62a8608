// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mtlora/errors.hpp"

namespace mtlora::numkit {

namespace {

std::string shape_str(const Matrix& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
        std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
}

Matrix Matrix::column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Vector Matrix::col(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

// ---------------------------------------------------------------------------
// Products

namespace {

// out += a·b for row-major a (m×k), b (k×n), out (m×n).
void gemm_acc(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ out,
              std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* o = out + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += aip * bp[j];
        }
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    gemm_acc(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: " + shape_str(a) + "ᵀ x " + shape_str(b));
    }
    const Matrix at = transpose(a);
    Matrix out(a.cols(), b.cols());
    gemm_acc(at.data().data(), b.data().data(), out.data().data(), at.rows(), at.cols(), b.cols());
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a) + " x " + shape_str(b) + "ᵀ");
    }
    const Matrix bt = transpose(b);
    Matrix out(a.rows(), b.rows());
    gemm_acc(a.data().data(), bt.data().data(), out.data().data(), a.rows(), a.cols(), bt.cols());
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

Vector matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols() != x.size()) {
        throw ShapeError("matvec: " + shape_str(m) + " x vector(" + std::to_string(x.size()) + ")");
    }
    Vector out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), x);
    return out;
}

Vector vecmat(std::span<const double> x, const Matrix& m) {
    if (m.rows() != x.size()) {
        throw ShapeError("vecmat: vector(" + std::to_string(x.size()) + ") x " + shape_str(m));
    }
    Vector out(m.cols(), 0.0);
    for (std::size_t k = 0; k < m.rows(); ++k) {
        const double xk = x[k];
        if (xk == 0.0) continue;
        const double* mk = m.row(k).data();
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += xk * mk[j];
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Nonlinearities

void softmax_inplace(std::span<double> x) {
    if (x.empty()) return;
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
        mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (double& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : x) v /= sum;
}

Vector softmax(std::span<const double> x) {
    Vector out(x.begin(), x.end());
    softmax_inplace(out);
    return out;
}

Vector layernorm(std::span<const double> x, std::span<const double> gamma,
                 std::span<const double> beta, double eps) {
    if (x.empty()) throw ShapeError("layernorm: zero-length input");
    if (gamma.size() != x.size() || beta.size() != x.size()) {
        throw ShapeError("layernorm: gamma/beta length mismatch");
    }
    if (!(eps > 0.0)) throw DomainError("layernorm: eps must be positive");
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    return out;
}

// ---------------------------------------------------------------------------
// Eigen / SVD

EigenResult symmetric_eigen(const Matrix& m, int max_sweeps) {
    if (m.rows() != m.cols()) throw ShapeError("symmetric_eigen: matrix not square");
    if (!m.all_finite()) throw NumericError("symmetric_eigen: non-finite input");
    const std::size_t n = m.rows();
    Matrix a = m;
    Matrix v = Matrix::identity(n);

    const double scale = frobenius_norm(a);
    auto off_diagonal = [&] {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = 0; q < n; ++q)
                if (p != q) off += a(p, q) * a(p, q);
        return std::sqrt(off);
    };

    const double tol = 1e-15 * scale;
    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_diagonal() <= tol) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged && off_diagonal() > tol) {
        std::ostringstream os;
        os << "symmetric_eigen: no convergence after " << max_sweeps
           << " sweeps, off-diagonal residual " << off_diagonal();
        throw NumericError(os.str());
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    EigenResult out{Vector(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
    }
    return out;
}

namespace {

std::size_t argmax_abs(std::span<const double> x) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (std::abs(x[i]) > std::abs(x[best])) best = i;
    return best;
}

// Tall case: rows ≥ cols. `eigvec` side is v.
SvdResult svd_tall(const Matrix& m) {
    const std::size_t n = m.rows();
    const std::size_t k = m.cols();
    const EigenResult eig = symmetric_eigen(matmul_tn(m, m));

    struct Triplet {
        Vector u;
        double s;
        Vector v;
    };
    std::vector<Triplet> trip(k);
    for (std::size_t j = 0; j < k; ++j) {
        Vector vj = eig.vectors.col(j);
        Vector w = matvec(m, vj);
        const double s = norm2(w);
        if (s > 0.0) {
            for (double& x : w) x /= s;
        }
        // Canonical sign before tie-breaking so ordering does not depend on
        // the arbitrary sign Jacobi hands back.
        const bool flip = s > 0.0 ? w[argmax_abs(w)] < 0.0 : vj[argmax_abs(vj)] < 0.0;
        if (flip) {
            for (double& x : w) x = -x;
            for (double& x : vj) x = -x;
        }
        trip[j] = {std::move(w), s, std::move(vj)};
    }

    const double smax = std::max_element(trip.begin(), trip.end(), [](const auto& x, const auto& y) {
                            return x.s < y.s;
                        })->s;
    const double tie_tol = 1e-12 * std::max(1.0, smax);
    auto before = [&](const Triplet& x, const Triplet& y) {
        if (std::abs(x.s - y.s) > tie_tol) return x.s > y.s;
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            if (std::abs(x.v[i] - y.v[i]) > 1e-12) return x.v[i] > y.v[i];
        }
        return false;
    };
    // Insertion sort: the tolerance comparator is not a strict weak order.
    for (std::size_t i = 1; i < trip.size(); ++i) {
        for (std::size_t j = i; j > 0 && before(trip[j], trip[j - 1]); --j) std::swap(trip[j], trip[j - 1]);
    }

    // Re-orthogonalise u (modified Gram-Schmidt, two passes); columns whose
    // singular value is numerically zero are completed from the standard basis.
    SvdResult out{Matrix(n, k), Vector(k), Matrix(k, k)};
    std::vector<Vector> basis;
    basis.reserve(k);
    auto orthogonalise = [&](Vector& x) {
        for (int pass = 0; pass < 2; ++pass)
            for (const Vector& b : basis) {
                const double c = dot(b, x);
                for (std::size_t i = 0; i < n; ++i) x[i] -= c * b[i];
            }
        return norm2(x);
    };
    const double zero_tol = 1e-14 * std::max(smax, 1e-300);
    std::size_t next_unit = 0;
    for (std::size_t j = 0; j < k; ++j) {
        Vector u = trip[j].u;
        double nu = trip[j].s > zero_tol ? orthogonalise(u) : 0.0;
        if (nu < 0.5) {
            while (true) {
                if (next_unit >= n) throw NumericError("svd_thin: basis completion failed");
                u.assign(n, 0.0);
                u[next_unit++] = 1.0;
                nu = orthogonalise(u);
                if (nu > 0.5) break;
            }
        }
        for (double& x : u) x /= nu;
        Vector v = trip[j].v;
        if (u[argmax_abs(u)] < 0.0) {
            for (double& x : u) x = -x;
            for (double& x : v) x = -x;
        }
        for (std::size_t i = 0; i < n; ++i) out.u(i, j) = u[i];
        for (std::size_t i = 0; i < k; ++i) out.v(i, j) = v[i];
        out.s[j] = trip[j].s;
        basis.push_back(std::move(u));
    }
    return out;
}

}  // namespace

SvdResult svd_thin(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) throw ShapeError("svd_thin: empty matrix");
    if (std::min(m.rows(), m.cols()) > 64) throw DomainError("svd_thin: min dimension exceeds 64");
    if (!m.all_finite()) throw NumericError("svd_thin: non-finite input");
    if (m.rows() >= m.cols()) return svd_tall(m);

    SvdResult t = svd_tall(transpose(m));
    SvdResult out{std::move(t.v), std::move(t.s), std::move(t.u)};
    for (std::size_t j = 0; j < out.s.size(); ++j) {
        const Vector uj = out.u.col(j);
        if (uj[argmax_abs(uj)] < 0.0) {
            for (std::size_t i = 0; i < out.u.rows(); ++i) out.u(i, j) = -out.u(i, j);
            for (std::size_t i = 0; i < out.v.rows(); ++i) out.v(i, j) = -out.v(i, j);
        }
    }
    return out;
}

Matrix reconstruct(const SvdResult& svd) {
    Matrix us = svd.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= svd.s[j];
    return matmul_nt(us, svd.v);
}

// ---------------------------------------------------------------------------
// Rng

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw DomainError("Rng::index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<std::size_t>(x % bound);
}

Rng Rng::derive(std::uint64_t salt) const { return Rng(splitmix64(seed_ ^ splitmix64(salt + 1))); }

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * rng.normal();
    return m;
}

// ---------------------------------------------------------------------------

Vector finite_diff_grad(const ScalarFn& f, std::span<const double> p, double h) {
    if (!(h > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
    Vector x(p.begin(), p.end());
    Vector g(p.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                               std::to_string(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace mtlora::numkit
