// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Fine-grained router: a two-layer perceptron over the mean-pooled sequence
// producing N×g logits, softmax over experts independently for each of the g
// feature groups, plus load-balance and entropy statistics.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtlora/numkit.hpp"

namespace mtlora::routing {

using numkit::Matrix;
using numkit::Vector;

/// logits = relu(x·w1 + b1)·w2 + b2, reshaped expert-major to N×g.
struct RouterParams {
    Matrix w1;  // d × hidden
    Vector b1;
    Matrix w2;  // hidden × (N·g)
    Vector b2;
    std::size_t n_experts = 0;
    std::size_t groups = 0;

    std::size_t input_dim() const noexcept { return w1.rows(); }
    std::size_t hidden_dim() const noexcept { return w1.cols(); }
    void validate() const;
};

/// w1 ~ N(0, 1/d), b1 = 0, b2 = 0. w2 = 0 (an exactly uniform router) unless
/// `out_rng` is given, in which case w2 ~ N(0, out_std²) is drawn from it.
RouterParams make_router(std::size_t d, std::size_t hidden, std::size_t n_experts,
                         std::size_t groups, numkit::Rng& rng, numkit::Rng* out_rng = nullptr,
                         double out_std = 0.0);

/// pi(i, j): weight of expert i in feature group j. Columns lie on the simplex.
struct RoutingWeights {
    Matrix pi;

    std::size_t n_experts() const noexcept { return pi.rows(); }
    std::size_t groups() const noexcept { return pi.cols(); }

    static RoutingWeights uniform(std::size_t n_experts, std::size_t groups);
    static RoutingWeights one_hot(std::size_t n_experts, std::size_t groups, std::size_t expert);
    /// Throws DomainError if any column leaves the simplex by more than tol.
    void validate(double tol = 1e-9) const;
};

/// Intermediate values retained for the backward pass.
struct RouterTrace {
    Vector pooled;
    Vector pre;     // hidden pre-activation
    Vector act;     // relu(pre)
    Vector logits;  // N·g, expert-major
    RoutingWeights weights;
};

RouterTrace route_pooled(const RouterParams& rp, std::span<const double> pooled);
/// Mean-pools the rows of `hidden` (tokens × d), then routes.
RouterTrace route_traced(const RouterParams& rp, const Matrix& hidden);
RoutingWeights route(const RouterParams& rp, const Matrix& hidden);
RoutingWeights route(const RouterParams& rp, std::span<const Vector> hidden);

/// Same shapes as RouterParams; used for gradients.
using RouterGrads = RouterParams;
RouterGrads zeros_like(const RouterParams& rp);

/// Backpropagates dL/dπ (N×g) through the per-group softmax and the MLP.
/// Accumulates into `grads` and returns dL/d(pooled input).
Vector router_backward(const RouterParams& rp, const RouterTrace& trace, const Matrix& d_pi,
                       RouterGrads& grads);

/// Repeats each of the g entries d/g times.
Vector broadcast(std::span<const double> pi_row, std::size_t d);

/// Per-sample entropy of one routing decision: per-group Shannon entropy
/// (natural log, 0·log0 = 0) averaged over groups.
double routing_entropy(const RoutingWeights& pi);

/// Aggregate over a set of routing decisions.
class RoutingStats {
public:
    explicit RoutingStats(std::size_t n_experts = 0) : usage_sum_(n_experts, 0.0) {}

    void add(const RoutingWeights& pi);
    void merge(const RoutingStats& other);

    std::size_t n_experts() const noexcept { return usage_sum_.size(); }
    std::size_t samples() const noexcept { return entropies_.size(); }
    /// ūᵢ: mean over samples and groups; sums to 1.
    Vector mean_usage() const;
    const Vector& entropies() const noexcept { return entropies_; }
    double mean_entropy() const;
    /// Histogram of per-sample entropies over [0, ln N].
    std::vector<std::size_t> entropy_histogram(std::size_t bins = 32) const;

private:
    Vector usage_sum_;
    Vector entropies_;
};

struct BalanceLoss {
    double value = 0.0;
    Vector d_usage;  // ∂L/∂ūᵢ
};

/// λ₂·N·Σᵢ(ūᵢ − 1/N)². Per-sample routing gradients follow from
/// ∂L/∂π_s(i, j) = d_usage[i] / (samples · groups).
BalanceLoss balance_loss(const RoutingStats& stats, std::size_t n_experts, double lambda2);

}  // namespace mtlora::routing
