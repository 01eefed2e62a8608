// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Asymmetric adapter bank: one shared down-projection A (r×d) and N
// task-specific up-projections Bᵢ (d×r). Expert i contributes
// Δᵢ(x) = scale·Bᵢ(A x); the routed update is Σᵢ broadcast(Πᵢ) ⊙ Δᵢ(x).

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "mtlora/numkit.hpp"
#include "mtlora/routing.hpp"

namespace mtlora::adapters {

using numkit::Matrix;
using numkit::Vector;
using routing::RoutingWeights;

enum class AttachMode { BlockAttn, BlockFfn, BlockBoth, ComponentQV };

std::string_view to_string(AttachMode mode);
/// Accepts "block-attn", "block-ffn", "block-both", "component-qv".
AttachMode parse_attach_mode(std::string_view text);

struct ExpertSet {
    Matrix a;               // r × d, shared
    std::vector<Matrix> b;  // N × (d × r)
    double scale = 1.0;

    std::size_t rank() const noexcept { return a.rows(); }
    std::size_t hidden() const noexcept { return a.cols(); }
    std::size_t n_experts() const noexcept { return b.size(); }
    void validate() const;
};

/// A ~ N(0, 1/d) entries, every Bᵢ = 0.
ExpertSet make_expert_set(std::size_t d, std::size_t rank, std::size_t n_experts, double scale,
                          numkit::Rng& rng);

struct ComposedUpdate {
    Vector delta;
};

/// scale·Bᵢ(A x).
Vector expert_update(const ExpertSet& es, std::size_t i, std::span<const double> x);

/// Σᵢ broadcast(Πᵢ, d) ⊙ Δᵢ(x). Requires g | d.
ComposedUpdate compose(const ExpertSet& es, const RoutingWeights& pi, std::span<const double> x);

/// Parallel residual attachment h_in + block_out + Δ; the caller evaluates
/// block_out and Δ on the same LayerNorm output.
Vector attach_block(std::span<const double> h_in, std::span<const double> block_out,
                    const ComposedUpdate& delta);

/// Adapted projection inside attention: Wᵀx + Δ(x), with W stored
/// input-major (d_in × d_out) as in the model's row-vector convention.
Vector attach_component(const Matrix& w, const ExpertSet& es, const RoutingWeights& pi,
                        std::span<const double> x);

// ---------------------------------------------------------------------------
// Sequence-level kernels used by the model: rows of `z` are token positions
// and the same routing decision applies to every position.

struct SequenceTrace {
    Matrix low;                      // tokens × r, z·Aᵀ
    std::vector<Matrix> expert_out;  // N × (tokens × d), unweighted scale·(z·Aᵀ·Bᵢᵀ)
};

/// Returns Δ for every row of z (tokens × d).
Matrix apply_sequence(const ExpertSet& es, const RoutingWeights& pi, const Matrix& z,
                      SequenceTrace* trace);

struct ExpertGrads {
    Matrix a;
    std::vector<Matrix> b;
};

ExpertGrads zeros_like(const ExpertSet& es);

/// Given dL/dΔ (tokens × d): accumulates dL/dA (if `grad_a`), dL/dBᵢ into
/// `grads`, writes dL/dΠ into `d_pi` (N × g, overwritten) and returns dL/dz.
Matrix backward_sequence(const ExpertSet& es, const RoutingWeights& pi, const Matrix& z,
                         const SequenceTrace& trace, const Matrix& d_delta, ExpertGrads& grads,
                         bool grad_a, Matrix& d_pi);

}  // namespace mtlora::adapters
