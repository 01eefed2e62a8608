// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Spectral-aware orthogonality regularisation and the singular-value band
// analytics built on it.
//
// Each up-projection B = U Σ Vᵀ is re-weighted to B' = U diag(√w(σ)·σ) Vᵀ with
// w(σ) = exp(−σ/σ̄), so the pairwise penalty Σ_{i<j} ‖B'ᵢᵀ B'ⱼ‖²_F bears mostly
// on low singular directions. Equivalently B' = M·B with M = U diag(√w) Uᵀ;
// M is frozen between refreshes and treated as a constant by the gradient.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlora/adapters.hpp"
#include "mtlora/numkit.hpp"

namespace mtlora::spectral {

using numkit::Matrix;
using numkit::SvdResult;
using numkit::Vector;

struct SpectralWeighting {
    double sigma_bar = 0.0;
    Vector weights;
};

/// wₖ = exp(−σₖ/σ̄), σ̄ = mean(σ); all-zero σ gives w ≡ 1.
SpectralWeighting spectral_weights(std::span<const double> sigmas);

/// Low-rank projector M = U diag(√w) Uᵀ. An empty `u` denotes the identity,
/// which is what uniform orthogonal regularisation uses.
struct ReweightProjector {
    Matrix u;       // d × k
    Vector sqrt_w;  // k

    bool is_identity() const noexcept { return u.empty(); }
    /// M·B.
    Matrix apply(const Matrix& b) const;
    /// Mᵀ·G (M is symmetric, so this equals M·G).
    Matrix apply_transpose(const Matrix& g) const { return apply(g); }

    static ReweightProjector identity() { return {}; }
};

/// Projector from the current B. When B = 0 the identity is returned so the
/// penalty is not blind to directions B has yet to develop.
ReweightProjector make_projector(const Matrix& b);

/// B' = U diag(√w(σ)·σ) Vᵀ.
Matrix reweighted_b(const Matrix& b);

struct SpectralLoss {
    double value = 0.0;
    std::vector<Matrix> grads;  // ∂/∂Bᵢ
};

/// λ₁ Σ_{i<j} ‖(MᵢBᵢ)ᵀ(MⱼBⱼ)‖²_F with the stop-gradient gradient
/// 2λ₁ Σ_{j≠i} Mᵢᵀ MⱼBⱼ (MⱼBⱼ)ᵀ MᵢBᵢ.
SpectralLoss spectral_loss(const adapters::ExpertSet& es,
                           std::span<const ReweightProjector> projectors, double lambda1);

/// Index set (positions into the descending singular values).
using Band = std::vector<std::size_t>;

/// Bands [lo, hi) given as fractions of k; boundaries are ⌈frac·k⌉ so an
/// index straddling a boundary falls in the higher-σ band.
Band fraction_band(std::size_t k, double lo, double hi);

struct BandSpec {
    std::string name;
    double lo;
    double hi;
};

/// top-20%, 20-50%, 50-100%.
std::vector<BandSpec> default_bands();

/// 𝒜(B) = 1/(|B|·N(N−1)) Σ_{k∈B} Σ_{i≠j} σᵢₖσⱼₖ|cos(uᵢₖ, uⱼₖ)|.
double alignment_score(std::span<const SvdResult> experts, const Band& band, std::size_t n);

/// Σ_{k∈band} σₖ / Σ σₖ.
double band_mass(std::span<const double> sigmas, const Band& band);

struct ExpertSpectrum {
    std::size_t layer = 0;
    std::string site;
    std::size_t expert = 0;
    Vector sigmas;
};

struct BandRow {
    std::string name;
    double lo = 0.0;
    double hi = 0.0;
    double mass = 0.0;       // mean band mass over experts
    double alignment = 0.0;  // mean alignment over (layer, site) banks
    std::optional<double> suppression;
};

struct SpectralReport {
    std::vector<ExpertSpectrum> spectra;
    std::vector<BandRow> bands;
};

/// Spectra, band mass and alignment for a list of banks keyed by
/// (layer, site). Each bank needs at least two experts for alignment.
struct Bank {
    std::size_t layer;
    std::string site;
    const adapters::ExpertSet* experts;
};
SpectralReport analyze_banks(std::span<const Bank> banks,
                             const std::vector<BandSpec>& bands = default_bands());

struct SuppressionResult {
    std::vector<BandRow> bands;  // suppression filled, relative change (after−before)/before
    std::size_t excluded = 0;    // entries skipped because before σ = 0
};

/// Per-band mean relative σ change, pooled over experts and layers.
SuppressionResult suppression_report(const SpectralReport& before, const SpectralReport& after,
                                     const std::vector<BandSpec>& bands = default_bands());

}  // namespace mtlora::spectral
