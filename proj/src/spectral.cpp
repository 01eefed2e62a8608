// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtlora/errors.hpp"

namespace mtlora::spectral {

SpectralWeighting spectral_weights(std::span<const double> sigmas) {
    SpectralWeighting out;
    out.weights.assign(sigmas.size(), 1.0);
    if (sigmas.empty()) return out;
    double sum = 0.0;
    for (double s : sigmas) {
        if (!(s >= 0.0)) throw DomainError("spectral_weights: singular values must be non-negative");
        sum += s;
    }
    out.sigma_bar = sum / static_cast<double>(sigmas.size());
    if (out.sigma_bar == 0.0) return out;
    for (std::size_t k = 0; k < sigmas.size(); ++k) {
        out.weights[k] = std::exp(-sigmas[k] / out.sigma_bar);
    }
    return out;
}

Matrix ReweightProjector::apply(const Matrix& b) const {
    if (is_identity()) return b;
    if (b.rows() != u.rows()) throw ShapeError("ReweightProjector: row count mismatch");
    Matrix coeff = numkit::matmul_tn(u, b);  // k × r
    for (std::size_t k = 0; k < coeff.rows(); ++k) {
        for (double& v : coeff.row(k)) v *= sqrt_w[k];
    }
    return numkit::matmul(u, coeff);
}

ReweightProjector make_projector(const Matrix& b) {
    const numkit::SvdResult svd = numkit::svd_thin(b);
    const bool all_zero = std::all_of(svd.s.begin(), svd.s.end(), [](double s) { return s == 0.0; });
    if (all_zero) return ReweightProjector::identity();
    const SpectralWeighting w = spectral_weights(svd.s);
    ReweightProjector p;
    p.u = svd.u;
    p.sqrt_w.resize(w.weights.size());
    for (std::size_t k = 0; k < w.weights.size(); ++k) p.sqrt_w[k] = std::sqrt(w.weights[k]);
    return p;
}

Matrix reweighted_b(const Matrix& b) {
    numkit::SvdResult svd = numkit::svd_thin(b);
    const SpectralWeighting w = spectral_weights(svd.s);
    for (std::size_t k = 0; k < svd.s.size(); ++k) svd.s[k] *= std::sqrt(w.weights[k]);
    return numkit::reconstruct(svd);
}

SpectralLoss spectral_loss(const adapters::ExpertSet& es,
                           std::span<const ReweightProjector> projectors, double lambda1) {
    const std::size_t n = es.n_experts();
    if (projectors.size() != n) {
        throw ConfigError("spectral_loss: " + std::to_string(projectors.size()) +
                          " projectors for " + std::to_string(n) + " experts");
    }
    if (lambda1 < 0.0) throw DomainError("spectral_loss: lambda1 must be non-negative");

    SpectralLoss out;
    out.grads.assign(n, Matrix(es.hidden(), es.rank()));
    if (lambda1 == 0.0 || n < 2) return out;

    std::vector<Matrix> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = projectors[i].apply(es.b[i]);

    std::vector<Matrix> gp(n, Matrix(es.hidden(), es.rank()));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const Matrix cross = numkit::matmul_tn(p[i], p[j]);  // r × r
            const double f = numkit::frobenius_norm(cross);
            total += f * f;
            gp[i] += numkit::matmul_nt(p[j], cross);  // Pⱼ·Cᵀ
            gp[j] += numkit::matmul(p[i], cross);     // Pᵢ·C
        }
    }
    out.value = lambda1 * total;
    for (std::size_t i = 0; i < n; ++i) {
        gp[i] *= 2.0 * lambda1;
        out.grads[i] = projectors[i].apply_transpose(gp[i]);
    }
    return out;
}

Band fraction_band(std::size_t k, double lo, double hi) {
    if (lo < 0.0 || hi > 1.0 || lo > hi) throw DomainError("fraction_band: invalid fractions");
    const auto start = static_cast<std::size_t>(std::ceil(lo * static_cast<double>(k) - 1e-12));
    const auto stop = static_cast<std::size_t>(std::ceil(hi * static_cast<double>(k) - 1e-12));
    Band band;
    for (std::size_t i = start; i < std::min(stop, k); ++i) band.push_back(i);
    return band;
}

std::vector<BandSpec> default_bands() {
    return {{"top-20%", 0.0, 0.2}, {"20-50%", 0.2, 0.5}, {"50-100%", 0.5, 1.0}};
}

double alignment_score(std::span<const SvdResult> experts, const Band& band, std::size_t n) {
    if (n < 2) throw DomainError("alignment_score: need at least two experts");
    if (experts.size() != n) throw ShapeError("alignment_score: expert count mismatch");
    if (band.empty()) throw DomainError("alignment_score: empty band");
    const std::size_t k = experts.front().s.size();
    for (const SvdResult& e : experts) {
        if (e.s.size() != k) throw ShapeError("alignment_score: experts disagree on k");
    }
    double total = 0.0;
    for (std::size_t idx : band) {
        if (idx >= k) throw IndexError("alignment_score: band index out of range");
        for (std::size_t i = 0; i < n; ++i) {
            const Vector ui = experts[i].u.col(idx);
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const Vector uj = experts[j].u.col(idx);
                total += experts[i].s[idx] * experts[j].s[idx] * std::abs(numkit::cosine(ui, uj));
            }
        }
    }
    const double norm = static_cast<double>(band.size()) * static_cast<double>(n) *
                        static_cast<double>(n - 1);
    return total / norm;
}

double band_mass(std::span<const double> sigmas, const Band& band) {
    const double all = std::accumulate(sigmas.begin(), sigmas.end(), 0.0);
    if (!(all > 0.0)) throw DomainError("band_mass: singular values sum to zero");
    double part = 0.0;
    for (std::size_t idx : band) {
        if (idx >= sigmas.size()) throw IndexError("band_mass: band index out of range");
        part += sigmas[idx];
    }
    return part / all;
}

SpectralReport analyze_banks(std::span<const Bank> banks, const std::vector<BandSpec>& bands) {
    SpectralReport report;
    std::vector<std::vector<SvdResult>> svds;
    for (const Bank& bank : banks) {
        std::vector<SvdResult> bank_svd;
        for (std::size_t i = 0; i < bank.experts->n_experts(); ++i) {
            bank_svd.push_back(numkit::svd_thin(bank.experts->b[i]));
            report.spectra.push_back({bank.layer, bank.site, i, bank_svd.back().s});
        }
        svds.push_back(std::move(bank_svd));
    }
    for (const BandSpec& spec : bands) {
        BandRow row{spec.name, spec.lo, spec.hi, 0.0, 0.0, std::nullopt};
        double mass_sum = 0.0;
        std::size_t mass_count = 0;
        double align_sum = 0.0;
        std::size_t align_count = 0;
        for (const auto& bank_svd : svds) {
            if (bank_svd.empty()) continue;
            const Band band = fraction_band(bank_svd.front().s.size(), spec.lo, spec.hi);
            for (const SvdResult& s : bank_svd) {
                if (std::accumulate(s.s.begin(), s.s.end(), 0.0) > 0.0) {
                    mass_sum += band_mass(s.s, band);
                    ++mass_count;
                }
            }
            if (bank_svd.size() >= 2 && !band.empty()) {
                align_sum += alignment_score(bank_svd, band, bank_svd.size());
                ++align_count;
            }
        }
        row.mass = mass_count ? mass_sum / static_cast<double>(mass_count) : 0.0;
        row.alignment = align_count ? align_sum / static_cast<double>(align_count) : 0.0;
        report.bands.push_back(row);
    }
    return report;
}

SuppressionResult suppression_report(const SpectralReport& before, const SpectralReport& after,
                                     const std::vector<BandSpec>& bands) {
    if (before.spectra.size() != after.spectra.size()) {
        throw DataError("suppression_report: expert sets differ in size");
    }
    for (std::size_t e = 0; e < before.spectra.size(); ++e) {
        const auto& b = before.spectra[e];
        const auto& a = after.spectra[e];
        if (b.layer != a.layer || b.site != a.site || b.expert != a.expert ||
            b.sigmas.size() != a.sigmas.size()) {
            throw DataError("suppression_report: expert sets do not match");
        }
    }
    SuppressionResult out;
    for (const BandSpec& spec : bands) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t e = 0; e < before.spectra.size(); ++e) {
            const Vector& sb = before.spectra[e].sigmas;
            const Vector& sa = after.spectra[e].sigmas;
            for (std::size_t idx : fraction_band(sb.size(), spec.lo, spec.hi)) {
                if (sb[idx] == 0.0) {
                    ++out.excluded;
                    continue;
                }
                sum += (sa[idx] - sb[idx]) / sb[idx];
                ++count;
            }
        }
        BandRow row{spec.name, spec.lo, spec.hi, 0.0, 0.0, std::nullopt};
        row.suppression = count ? sum / static_cast<double>(count) : 0.0;
        out.bands.push_back(row);
    }
    return out;
}

}  // namespace mtlora::spectral
