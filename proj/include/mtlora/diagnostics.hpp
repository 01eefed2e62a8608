// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Gradient-conflict measurement and run-report assembly.
//
// Conflict metrics use per-datum task-loss gradients restricted to the
// up-projections Bᵢ (the shared A is excluded). The conflict score is
// C = E[−cos(∇_A, ∇_B)] over random task pairs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlora/model.hpp"
#include "mtlora/spectral.hpp"
#include "mtlora/training.hpp"

namespace mtlora::diagnostics {

using model::Model;
using numkit::Vector;
using training::Example;

/// Examples grouped by task id.
using TaskExamples = std::vector<std::vector<Example>>;

TaskExamples group_by_task(std::span<const Example> data, std::size_t n_tasks);

struct LayerCosine {
    std::size_t layer = 0;
    double mean_cos = 0.0;
    double std_cos = 0.0;
};

struct ConflictReport {
    std::size_t samples = 0;
    double mean_cos = 0.0;
    double std_cos = 0.0;
    double score = 0.0;           // mean(−cos)
    std::size_t zero_gradient = 0;  // draws where either gradient vanished (cos := 0)
    std::vector<LayerCosine> per_layer;
    std::string attach_mode;

    /// Throws ShapeError unless the per-layer table has `layers` rows.
    void validate(std::size_t layers) const;
};

struct GradientScope {
    bool include_router = false;  // exploratory only
};

/// Flattened task-loss gradient for one datum, B tensors (and optionally
/// router tensors) of the given layer, or of every layer when `layer` is empty.
Vector datum_gradient(const Model& model, const Example& ex, std::optional<std::size_t> layer,
                      GradientScope scope = {});

/// Draws `pairs` (task₁ ≠ task₂, one datum each) and records the cosine of
/// their gradients, overall and per layer.
ConflictReport conflict_score(const Model& model, const TaskExamples& data, std::size_t pairs,
                              numkit::Rng& rng, GradientScope scope = {});

/// Per layer: mean over ordered task pairs of the cosine between per-task
/// gradients averaged over `samples_per_task` draws.
std::vector<LayerCosine> per_layer_correlation(const Model& model, const TaskExamples& data,
                                               std::size_t samples_per_task, numkit::Rng& rng);

// ---------------------------------------------------------------------------
// Reports

using Json = nlohmann::json;

struct ReportInputs {
    Json config;  // echoed verbatim
    std::uint64_t seed = 0;
    std::optional<training::EvalResult> eval;
    std::vector<training::EpochLog> epochs;
    std::optional<spectral::SpectralReport> spectral;
    std::optional<spectral::SuppressionResult> suppression;
    std::optional<ConflictReport> conflict;
    std::optional<Json> extra;  // free-form section, e.g. Jacobian probes
};

constexpr int kReportVersion = 1;

/// JSON report with sorted keys. Absent sections are omitted.
Json run_report(const Model& model, const ReportInputs& in);

/// Canonical serialisation (2-space indent, trailing newline).
std::string dump(const Json& doc);

/// CSV of the per-layer cosine table: layer,mode,mean_cos,std.
std::string per_layer_csv(const ConflictReport& report);

}  // namespace mtlora::diagnostics
