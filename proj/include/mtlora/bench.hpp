// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task benchmark and experiment runner.
//
// Geometry (orthonormal basis drawn once per seed, independent of N):
//   s₀..s_{K−1}   shared label directions, identical for every task
//   c₀..c_{K−1}   conflict subspace
//   p₀..p_{N−1}   task-identity directions
// Class k of task t has mean
//   μ_{t,k} = ω·s_k + √(1−ω²)·v_{t,k} + γ·p_t,   v_{t,k} = Σ_m H[k,m]·h_t[m]·c_m / √K
// where H is the K×K Sylvester-Hadamard matrix and h_t ∈ {±1}^K is a task
// sign mask. Masks are taken in order of increasing Hamming distance from
// all-ones, so adding tasks adds progressively more contradictory labelings
// of the same subspace and a static average of independently trained
// experts degrades as N grows. Every token is μ plus isotropic noise.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlora/diagnostics.hpp"
#include "mtlora/model.hpp"
#include "mtlora/training.hpp"

namespace mtlora::bench {

using model::Matrix;
using model::Vector;
using training::Example;

struct TaskTemplate {
    std::size_t d = 32;
    std::size_t seq_len = 8;
    std::size_t classes = 4;  // power of two
    std::size_t train_size = 256;
    std::size_t val_size = 128;
    double shared_weight = 0.0;  // ω
    double task_signal = 1.0;    // γ
    double noise = 0.5;          // per-coordinate token noise std

    void validate(std::size_t n_tasks) const;
};

struct TaskSpec {
    std::size_t task = 0;
    std::size_t classes = 0;
    Matrix shared;       // K × d, rows s_k
    Matrix conflict;     // K × d, rows v_{t,k}
    Vector identity;     // p_t
    Vector sign_mask;    // h_t
    double shared_weight = 0.0;
    double task_signal = 0.0;
    double noise = 0.0;
    std::size_t train_size = 0;
    std::size_t val_size = 0;
    std::uint64_t seed = 0;

    /// K × d matrix of class means μ_{t,k}.
    Matrix class_means() const;
};

struct TaskData {
    TaskSpec spec;
    std::vector<Example> train;
    std::vector<Example> val;
};

/// Sign masks in benchmark order (length K, entries ±1), at least `count`.
std::vector<Vector> sign_masks(std::size_t classes, std::size_t count);
Matrix hadamard(std::size_t k);

std::vector<TaskSpec> make_task_specs(std::size_t n_tasks, const TaskTemplate& tmpl, std::uint64_t seed);

/// Deterministic per seed; task t's data does not depend on n_tasks.
/// Token values are rounded to 32-bit floats so on-disk datasets reproduce
/// in-memory ones exactly.
std::vector<TaskData> gen_tasks(std::size_t n_tasks, const TaskTemplate& tmpl, std::uint64_t seed);

std::vector<Example> concat_train(const std::vector<TaskData>& tasks);
std::vector<Example> concat_val(const std::vector<TaskData>& tasks);

// ---------------------------------------------------------------------------
// Dataset files

/// One file per task: "MTLD", u16 version, u32 header length, header JSON
/// (task, classes, d, seq_len, sizes, seed, ...), then for every example
/// (train first) a u32 label followed by seq_len×d little-endian float32.
void save_task(const std::filesystem::path& path, const TaskData& task);
TaskData load_task(const std::filesystem::path& path);

/// Writes task_XXX.bin files and manifest.json into `dir`.
void save_dataset(const std::filesystem::path& dir, const std::vector<TaskData>& tasks,
                  const TaskTemplate& tmpl, std::uint64_t seed);
std::vector<TaskData> load_dataset(const std::filesystem::path& dir);

nlohmann::json to_json(const TaskTemplate& tmpl);
TaskTemplate template_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Experiments

enum class Composition { SingleTaskOracle, NaiveAverage, UniformRouting, ScalarRouting, FineGrained };
std::string_view to_string(Composition c);
Composition parse_composition(std::string_view text);

/// Everything needed to train and evaluate one configuration.
struct RunSpec {
    model::ModelConfig model;  // n_tasks is overwritten per cell
    TaskTemplate data;
    training::LossWeights loss;
    training::OptimConfig optim;
    std::size_t conflict_pairs = 0;  // 0 disables the conflict section
    bool spectral_report = true;

    /// Cross-field checks (model/data agreement, ranges).
    void validate() const;
};

nlohmann::json to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunSpec& spec);
/// Fields absent from `j` keep their value in `defaults`; unknown keys throw.
RunSpec run_spec_from_json(const nlohmann::json& j, RunSpec defaults = {});

struct CellKey {
    std::size_t n_tasks = 2;
    double lambda1 = 0.0;
    std::size_t groups = 1;
    adapters::AttachMode attach = adapters::AttachMode::BlockBoth;
    Composition composition = Composition::FineGrained;
    bool uniform_reg = false;

    std::string label() const;
};

struct CellResult {
    CellKey key;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double mean_accuracy = 0.0;
    double mean_entropy = 0.0;
    std::optional<double> conflict_score;
    std::vector<double> band_alignment;  // per default band
    nlohmann::json report;
};

/// Full record including the run report; round-trips through JSON.
nlohmann::json to_json(const CellResult& result);
CellResult cell_result_from_json(const nlohmann::json& j);

/// Trained models are cached by (run spec, seed, task) so that independent
/// single-task experts are reused across cells. Thread-safe.
class ExpertCache;

/// Every adapted site of the model as a spectral bank, in layer/site order.
std::vector<spectral::Bank> banks_of(const model::Model& model);

/// Trains and evaluates one (cell, seed).
CellResult run_cell(const RunSpec& base, const CellKey& key, std::uint64_t seed,
                    ExpertCache* cache = nullptr);

/// Jointly trained model for a routed composition; exposed for analysis.
model::Model train_joint(const RunSpec& base, const CellKey& key, std::uint64_t seed,
                         const std::vector<TaskData>& tasks,
                         std::vector<training::EpochLog>* logs = nullptr);

/// Independently trained single-task model for task `t` (N = 1, A frozen).
model::Model train_single(const RunSpec& base, std::size_t t, std::uint64_t seed,
                          const TaskData& task);

/// Merges single-task experts into an N-expert model with static 1/N routing.
model::Model merge_naive(const RunSpec& base, const CellKey& key, std::uint64_t seed,
                         const std::vector<const model::Model*>& experts);

struct ExperimentGrid {
    std::vector<std::size_t> n_tasks{2};
    std::vector<double> lambda1{0.0};
    std::vector<std::size_t> groups{1};
    std::vector<adapters::AttachMode> attach{adapters::AttachMode::BlockBoth};
    std::vector<Composition> composition{Composition::FineGrained};
    std::vector<bool> uniform_reg{false};
    std::vector<std::uint64_t> seeds{1};

    void validate() const;
    std::vector<CellKey> cells() const;
};

using GridLogger = std::function<void(const std::string&)>;

struct GridResult {
    std::vector<CellResult> runs;  // cell-major, seeds in order
    std::vector<std::string> warnings;
    std::size_t failures = 0;
};

/// Runs every (cell, seed) on up to `workers` threads. Duplicate seeds are
/// dropped with a warning; a failing cell is recorded and the grid continues.
GridResult run_grid(const RunSpec& base, const ExperimentGrid& grid, std::size_t workers,
                    const GridLogger& log = {});

/// One row per cell: keys, seeds, then mean and std of every metric.
std::string aggregate_csv(const GridResult& result);

/// Named presets: "collapse", "lambda-sweep", "granularity", "attach-level".
ExperimentGrid preset_grid(std::string_view name);
/// Run spec tuned for the presets.
RunSpec preset_spec(std::string_view name);

nlohmann::json to_json(const ExperimentGrid& grid);
ExperimentGrid grid_from_json(const nlohmann::json& j);

}  // namespace mtlora::bench
