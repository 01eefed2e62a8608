// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration documents and the binary checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//     "MTLR"  u16 version  u32 header_len  header JSON
//     u32 segment_count
//     per segment: u32 name_len, name, u32 rows, u32 cols, rows×cols float32
// The header carries dims, N, r, g, attach mode, routing mode, seed, epoch
// and optional stored metrics. Only trainable tensors are written; the frozen
// backbone is regenerated from the seed on load.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "mtlora/bench.hpp"
#include "mtlora/model.hpp"

namespace mtlora::io {

using Json = nlohmann::json;

struct RunConfig {
    bench::RunSpec spec;
    std::size_t n_tasks = 2;
    std::uint64_t seed = 1;
    model::RoutingMode routing = model::RoutingMode::Learned;
    std::string data_dir;
    std::string out_dir;
    std::optional<bench::ExperimentGrid> grid;
    std::string preset;
    std::size_t workers = 1;

    /// Model configuration with n_tasks applied.
    model::ModelConfig model_config() const;
    /// Normalised document; parse(to_json()) reproduces this config.
    Json to_json() const;
    void validate() const;
};

/// Strict parse: unknown keys and ill-typed fields throw ConfigError.
RunConfig parse_run_config(const Json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    model::Model model;
    std::size_t epoch = 0;
    Json metrics;  // null when absent
};

/// Byte image of a checkpoint.
std::string encode_checkpoint(const model::Model& model, std::size_t epoch, const Json& metrics = nullptr);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const model::Model& model, std::size_t epoch,
                     const Json& metrics = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rounds every trainable tensor to the nearest 32-bit float, i.e. the
/// precision a checkpoint stores.
void round_to_f32(model::Model& model);

/// Throws DataError unless both models have the same dims and layout.
void require_compatible(const model::Model& a, const model::Model& b);

std::string read_file(const std::filesystem::path& path);
/// Creates parent directories as needed. Throws ConfigError on failure.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace mtlora::io
