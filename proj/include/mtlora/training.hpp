// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Total objective L = L_task + λ₁·L_spectral + λ₂·L_balance, its gradient
// over a minibatch, SGD with momentum, and evaluation.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mtlora/model.hpp"
#include "mtlora/routing.hpp"
#include "mtlora/spectral.hpp"

namespace mtlora::training {

using model::GradBundle;
using model::Model;
using numkit::Matrix;
using numkit::Vector;

struct Example {
    Matrix tokens;  // seq_len × d
    std::size_t task = 0;
    std::size_t label = 0;
};

struct LossWeights {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    bool uniform_reg = false;  // identity projectors (w ≡ 1)
};

struct OptimConfig {
    double lr = 0.03;
    double momentum = 0.9;
    std::size_t batch_size = 16;
    std::size_t epochs = 40;
};

/// Projectors per [layer][site][expert].
using ProjectorSet = std::vector<std::vector<std::vector<spectral::ReweightProjector>>>;

ProjectorSet make_projectors(const Model& model, bool uniform_reg);

struct LossBreakdown {
    double task = 0.0;
    double spectral = 0.0;
    double balance = 0.0;

    double total() const noexcept { return task + spectral + balance; }
};

/// Batch loss: mean cross-entropy, spectral penalty summed over adapted sites,
/// balance penalty per site on the batch's mean usage. Accumulates the exact
/// gradient into `grads` when given.
LossBreakdown loss_and_grad(const Model& model, std::span<const Example> batch,
                            const LossWeights& weights, const ProjectorSet& projectors,
                            GradBundle* grads);

struct EpochLog {
    std::size_t epoch = 0;
    LossBreakdown loss;  // means over the epoch's batches
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch SGD with momentum. Projectors are refreshed from the current B
/// at every epoch boundary. Throws NumericError naming the epoch, batch and
/// seed if the loss becomes non-finite.
std::vector<EpochLog> train(Model& model, std::span<const Example> data, const LossWeights& weights,
                            const OptimConfig& opt, std::uint64_t seed,
                            const EpochCallback& on_epoch = {});

struct EvalResult {
    std::vector<double> accuracy;   // per task
    std::vector<std::size_t> count;  // per task
    double mean_accuracy = 0.0;      // mean over tasks with data
    /// Routing statistics per [layer][site].
    std::vector<std::vector<routing::RoutingStats>> routing;
    double mean_entropy = 0.0;  // over all sites and samples
};

EvalResult evaluate(const Model& model, std::span<const Example> data);

}  // namespace mtlora::training
