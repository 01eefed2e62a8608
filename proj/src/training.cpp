// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mtlora/errors.hpp"

namespace mtlora::training {

ProjectorSet make_projectors(const Model& model, bool uniform_reg) {
    ProjectorSet out(model.params.sites.size());
    for (std::size_t l = 0; l < model.params.sites.size(); ++l) {
        for (const auto& sp : model.params.sites[l]) {
            std::vector<spectral::ReweightProjector> bank;
            for (const Matrix& b : sp.experts.b) {
                bank.push_back(uniform_reg ? spectral::ReweightProjector::identity()
                                           : spectral::make_projector(b));
            }
            out[l].push_back(std::move(bank));
        }
    }
    return out;
}

LossBreakdown loss_and_grad(const Model& model, std::span<const Example> batch,
                            const LossWeights& weights, const ProjectorSet& projectors,
                            GradBundle* grads) {
    if (batch.empty()) throw DomainError("loss_and_grad: empty batch");
    const std::size_t n_samples = batch.size();
    const double inv_s = 1.0 / static_cast<double>(n_samples);
    const auto& sites = model.params.sites;

    std::vector<model::ForwardTrace> traces(n_samples);
    std::vector<Vector> logits(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        logits[s] = model::forward(model, batch[s].tokens, batch[s].task, &traces[s]);
    }

    LossBreakdown out;
    const bool balance = weights.lambda2 > 0.0 && model.routing == model::RoutingMode::Learned;
    model::RoutingSeed seed;
    if (balance) {
        seed.resize(sites.size());
        for (std::size_t l = 0; l < sites.size(); ++l) {
            for (std::size_t k = 0; k < sites[l].size(); ++k) {
                routing::RoutingStats stats(model.cfg.n_tasks);
                for (const auto& tr : traces) stats.add(tr.layers[l].sites[k].pi);
                const routing::BalanceLoss bl =
                    routing::balance_loss(stats, model.cfg.n_tasks, weights.lambda2);
                out.balance += bl.value;
                const std::size_t g = model.cfg.groups;
                Matrix d_pi(model.cfg.n_tasks, g);
                for (std::size_t i = 0; i < model.cfg.n_tasks; ++i) {
                    for (std::size_t j = 0; j < g; ++j) {
                        d_pi(i, j) = bl.d_usage[i] * inv_s / static_cast<double>(g);
                    }
                }
                seed[l].push_back(std::move(d_pi));
            }
        }
    }

    for (std::size_t s = 0; s < n_samples; ++s) {
        model::CrossEntropy ce = model::cross_entropy(logits[s], batch[s].label);
        out.task += ce.loss * inv_s;
        if (grads) {
            for (double& v : ce.d_logits) v *= inv_s;
            model::backward(model, traces[s], ce.d_logits, *grads, balance ? &seed : nullptr);
        }
    }

    if (weights.lambda1 > 0.0) {
        if (projectors.size() != sites.size()) {
            throw ConfigError("loss_and_grad: projector set does not match the model");
        }
        for (std::size_t l = 0; l < sites.size(); ++l) {
            if (projectors[l].size() != sites[l].size()) {
                throw ConfigError("loss_and_grad: projector set does not match the model");
            }
            for (std::size_t k = 0; k < sites[l].size(); ++k) {
                const spectral::SpectralLoss sl =
                    spectral::spectral_loss(sites[l][k].experts, projectors[l][k], weights.lambda1);
                out.spectral += sl.value;
                if (grads) {
                    auto& gb = grads->grads.sites[l][k].experts.b;
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += sl.grads[i];
                }
            }
        }
    }
    return out;
}

namespace {

struct StepBuffers {
    std::vector<std::span<double>> params;
    std::vector<std::span<double>> grads;
    std::vector<std::span<double>> velocity;
    std::vector<bool> active;
};

StepBuffers bind(Model& model, GradBundle& grads, GradBundle& velocity) {
    StepBuffers b;
    model::visit_tensors(model.params, [&](const model::TensorRef& t) {
        b.params.push_back(t.data);
        b.active.push_back(model.trainable(t.kind));
    });
    model::visit_tensors(grads.grads, [&](const model::TensorRef& t) { b.grads.push_back(t.data); });
    model::visit_tensors(velocity.grads,
                         [&](const model::TensorRef& t) { b.velocity.push_back(t.data); });
    return b;
}

}  // namespace

std::vector<EpochLog> train(Model& model, std::span<const Example> data, const LossWeights& weights,
                            const OptimConfig& opt, std::uint64_t seed,
                            const EpochCallback& on_epoch) {
    if (opt.batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(opt.lr > 0.0) || opt.momentum < 0.0 || opt.momentum >= 1.0) {
        throw ConfigError("train: require lr > 0 and 0 <= momentum < 1");
    }
    if (data.empty()) throw DataError("train: empty training set");

    numkit::Rng rng = numkit::Rng(seed).derive(0x5eed'0001);
    GradBundle grads = GradBundle::zeros_like(model);
    GradBundle velocity = GradBundle::zeros_like(model);
    // Parameter storage is stable for the lifetime of the loop.
    const StepBuffers buf = bind(model, grads, velocity);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Example> batch;
    std::vector<EpochLog> logs;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const ProjectorSet projectors =
            weights.lambda1 > 0.0 ? make_projectors(model, weights.uniform_reg) : ProjectorSet{};
        rng.shuffle(order);
        EpochLog log{epoch, {}};
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
            const std::size_t stop = std::min(order.size(), start + opt.batch_size);
            batch.clear();
            for (std::size_t i = start; i < stop; ++i) batch.push_back(data[order[i]]);

            grads.clear();
            const LossBreakdown lb = loss_and_grad(model, batch, weights, projectors, &grads);
            if (!std::isfinite(lb.total())) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", batch " << n_batches << " (seed "
                    << seed << "; task=" << lb.task << " spectral=" << lb.spectral
                    << " balance=" << lb.balance << ")";
                throw NumericError(msg.str());
            }
            for (std::size_t t = 0; t < buf.params.size(); ++t) {
                if (!buf.active[t]) continue;
                auto p = buf.params[t];
                auto g = buf.grads[t];
                auto v = buf.velocity[t];
                for (std::size_t i = 0; i < p.size(); ++i) {
                    v[i] = opt.momentum * v[i] + g[i];
                    p[i] -= opt.lr * v[i];
                }
            }
            log.loss.task += lb.task;
            log.loss.spectral += lb.spectral;
            log.loss.balance += lb.balance;
            ++n_batches;
        }
        const double inv = 1.0 / static_cast<double>(n_batches);
        log.loss.task *= inv;
        log.loss.spectral *= inv;
        log.loss.balance *= inv;
        logs.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return logs;
}

EvalResult evaluate(const Model& model, std::span<const Example> data) {
    const auto& sites = model.params.sites;
    EvalResult out;
    out.accuracy.assign(model.cfg.n_tasks, 0.0);
    out.count.assign(model.cfg.n_tasks, 0);
    out.routing.resize(sites.size());
    for (std::size_t l = 0; l < sites.size(); ++l) {
        out.routing[l].assign(sites[l].size(), routing::RoutingStats(model.cfg.n_tasks));
    }
    std::vector<std::size_t> correct(model.cfg.n_tasks, 0);
    model::ForwardTrace trace;
    for (const Example& ex : data) {
        const Vector logits = model::forward(model, ex.tokens, ex.task, &trace);
        const auto best = static_cast<std::size_t>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (best == ex.label) ++correct[ex.task];
        ++out.count[ex.task];
        for (std::size_t l = 0; l < sites.size(); ++l) {
            for (std::size_t k = 0; k < sites[l].size(); ++k) {
                out.routing[l][k].add(trace.layers[l].sites[k].pi);
            }
        }
    }
    double acc_sum = 0.0;
    std::size_t with_data = 0;
    for (std::size_t t = 0; t < model.cfg.n_tasks; ++t) {
        if (out.count[t] == 0) continue;
        out.accuracy[t] = static_cast<double>(correct[t]) / static_cast<double>(out.count[t]);
        acc_sum += out.accuracy[t];
        ++with_data;
    }
    out.mean_accuracy = with_data ? acc_sum / static_cast<double>(with_data) : 0.0;

    double ent_sum = 0.0;
    std::size_t ent_n = 0;
    for (const auto& layer : out.routing) {
        for (const auto& stats : layer) {
            for (double e : stats.entropies()) ent_sum += e;
            ent_n += stats.samples();
        }
    }
    out.mean_entropy = ent_n ? ent_sum / static_cast<double>(ent_n) : 0.0;
    return out;
}

}  // namespace mtlora::training
