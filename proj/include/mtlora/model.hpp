// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale frozen Pre-LN transformer with routed adapter banks.
//
// Block-level modes add the routed update as a parallel residual path fed by
// the sub-block's LayerNorm output:
//     h = x + Attn(LN₁(x)) [+ Δ_attn(LN₁(x))]
//     y = h + FFN(LN₂(h))  [+ Δ_ffn(LN₂(h))]
// Component mode injects Δ_q, Δ_v into the query/value projections instead,
// so adapter gradients pass through the attention softmax.
//
// Tokens are row vectors; frozen weights are stored input-major (in × out).
// Every adapted site owns an ExpertSet and a router fed by the mean-pooled
// LayerNorm output of that site.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtlora/adapters.hpp"
#include "mtlora/numkit.hpp"
#include "mtlora/routing.hpp"

namespace mtlora::model {

using adapters::AttachMode;
using numkit::Matrix;
using numkit::Vector;

enum class Site { Attn, Ffn, Query, Value };
std::string_view to_string(Site site);
/// Site order within a layer for the given mode.
std::vector<Site> sites_for(AttachMode mode);

/// How routing weights are produced at forward time.
enum class RoutingMode {
    Learned,     // per-site router MLP
    Uniform,     // static 1/N
    TaskOracle,  // one-hot on the example's task id
};
std::string_view to_string(RoutingMode mode);
RoutingMode parse_routing_mode(std::string_view text);

struct ModelConfig {
    std::size_t d = 32;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t seq_len = 8;
    std::size_t n_tasks = 1;  // also the number of experts per bank
    std::size_t classes = 4;
    std::size_t rank = 4;
    std::size_t groups = 1;
    std::size_t router_hidden = 0;  // 0 selects d/2
    double router_init = 1.0;       // router output std × √hidden; 0 gives a uniform router
    AttachMode attach_mode = AttachMode::BlockBoth;
    double scale = 1.0;
    double ln_eps = 1e-5;
    bool train_a = true;
    bool train_heads = true;
    bool train_router = true;

    std::size_t ffn_dim() const noexcept { return 4 * d; }
    std::size_t router_width() const noexcept { return router_hidden ? router_hidden : d / 2; }
    void validate() const;
};

struct LayerNormParams {
    Vector gamma;
    Vector beta;
};

struct BlockWeights {
    LayerNormParams ln1, ln2;
    Matrix wq, wk, wv, wo;  // d × d
    Matrix ffn_w1;          // d × 4d
    Matrix ffn_w2;          // 4d × d
};

struct BaseWeights {
    Matrix embed;  // d × d
    Matrix pos;    // seq × d
    std::vector<BlockWeights> blocks;
    LayerNormParams ln_final;

    bool operator==(const BaseWeights& other) const;
};

struct SiteParams {
    Site site;
    adapters::ExpertSet experts;
    routing::RouterParams router;
};

struct Head {
    Matrix w;  // d × K
    Vector b;  // K
};

/// Everything the optimiser may touch. Gradient bundles share this layout.
struct TrainableParams {
    std::vector<std::vector<SiteParams>> sites;  // [layer][site]
    std::vector<Head> heads;                     // one per task
};

enum class TensorKind { A, B, RouterW1, RouterB1, RouterW2, RouterB2, HeadW, HeadB };

struct TensorRef {
    std::string name;  // e.g. "layer1.ffn.b3", "layer0.q.router.w1", "head2.w"
    TensorKind kind;
    std::size_t layer = 0;  // site tensors only
    Site site = Site::Attn;
    std::size_t index = 0;  // expert for B, task for heads
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::span<double> data;
};

/// Visits every tensor in a fixed, documented order: per layer, per site:
/// a, b0..b{N−1}, router.w1, router.b1, router.w2, router.b2; then per task
/// head w, b.
void visit_tensors(TrainableParams& params, const std::function<void(const TensorRef&)>& fn);
void visit_tensors(const TrainableParams& params,
                   const std::function<void(const TensorRef&)>& fn);

struct Model {
    ModelConfig cfg;
    std::uint64_t seed = 0;
    BaseWeights base;
    TrainableParams params;
    RoutingMode routing = RoutingMode::Learned;

    /// Seeded backbone (std 1/√fan_in, then frozen), adapters with A ~ N(0, 1/d)
    /// and B = 0, routers per `router_init`, and task heads drawn once and copied to
    /// every task so all tasks start from the same label space.
    static Model create(const ModelConfig& cfg, std::uint64_t seed);

    /// Whether gradients are emitted for this tensor under the configuration.
    bool trainable(TensorKind kind) const noexcept;
};

/// Zeroed tensors shaped like the model's trainable parameters.
struct GradBundle {
    TrainableParams grads;

    static GradBundle zeros_like(const Model& model);
    void clear();
    GradBundle& operator+=(const GradBundle& other);
    void scale(double s);
};

// ---------------------------------------------------------------------------
// Forward / backward

struct RowNormCache {
    Matrix xhat;
    Vector rstd;
};

struct SiteTrace {
    Matrix input;  // LayerNorm output seen by adapter and router
    routing::RouterTrace router;
    routing::RoutingWeights pi;
    adapters::SequenceTrace adapter;
};

struct LayerTrace {
    RowNormCache ln1, ln2;
    Matrix z1, q, k, v;
    std::vector<Matrix> probs;  // per head, seq × seq
    Matrix attn_concat;
    Matrix z2, ffn_pre, ffn_act;
    std::vector<SiteTrace> sites;  // aligned with sites_for(mode)
};

struct ForwardTrace {
    bool valid = false;
    std::size_t task = 0;
    std::vector<LayerTrace> layers;
    Vector pooled;
    Vector feat;  // LN_final(pooled)
    double final_rstd = 0.0;
    Vector final_xhat;
    Vector logits;
};

/// Logits for one sequence (seq_len × d) of task `task`. Fills `trace` if given.
Vector forward(const Model& model, const Matrix& tokens, std::size_t task,
               ForwardTrace* trace = nullptr);

/// Extra dL/dΠ per [layer][site], e.g. from the load-balance loss.
using RoutingSeed = std::vector<std::vector<Matrix>>;

/// Accumulates exact reverse-mode gradients of a scalar loss whose gradient
/// w.r.t. the logits is `d_logits`. Frozen backbone tensors receive none.
void backward(const Model& model, const ForwardTrace& trace, std::span<const double> d_logits,
              GradBundle& grads, const RoutingSeed* routing_seed = nullptr);

GradBundle backward(const Model& model, const ForwardTrace& trace,
                    std::span<const double> d_logits);

struct CrossEntropy {
    double loss = 0.0;
    Vector d_logits;
};
CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label);

// ---------------------------------------------------------------------------
// Softmax-Jacobian analysis

struct SoftmaxJacobian {
    Vector s;
    Matrix j;  // J[a,b] = s_a(δ_ab − s_b)
};

/// Throws DomainError if s leaves the simplex by more than 1e-9.
SoftmaxJacobian softmax_jacobian(std::span<const double> s);

struct IsolationProbe {
    std::vector<double> max_abs_delta;  // per layer, over heads and entries
    std::vector<bool> bit_identical;    // per layer
};

/// Evaluates attention probabilities before and after `perturb` is applied to
/// a copy of the trainable parameters.
IsolationProbe attention_isolation_probe(const Model& model, const Matrix& tokens,
                                         std::size_t task,
                                         const std::function<void(TrainableParams&)>& perturb);

}  // namespace mtlora::model
