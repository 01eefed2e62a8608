// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/adapters.hpp"

#include <cmath>
#include <string>

#include "mtlora/errors.hpp"

namespace mtlora::adapters {

std::string_view to_string(AttachMode mode) {
    switch (mode) {
        case AttachMode::BlockAttn: return "block-attn";
        case AttachMode::BlockFfn: return "block-ffn";
        case AttachMode::BlockBoth: return "block-both";
        case AttachMode::ComponentQV: return "component-qv";
    }
    return "unknown";
}

AttachMode parse_attach_mode(std::string_view text) {
    if (text == "block-attn") return AttachMode::BlockAttn;
    if (text == "block-ffn") return AttachMode::BlockFfn;
    if (text == "block-both") return AttachMode::BlockBoth;
    if (text == "component-qv") return AttachMode::ComponentQV;
    throw ConfigError("unknown attach mode '" + std::string(text) + "'");
}

void ExpertSet::validate() const {
    if (b.empty()) throw ConfigError("ExpertSet: at least one expert required");
    if (rank() == 0 || rank() > hidden()) throw ConfigError("ExpertSet: require 0 < r <= d");
    for (const Matrix& bi : b) {
        if (bi.rows() != hidden() || bi.cols() != rank()) {
            throw ShapeError("ExpertSet: every B_i must be d x r");
        }
    }
}

ExpertSet make_expert_set(std::size_t d, std::size_t rank, std::size_t n_experts, double scale,
                          numkit::Rng& rng) {
    ExpertSet es;
    es.a = numkit::random_normal(rank, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    es.b.assign(n_experts, Matrix(d, rank));
    es.scale = scale;
    es.validate();
    return es;
}

Vector expert_update(const ExpertSet& es, std::size_t i, std::span<const double> x) {
    if (i >= es.n_experts()) {
        throw IndexError("expert_update: expert " + std::to_string(i) + " out of range");
    }
    if (x.size() != es.hidden()) throw ShapeError("expert_update: input length != d");
    Vector out = numkit::matvec(es.b[i], numkit::matvec(es.a, x));
    for (double& v : out) v *= es.scale;
    return out;
}

ComposedUpdate compose(const ExpertSet& es, const RoutingWeights& pi, std::span<const double> x) {
    const std::size_t d = es.hidden();
    if (pi.n_experts() != es.n_experts()) throw ShapeError("compose: routing/expert count mismatch");
    if (pi.groups() == 0 || d % pi.groups() != 0) {
        throw ConfigError("compose: group count does not divide d");
    }
    ComposedUpdate out{Vector(d, 0.0)};
    Vector row(pi.groups());
    for (std::size_t i = 0; i < es.n_experts(); ++i) {
        const Vector delta = expert_update(es, i, x);
        for (std::size_t j = 0; j < pi.groups(); ++j) row[j] = pi.pi(i, j);
        const Vector w = routing::broadcast(row, d);
        for (std::size_t c = 0; c < d; ++c) out.delta[c] += w[c] * delta[c];
    }
    return out;
}

Vector attach_block(std::span<const double> h_in, std::span<const double> block_out,
                    const ComposedUpdate& delta) {
    if (h_in.size() != block_out.size() || h_in.size() != delta.delta.size()) {
        throw ShapeError("attach_block: length mismatch");
    }
    Vector out(h_in.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = h_in[c] + block_out[c] + delta.delta[c];
    return out;
}

Vector attach_component(const Matrix& w, const ExpertSet& es, const RoutingWeights& pi,
                        std::span<const double> x) {
    if (w.rows() != x.size() || w.cols() != es.hidden()) {
        throw ShapeError("attach_component: projection shape mismatch");
    }
    Vector out = numkit::vecmat(x, w);
    const ComposedUpdate delta = compose(es, pi, x);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += delta.delta[c];
    return out;
}

// ---------------------------------------------------------------------------

Matrix apply_sequence(const ExpertSet& es, const RoutingWeights& pi, const Matrix& z,
                      SequenceTrace* trace) {
    const std::size_t d = es.hidden();
    const std::size_t n = es.n_experts();
    const std::size_t g = pi.groups();
    if (z.cols() != d) throw ShapeError("apply_sequence: token width != d");
    if (pi.n_experts() != n) throw ShapeError("apply_sequence: routing/expert count mismatch");
    if (g == 0 || d % g != 0) throw ConfigError("apply_sequence: group count does not divide d");
    const std::size_t width = d / g;

    Matrix low = numkit::matmul_nt(z, es.a);
    Matrix out(z.rows(), d);
    std::vector<Matrix> expert_out;
    if (trace) expert_out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Matrix e = numkit::matmul_nt(low, es.b[i]);
        e *= es.scale;
        for (std::size_t t = 0; t < z.rows(); ++t) {
            const auto er = e.row(t);
            auto orow = out.row(t);
            for (std::size_t j = 0; j < g; ++j) {
                const double w = pi.pi(i, j);
                if (w == 0.0) continue;
                for (std::size_t c = j * width; c < (j + 1) * width; ++c) orow[c] += w * er[c];
            }
        }
        if (trace) expert_out.push_back(std::move(e));
    }
    if (trace) {
        trace->low = std::move(low);
        trace->expert_out = std::move(expert_out);
    }
    return out;
}

ExpertGrads zeros_like(const ExpertSet& es) {
    ExpertGrads g;
    g.a = Matrix(es.a.rows(), es.a.cols());
    g.b.assign(es.n_experts(), Matrix(es.hidden(), es.rank()));
    return g;
}

Matrix backward_sequence(const ExpertSet& es, const RoutingWeights& pi, const Matrix& z,
                         const SequenceTrace& trace, const Matrix& d_delta, ExpertGrads& grads,
                         bool grad_a, Matrix& d_pi) {
    const std::size_t d = es.hidden();
    const std::size_t n = es.n_experts();
    const std::size_t g = pi.groups();
    const std::size_t width = d / g;
    const std::size_t tokens = z.rows();
    if (d_delta.rows() != tokens || d_delta.cols() != d) throw ShapeError("backward_sequence: d_delta");
    if (trace.expert_out.size() != n) throw StateError("backward_sequence: missing forward trace");

    d_pi = Matrix(n, g);
    Matrix d_low(tokens, es.rank());
    Matrix d_e(tokens, d);
    for (std::size_t i = 0; i < n; ++i) {
        const Matrix& e = trace.expert_out[i];
        for (std::size_t t = 0; t < tokens; ++t) {
            const auto er = e.row(t);
            const auto dr = d_delta.row(t);
            auto der = d_e.row(t);
            for (std::size_t j = 0; j < g; ++j) {
                const double w = pi.pi(i, j);
                double acc = 0.0;
                for (std::size_t c = j * width; c < (j + 1) * width; ++c) {
                    acc += er[c] * dr[c];
                    der[c] = w * dr[c] * es.scale;
                }
                d_pi(i, j) += acc;
            }
        }
        grads.b[i] += numkit::matmul_tn(d_e, trace.low);
        d_low += numkit::matmul(d_e, es.b[i]);
    }
    if (grad_a) grads.a += numkit::matmul_tn(d_low, z);
    return numkit::matmul(d_low, es.a);
}

}  // namespace mtlora::adapters
