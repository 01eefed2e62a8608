// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/routing.hpp"

#include <algorithm>
#include <cmath>

#include "mtlora/errors.hpp"

namespace mtlora::routing {

void RouterParams::validate() const {
    if (n_experts == 0 || groups == 0) throw ConfigError("router: zero experts or groups");
    if (b1.size() != w1.cols() || w2.rows() != w1.cols() || w2.cols() != n_experts * groups ||
        b2.size() != w2.cols()) {
        throw ShapeError("router: inconsistent parameter shapes");
    }
}

RouterParams make_router(std::size_t d, std::size_t hidden, std::size_t n_experts,
                         std::size_t groups, numkit::Rng& rng, numkit::Rng* out_rng,
                         double out_std) {
    if (d == 0 || hidden == 0 || n_experts == 0 || groups == 0) {
        throw ConfigError("make_router: dimensions must be positive");
    }
    RouterParams rp;
    rp.w1 = numkit::random_normal(d, hidden, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    rp.b1.assign(hidden, 0.0);
    rp.w2 = out_rng && out_std > 0.0 ? numkit::random_normal(hidden, n_experts * groups, out_std, *out_rng)
                                     : Matrix(hidden, n_experts * groups);
    rp.b2.assign(n_experts * groups, 0.0);
    rp.n_experts = n_experts;
    rp.groups = groups;
    return rp;
}

RoutingWeights RoutingWeights::uniform(std::size_t n_experts, std::size_t groups) {
    if (n_experts == 0) throw DomainError("RoutingWeights::uniform: zero experts");
    return {Matrix(n_experts, groups, 1.0 / static_cast<double>(n_experts))};
}

RoutingWeights RoutingWeights::one_hot(std::size_t n_experts, std::size_t groups,
                                       std::size_t expert) {
    if (expert >= n_experts) throw IndexError("RoutingWeights::one_hot: expert out of range");
    RoutingWeights w{Matrix(n_experts, groups)};
    for (std::size_t j = 0; j < groups; ++j) w.pi(expert, j) = 1.0;
    return w;
}

void RoutingWeights::validate(double tol) const {
    for (std::size_t j = 0; j < pi.cols(); ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < pi.rows(); ++i) {
            const double p = pi(i, j);
            if (!(p >= -tol)) throw DomainError("routing weights: negative or NaN entry");
            sum += p;
        }
        if (std::abs(sum - 1.0) > tol) throw DomainError("routing weights: group off the simplex");
    }
}

RouterTrace route_pooled(const RouterParams& rp, std::span<const double> pooled) {
    if (pooled.size() != rp.input_dim()) throw ShapeError("route: input dimension mismatch");
    RouterTrace t;
    t.pooled.assign(pooled.begin(), pooled.end());
    t.pre = numkit::vecmat(pooled, rp.w1);
    for (std::size_t k = 0; k < t.pre.size(); ++k) t.pre[k] += rp.b1[k];
    t.act.resize(t.pre.size());
    for (std::size_t k = 0; k < t.pre.size(); ++k) t.act[k] = std::max(0.0, t.pre[k]);
    t.logits = numkit::vecmat(t.act, rp.w2);
    for (std::size_t k = 0; k < t.logits.size(); ++k) t.logits[k] += rp.b2[k];

    const std::size_t n = rp.n_experts;
    const std::size_t g = rp.groups;
    t.weights.pi = Matrix(n, g);
    Vector column(n);
    for (std::size_t j = 0; j < g; ++j) {
        for (std::size_t i = 0; i < n; ++i) column[i] = t.logits[i * g + j];
        numkit::softmax_inplace(column);
        for (std::size_t i = 0; i < n; ++i) t.weights.pi(i, j) = column[i];
    }
    return t;
}

RouterTrace route_traced(const RouterParams& rp, const Matrix& hidden) {
    if (hidden.rows() == 0) throw ShapeError("route: empty hidden-state sequence");
    if (hidden.cols() != rp.input_dim()) throw ShapeError("route: hidden width mismatch");
    Vector pooled(hidden.cols(), 0.0);
    for (std::size_t t = 0; t < hidden.rows(); ++t) {
        const auto row = hidden.row(t);
        for (std::size_t c = 0; c < pooled.size(); ++c) pooled[c] += row[c];
    }
    const double inv = 1.0 / static_cast<double>(hidden.rows());
    for (double& v : pooled) v *= inv;
    return route_pooled(rp, pooled);
}

RoutingWeights route(const RouterParams& rp, const Matrix& hidden) {
    return route_traced(rp, hidden).weights;
}

RoutingWeights route(const RouterParams& rp, std::span<const Vector> hidden) {
    if (hidden.empty()) throw ShapeError("route: empty hidden-state sequence");
    Matrix m(hidden.size(), hidden.front().size());
    for (std::size_t t = 0; t < hidden.size(); ++t) {
        if (hidden[t].size() != m.cols()) throw ShapeError("route: ragged hidden states");
        std::copy(hidden[t].begin(), hidden[t].end(), m.row(t).begin());
    }
    return route(rp, m);
}

RouterGrads zeros_like(const RouterParams& rp) {
    RouterGrads g;
    g.w1 = Matrix(rp.w1.rows(), rp.w1.cols());
    g.b1.assign(rp.b1.size(), 0.0);
    g.w2 = Matrix(rp.w2.rows(), rp.w2.cols());
    g.b2.assign(rp.b2.size(), 0.0);
    g.n_experts = rp.n_experts;
    g.groups = rp.groups;
    return g;
}

Vector router_backward(const RouterParams& rp, const RouterTrace& trace, const Matrix& d_pi,
                       RouterGrads& grads) {
    const std::size_t n = rp.n_experts;
    const std::size_t g = rp.groups;
    if (d_pi.rows() != n || d_pi.cols() != g) throw ShapeError("router_backward: d_pi shape");

    Vector d_logits(n * g);
    for (std::size_t j = 0; j < g; ++j) {
        double inner = 0.0;
        for (std::size_t i = 0; i < n; ++i) inner += trace.weights.pi(i, j) * d_pi(i, j);
        for (std::size_t i = 0; i < n; ++i) {
            d_logits[i * g + j] = trace.weights.pi(i, j) * (d_pi(i, j) - inner);
        }
    }

    const std::size_t h = rp.hidden_dim();
    Vector d_act(h, 0.0);
    for (std::size_t k = 0; k < h; ++k) {
        const auto w2k = rp.w2.row(k);
        auto gw2k = grads.w2.row(k);
        const double ak = trace.act[k];
        double acc = 0.0;
        for (std::size_t o = 0; o < n * g; ++o) {
            gw2k[o] += ak * d_logits[o];
            acc += w2k[o] * d_logits[o];
        }
        d_act[k] = trace.pre[k] > 0.0 ? acc : 0.0;
    }
    for (std::size_t o = 0; o < n * g; ++o) grads.b2[o] += d_logits[o];
    for (std::size_t k = 0; k < h; ++k) grads.b1[k] += d_act[k];

    const std::size_t d = rp.input_dim();
    Vector d_in(d, 0.0);
    for (std::size_t c = 0; c < d; ++c) {
        const auto w1c = rp.w1.row(c);
        auto gw1c = grads.w1.row(c);
        const double xc = trace.pooled[c];
        double acc = 0.0;
        for (std::size_t k = 0; k < h; ++k) {
            gw1c[k] += xc * d_act[k];
            acc += w1c[k] * d_act[k];
        }
        d_in[c] = acc;
    }
    return d_in;
}

Vector broadcast(std::span<const double> pi_row, std::size_t d) {
    const std::size_t g = pi_row.size();
    if (g == 0 || d % g != 0) {
        throw ConfigError("broadcast: group count " + std::to_string(g) + " does not divide d=" +
                          std::to_string(d));
    }
    const std::size_t width = d / g;
    Vector out(d);
    for (std::size_t j = 0; j < g; ++j)
        std::fill(out.begin() + static_cast<std::ptrdiff_t>(j * width),
                  out.begin() + static_cast<std::ptrdiff_t>((j + 1) * width), pi_row[j]);
    return out;
}

double routing_entropy(const RoutingWeights& pi) {
    pi.validate();
    const std::size_t g = pi.groups();
    double total = 0.0;
    for (std::size_t j = 0; j < g; ++j) {
        double h = 0.0;
        for (std::size_t i = 0; i < pi.n_experts(); ++i) {
            const double p = pi.pi(i, j);
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / static_cast<double>(g);
}

void RoutingStats::add(const RoutingWeights& pi) {
    if (pi.n_experts() != usage_sum_.size()) throw ShapeError("RoutingStats: expert count mismatch");
    const double inv_g = 1.0 / static_cast<double>(pi.groups());
    for (std::size_t i = 0; i < pi.n_experts(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < pi.groups(); ++j) s += pi.pi(i, j);
        usage_sum_[i] += s * inv_g;
    }
    entropies_.push_back(routing_entropy(pi));
}

void RoutingStats::merge(const RoutingStats& other) {
    if (other.usage_sum_.size() != usage_sum_.size()) {
        throw ShapeError("RoutingStats::merge: expert count mismatch");
    }
    for (std::size_t i = 0; i < usage_sum_.size(); ++i) usage_sum_[i] += other.usage_sum_[i];
    entropies_.insert(entropies_.end(), other.entropies_.begin(), other.entropies_.end());
}

Vector RoutingStats::mean_usage() const {
    Vector u = usage_sum_;
    if (entropies_.empty()) return u;
    const double inv = 1.0 / static_cast<double>(entropies_.size());
    for (double& v : u) v *= inv;
    return u;
}

double RoutingStats::mean_entropy() const {
    if (entropies_.empty()) return 0.0;
    double s = 0.0;
    for (double h : entropies_) s += h;
    return s / static_cast<double>(entropies_.size());
}

std::vector<std::size_t> RoutingStats::entropy_histogram(std::size_t bins) const {
    std::vector<std::size_t> hist(bins, 0);
    if (bins == 0 || usage_sum_.size() < 2) {
        if (bins > 0) hist[0] = entropies_.size();
        return hist;
    }
    const double hi = std::log(static_cast<double>(usage_sum_.size()));
    for (double h : entropies_) {
        auto b = static_cast<std::size_t>(std::floor(h / hi * static_cast<double>(bins)));
        hist[std::min(b, bins - 1)] += 1;
    }
    return hist;
}

BalanceLoss balance_loss(const RoutingStats& stats, std::size_t n_experts, double lambda2) {
    if (n_experts == 0) throw DomainError("balance_loss: zero experts");
    if (stats.n_experts() != n_experts) throw ShapeError("balance_loss: expert count mismatch");
    if (stats.samples() == 0) throw DomainError("balance_loss: no routing samples");
    const Vector u = stats.mean_usage();
    const double target = 1.0 / static_cast<double>(n_experts);
    const double nn = static_cast<double>(n_experts);
    BalanceLoss out;
    out.d_usage.resize(n_experts);
    for (std::size_t i = 0; i < n_experts; ++i) {
        const double dev = u[i] - target;
        out.value += dev * dev;
        out.d_usage[i] = lambda2 * nn * 2.0 * dev;
    }
    out.value *= lambda2 * nn;
    return out;
}

}  // namespace mtlora::routing
