// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mtlora/errors.hpp"

namespace mtlora::model {

std::string_view to_string(Site site) {
    switch (site) {
        case Site::Attn: return "attn";
        case Site::Ffn: return "ffn";
        case Site::Query: return "q";
        case Site::Value: return "v";
    }
    return "unknown";
}

std::vector<Site> sites_for(AttachMode mode) {
    switch (mode) {
        case AttachMode::BlockAttn: return {Site::Attn};
        case AttachMode::BlockFfn: return {Site::Ffn};
        case AttachMode::BlockBoth: return {Site::Attn, Site::Ffn};
        case AttachMode::ComponentQV: return {Site::Query, Site::Value};
    }
    return {};
}

std::string_view to_string(RoutingMode mode) {
    switch (mode) {
        case RoutingMode::Learned: return "learned";
        case RoutingMode::Uniform: return "uniform";
        case RoutingMode::TaskOracle: return "task-oracle";
    }
    return "unknown";
}

RoutingMode parse_routing_mode(std::string_view text) {
    if (text == "learned") return RoutingMode::Learned;
    if (text == "uniform") return RoutingMode::Uniform;
    if (text == "task-oracle") return RoutingMode::TaskOracle;
    throw ConfigError("unknown routing mode '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    if (d == 0 || layers == 0 || heads == 0 || seq_len == 0 || n_tasks == 0 || classes < 2) {
        throw ConfigError("model config: dimensions must be positive (classes >= 2)");
    }
    if (d % heads != 0) throw ConfigError("model config: d must be divisible by heads");
    if (groups == 0 || d % groups != 0) {
        throw ConfigError("model config: groups (" + std::to_string(groups) + ") must divide d (" +
                          std::to_string(d) + ")");
    }
    if (rank == 0 || rank > d) throw ConfigError("model config: require 0 < rank <= d");
    if (router_width() == 0) throw ConfigError("model config: router hidden width is zero");
    if (!(ln_eps > 0.0)) throw ConfigError("model config: ln_eps must be positive");
    if (!std::isfinite(scale)) throw ConfigError("model config: scale must be finite");
    if (!(router_init >= 0.0) || !std::isfinite(router_init)) {
        throw ConfigError("model config: router_init must be finite and non-negative");
    }
}

bool BaseWeights::operator==(const BaseWeights& other) const {
    auto ln_eq = [](const LayerNormParams& a, const LayerNormParams& b) {
        return a.gamma == b.gamma && a.beta == b.beta;
    };
    if (!(embed == other.embed) || !(pos == other.pos) || !ln_eq(ln_final, other.ln_final) ||
        blocks.size() != other.blocks.size()) {
        return false;
    }
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const BlockWeights& a = blocks[l];
        const BlockWeights& b = other.blocks[l];
        if (!ln_eq(a.ln1, b.ln1) || !ln_eq(a.ln2, b.ln2) || !(a.wq == b.wq) || !(a.wk == b.wk) ||
            !(a.wv == b.wv) || !(a.wo == b.wo) || !(a.ffn_w1 == b.ffn_w1) || !(a.ffn_w2 == b.ffn_w2)) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Parameter traversal

namespace {

template <typename Params, typename Fn>
void visit_impl(Params& params, const Fn& fn) {
    auto as_span = [](auto&& container) {
        return std::span<double>(const_cast<double*>(container.data()), container.size());
    };
    for (std::size_t l = 0; l < params.sites.size(); ++l) {
        for (auto& sp : params.sites[l]) {
            const std::string prefix = "layer" + std::to_string(l) + "." + std::string(to_string(sp.site)) + ".";
            auto& es = sp.experts;
            fn(TensorRef{prefix + "a", TensorKind::A, l, sp.site, 0, es.a.rows(), es.a.cols(),
                         as_span(es.a.data())});
            for (std::size_t i = 0; i < es.b.size(); ++i) {
                fn(TensorRef{prefix + "b" + std::to_string(i), TensorKind::B, l, sp.site, i,
                             es.b[i].rows(), es.b[i].cols(), as_span(es.b[i].data())});
            }
            auto& r = sp.router;
            fn(TensorRef{prefix + "router.w1", TensorKind::RouterW1, l, sp.site, 0, r.w1.rows(),
                         r.w1.cols(), as_span(r.w1.data())});
            fn(TensorRef{prefix + "router.b1", TensorKind::RouterB1, l, sp.site, 0, 1, r.b1.size(),
                         as_span(r.b1)});
            fn(TensorRef{prefix + "router.w2", TensorKind::RouterW2, l, sp.site, 0, r.w2.rows(),
                         r.w2.cols(), as_span(r.w2.data())});
            fn(TensorRef{prefix + "router.b2", TensorKind::RouterB2, l, sp.site, 0, 1, r.b2.size(),
                         as_span(r.b2)});
        }
    }
    for (std::size_t t = 0; t < params.heads.size(); ++t) {
        auto& h = params.heads[t];
        const std::string prefix = "head" + std::to_string(t) + ".";
        fn(TensorRef{prefix + "w", TensorKind::HeadW, 0, Site::Attn, t, h.w.rows(), h.w.cols(),
                     as_span(h.w.data())});
        fn(TensorRef{prefix + "b", TensorKind::HeadB, 0, Site::Attn, t, 1, h.b.size(), as_span(h.b)});
    }
}

}  // namespace

void visit_tensors(TrainableParams& params, const std::function<void(const TensorRef&)>& fn) {
    visit_impl(params, fn);
}

void visit_tensors(const TrainableParams& params, const std::function<void(const TensorRef&)>& fn) {
    visit_impl(params, fn);
}

Model Model::create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.seed = seed;
    const numkit::Rng root(seed);
    numkit::Rng base_rng = root.derive(1);
    numkit::Rng adapter_rng = root.derive(2);
    numkit::Rng head_rng = root.derive(3);
    numkit::Rng router_rng = root.derive(4);
    const double router_std = cfg.router_init / std::sqrt(static_cast<double>(cfg.router_width()));

    const std::size_t d = cfg.d;
    const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_ffn = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim()));
    auto unit_ln = [d] { return LayerNormParams{Vector(d, 1.0), Vector(d, 0.0)}; };

    m.base.embed = numkit::random_normal(d, d, s_d, base_rng);
    m.base.pos = numkit::random_normal(cfg.seq_len, d, 0.1, base_rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        BlockWeights b;
        b.ln1 = unit_ln();
        b.ln2 = unit_ln();
        b.wq = numkit::random_normal(d, d, s_d, base_rng);
        b.wk = numkit::random_normal(d, d, s_d, base_rng);
        b.wv = numkit::random_normal(d, d, s_d, base_rng);
        b.wo = numkit::random_normal(d, d, s_d, base_rng);
        b.ffn_w1 = numkit::random_normal(d, cfg.ffn_dim(), s_d, base_rng);
        b.ffn_w2 = numkit::random_normal(cfg.ffn_dim(), d, s_ffn, base_rng);
        m.base.blocks.push_back(std::move(b));
    }
    m.base.ln_final = unit_ln();

    m.params.sites.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (Site site : sites_for(cfg.attach_mode)) {
            SiteParams sp{site,
                          adapters::make_expert_set(d, cfg.rank, cfg.n_tasks, cfg.scale, adapter_rng),
                          routing::make_router(d, cfg.router_width(), cfg.n_tasks, cfg.groups,
                                               adapter_rng, &router_rng, router_std)};
            m.params.sites[l].push_back(std::move(sp));
        }
    }
    Head head{numkit::random_normal(d, cfg.classes, s_d, head_rng), Vector(cfg.classes, 0.0)};
    m.params.heads.assign(cfg.n_tasks, head);
    return m;
}

bool Model::trainable(TensorKind kind) const noexcept {
    switch (kind) {
        case TensorKind::A: return cfg.train_a;
        case TensorKind::B: return true;
        case TensorKind::RouterW1:
        case TensorKind::RouterB1:
        case TensorKind::RouterW2:
        case TensorKind::RouterB2: return cfg.train_router && routing == RoutingMode::Learned;
        case TensorKind::HeadW:
        case TensorKind::HeadB: return cfg.train_heads;
    }
    return false;
}

GradBundle GradBundle::zeros_like(const Model& model) {
    GradBundle g;
    g.grads = model.params;
    visit_tensors(g.grads, [](const TensorRef& t) { std::fill(t.data.begin(), t.data.end(), 0.0); });
    return g;
}

void GradBundle::clear() {
    visit_tensors(grads, [](const TensorRef& t) { std::fill(t.data.begin(), t.data.end(), 0.0); });
}

GradBundle& GradBundle::operator+=(const GradBundle& other) {
    std::vector<std::span<const double>> src;
    visit_tensors(other.grads, [&](const TensorRef& t) { src.push_back(t.data); });
    std::size_t idx = 0;
    visit_tensors(grads, [&](const TensorRef& t) {
        if (idx >= src.size() || src[idx].size() != t.data.size()) {
            throw ShapeError("GradBundle: layout mismatch");
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += src[idx][i];
        ++idx;
    });
    return *this;
}

void GradBundle::scale(double s) {
    visit_tensors(grads, [s](const TensorRef& t) {
        for (double& v : t.data) v *= s;
    });
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) {
    const double inner = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_grad(double x) {
    const double inner = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(inner);
    const double d_inner = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
}

Matrix layernorm_rows(const Matrix& x, const LayerNormParams& p, double eps, RowNormCache* cache) {
    const std::size_t n = x.cols();
    Matrix out(x.rows(), n);
    if (cache) {
        cache->xhat = Matrix(x.rows(), n);
        cache->rstd.assign(x.rows(), 0.0);
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto xr = x.row(r);
        double mean = 0.0;
        for (double v : xr) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : xr) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + eps);
        auto orow = out.row(r);
        for (std::size_t c = 0; c < n; ++c) {
            const double xh = (xr[c] - mean) * rstd;
            orow[c] = xh * p.gamma[c] + p.beta[c];
            if (cache) cache->xhat(r, c) = xh;
        }
        if (cache) cache->rstd[r] = rstd;
    }
    return out;
}

void layernorm_row_backward(std::span<const double> dy, std::span<const double> gamma,
                            std::span<const double> xhat, double rstd, std::span<double> dx_out) {
    const std::size_t n = dy.size();
    double mean_dxh = 0.0;
    double mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        const double dxh = dy[c] * gamma[c];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xhat[c];
    }
    mean_dxh /= static_cast<double>(n);
    mean_dxh_xh /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) {
        const double dxh = dy[c] * gamma[c];
        dx_out[c] += rstd * (dxh - mean_dxh - xhat[c] * mean_dxh_xh);
    }
}

Matrix layernorm_rows_backward(const Matrix& dy, const LayerNormParams& p, const RowNormCache& c) {
    Matrix dx(dy.rows(), dy.cols());
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        layernorm_row_backward(dy.row(r), p.gamma, c.xhat.row(r), c.rstd[r], dx.row(r));
    }
    return dx;
}

routing::RoutingWeights site_weights(const Model& m, const SiteParams& sp, const Matrix& z,
                                     std::size_t task, routing::RouterTrace* rtrace) {
    const std::size_t n = m.cfg.n_tasks;
    const std::size_t g = m.cfg.groups;
    switch (m.routing) {
        case RoutingMode::Uniform: return routing::RoutingWeights::uniform(n, g);
        case RoutingMode::TaskOracle: return routing::RoutingWeights::one_hot(n, g, task);
        case RoutingMode::Learned: break;
    }
    routing::RouterTrace t = routing::route_traced(sp.router, z);
    routing::RoutingWeights w = t.weights;
    if (rtrace) *rtrace = std::move(t);
    return w;
}

/// Adds the site's routed update on z to `target` (tokens × d).
void apply_site(const Model& m, const SiteParams& sp, const Matrix& z, std::size_t task,
                Matrix& target, SiteTrace* st) {
    routing::RouterTrace rt;
    routing::RoutingWeights pi = site_weights(m, sp, z, task, st ? &rt : nullptr);
    adapters::SequenceTrace at;
    target += adapters::apply_sequence(sp.experts, pi, z, st ? &at : nullptr);
    if (st) {
        st->input = z;
        st->router = std::move(rt);
        st->pi = std::move(pi);
        st->adapter = std::move(at);
    }
}

std::ptrdiff_t site_index(const std::vector<SiteParams>& sites, Site s) {
    for (std::size_t i = 0; i < sites.size(); ++i)
        if (sites[i].site == s) return static_cast<std::ptrdiff_t>(i);
    return -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward

Vector forward(const Model& model, const Matrix& tokens, std::size_t task, ForwardTrace* trace) {
    const ModelConfig& cfg = model.cfg;
    const std::size_t d = cfg.d;
    const std::size_t T = tokens.rows();
    if (task >= cfg.n_tasks) {
        throw DomainError("forward: task id " + std::to_string(task) + " outside [0, " +
                          std::to_string(cfg.n_tasks) + ")");
    }
    if (tokens.cols() != d || T == 0 || T > cfg.seq_len) {
        throw ShapeError("forward: token matrix must be (1..seq_len) x d");
    }
    if (trace) {
        *trace = ForwardTrace{};
        trace->task = task;
        trace->layers.resize(cfg.layers);
    }

    Matrix x = numkit::matmul(tokens, model.base.embed);
    for (std::size_t t = 0; t < T; ++t) {
        auto xr = x.row(t);
        const auto pr = model.base.pos.row(t);
        for (std::size_t c = 0; c < d; ++c) xr[c] += pr[c];
    }

    const std::size_t H = cfg.heads;
    const std::size_t dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const BlockWeights& bw = model.base.blocks[l];
        const auto& sites = model.params.sites[l];
        LayerTrace* lt = trace ? &trace->layers[l] : nullptr;
        if (lt) lt->sites.resize(sites.size());

        RowNormCache ln1;
        Matrix z1 = layernorm_rows(x, bw.ln1, cfg.ln_eps, lt ? &ln1 : nullptr);
        Matrix q = numkit::matmul(z1, bw.wq);
        Matrix k = numkit::matmul(z1, bw.wk);
        Matrix v = numkit::matmul(z1, bw.wv);
        for (std::size_t s = 0; s < sites.size(); ++s) {
            SiteTrace* st = lt ? &lt->sites[s] : nullptr;
            if (sites[s].site == Site::Query) apply_site(model, sites[s], z1, task, q, st);
            if (sites[s].site == Site::Value) apply_site(model, sites[s], z1, task, v, st);
        }

        Matrix concat(T, d);
        std::vector<Matrix> probs;
        probs.reserve(H);
        for (std::size_t h = 0; h < H; ++h) {
            Matrix p(T, T);
            for (std::size_t i = 0; i < T; ++i) {
                const double* qi = q.row(i).data() + h * dh;
                auto prow = p.row(i);
                for (std::size_t j = 0; j < T; ++j) {
                    const double* kj = k.row(j).data() + h * dh;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    prow[j] = acc * inv_sqrt;
                }
                numkit::softmax_inplace(prow);
                double* oi = concat.row(i).data() + h * dh;
                for (std::size_t j = 0; j < T; ++j) {
                    const double pij = prow[j];
                    const double* vj = v.row(j).data() + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
                }
            }
            probs.push_back(std::move(p));
        }
        Matrix h_mid = x;
        h_mid += numkit::matmul(concat, bw.wo);
        for (std::size_t s = 0; s < sites.size(); ++s) {
            if (sites[s].site == Site::Attn) {
                apply_site(model, sites[s], z1, task, h_mid, lt ? &lt->sites[s] : nullptr);
            }
        }

        RowNormCache ln2;
        Matrix z2 = layernorm_rows(h_mid, bw.ln2, cfg.ln_eps, lt ? &ln2 : nullptr);
        Matrix pre = numkit::matmul(z2, bw.ffn_w1);
        Matrix act(pre.rows(), pre.cols());
        for (std::size_t i = 0; i < pre.size(); ++i) act.data()[i] = gelu(pre.data()[i]);
        Matrix out = std::move(h_mid);
        out += numkit::matmul(act, bw.ffn_w2);
        for (std::size_t s = 0; s < sites.size(); ++s) {
            if (sites[s].site == Site::Ffn) {
                apply_site(model, sites[s], z2, task, out, lt ? &lt->sites[s] : nullptr);
            }
        }

        if (lt) {
            lt->ln1 = std::move(ln1);
            lt->ln2 = std::move(ln2);
            lt->z1 = std::move(z1);
            lt->q = std::move(q);
            lt->k = std::move(k);
            lt->v = std::move(v);
            lt->probs = std::move(probs);
            lt->attn_concat = std::move(concat);
            lt->z2 = std::move(z2);
            lt->ffn_pre = std::move(pre);
            lt->ffn_act = std::move(act);
        }
        x = std::move(out);
    }

    Vector pooled(d, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const auto xr = x.row(t);
        for (std::size_t c = 0; c < d; ++c) pooled[c] += xr[c];
    }
    for (double& v : pooled) v /= static_cast<double>(T);

    RowNormCache fcache;
    Matrix feat_m = layernorm_rows(Matrix(1, d, pooled), model.base.ln_final, cfg.ln_eps, &fcache);
    Vector feat(feat_m.data().begin(), feat_m.data().end());
    const Head& head = model.params.heads[task];
    Vector logits = numkit::vecmat(feat, head.w);
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += head.b[c];

    if (trace) {
        trace->pooled = std::move(pooled);
        trace->feat = std::move(feat);
        trace->final_rstd = fcache.rstd[0];
        trace->final_xhat.assign(fcache.xhat.data().begin(), fcache.xhat.data().end());
        trace->logits = logits;
        trace->valid = true;
    }
    return logits;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

/// Backward through one adapted site given dL/dΔ; returns dL/dz.
Matrix site_backward(const Model& model, const SiteParams& sp, const SiteTrace& st,
                     const Matrix& d_delta, SiteParams& g, const Matrix* extra_d_pi) {
    adapters::ExpertGrads eg{std::move(g.experts.a), std::move(g.experts.b)};
    Matrix d_pi;
    Matrix dz = adapters::backward_sequence(sp.experts, st.pi, st.input, st.adapter, d_delta, eg,
                                            model.trainable(TensorKind::A), d_pi);
    g.experts.a = std::move(eg.a);
    g.experts.b = std::move(eg.b);
    if (model.routing == RoutingMode::Learned) {
        if (extra_d_pi) d_pi += *extra_d_pi;
        routing::RouterGrads rg = std::move(g.router);
        const Vector d_pooled = routing::router_backward(sp.router, st.router, d_pi, rg);
        g.router = std::move(rg);
        if (!model.trainable(TensorKind::RouterW1)) {
            g.router.w1.fill(0.0);
            g.router.w2.fill(0.0);
            std::fill(g.router.b1.begin(), g.router.b1.end(), 0.0);
            std::fill(g.router.b2.begin(), g.router.b2.end(), 0.0);
        }
        const double inv = 1.0 / static_cast<double>(dz.rows());
        for (std::size_t t = 0; t < dz.rows(); ++t) {
            auto row = dz.row(t);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += d_pooled[c] * inv;
        }
    }
    return dz;
}

}  // namespace

void backward(const Model& model, const ForwardTrace& trace, std::span<const double> d_logits,
              GradBundle& grads, const RoutingSeed* routing_seed) {
    if (!trace.valid) throw StateError("backward: no forward trace");
    const ModelConfig& cfg = model.cfg;
    if (d_logits.size() != cfg.classes) throw ShapeError("backward: d_logits length != classes");
    if (trace.layers.size() != cfg.layers) throw StateError("backward: trace/model layer mismatch");
    const std::size_t d = cfg.d;
    const std::size_t task = trace.task;
    const Head& head = model.params.heads[task];

    if (model.trainable(TensorKind::HeadW)) {
        Head& gh = grads.grads.heads[task];
        for (std::size_t c = 0; c < d; ++c) {
            auto row = gh.w.row(c);
            for (std::size_t k = 0; k < cfg.classes; ++k) row[k] += trace.feat[c] * d_logits[k];
        }
        for (std::size_t k = 0; k < cfg.classes; ++k) gh.b[k] += d_logits[k];
    }
    Vector d_feat = numkit::matvec(head.w, d_logits);
    Vector d_pooled(d, 0.0);
    layernorm_row_backward(d_feat, model.base.ln_final.gamma, trace.final_xhat, trace.final_rstd,
                           d_pooled);

    const std::size_t T = trace.layers.front().z1.rows();
    Matrix dx(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        auto row = dx.row(t);
        for (std::size_t c = 0; c < d; ++c) row[c] = d_pooled[c] / static_cast<double>(T);
    }

    const std::size_t H = cfg.heads;
    const std::size_t dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const BlockWeights& bw = model.base.blocks[li];
        const LayerTrace& lt = trace.layers[li];
        const auto& sites = model.params.sites[li];
        auto& gsites = grads.grads.sites[li];
        auto seed_for = [&](std::size_t s) -> const Matrix* {
            if (!routing_seed) return nullptr;
            return &(*routing_seed)[li][s];
        };

        const bool need_below = li > 0;
        const std::ptrdiff_t s_attn = site_index(sites, Site::Attn);
        const std::ptrdiff_t s_ffn = site_index(sites, Site::Ffn);
        const std::ptrdiff_t s_q = site_index(sites, Site::Query);
        const std::ptrdiff_t s_v = site_index(sites, Site::Value);
        const bool attn_stage_sites = s_attn >= 0 || s_q >= 0 || s_v >= 0;

        // y = h + FFN(LN₂(h)) + Δ_ffn(LN₂(h))
        const Matrix& d_out = dx;
        Matrix dz2(T, d);
        if (s_ffn >= 0) {
            const auto s = static_cast<std::size_t>(s_ffn);
            dz2 += site_backward(model, sites[s], lt.sites[s], d_out, gsites[s], seed_for(s));
        }
        if (!need_below && !attn_stage_sites) continue;

        Matrix d_act = numkit::matmul_nt(d_out, bw.ffn_w2);
        for (std::size_t i = 0; i < d_act.size(); ++i) d_act.data()[i] *= gelu_grad(lt.ffn_pre.data()[i]);
        dz2 += numkit::matmul_nt(d_act, bw.ffn_w1);
        Matrix d_mid = d_out;
        d_mid += layernorm_rows_backward(dz2, bw.ln2, lt.ln2);

        // h = x + Attn(LN₁(x)) + Δ_attn(LN₁(x))
        Matrix dz1(T, d);
        if (s_attn >= 0) {
            const auto s = static_cast<std::size_t>(s_attn);
            dz1 += site_backward(model, sites[s], lt.sites[s], d_mid, gsites[s], seed_for(s));
        }
        const bool need_attention = need_below || s_q >= 0 || s_v >= 0;
        if (need_attention) {
            const Matrix d_concat = numkit::matmul_nt(d_mid, bw.wo);
            Matrix dq(T, d), dk(T, d), dv(T, d);
            Vector dp(T);
            for (std::size_t h = 0; h < H; ++h) {
                const Matrix& p = lt.probs[h];
                for (std::size_t i = 0; i < T; ++i) {
                    const double* doi = d_concat.row(i).data() + h * dh;
                    const auto prow = p.row(i);
                    double inner = 0.0;
                    for (std::size_t j = 0; j < T; ++j) {
                        const double* vj = lt.v.row(j).data() + h * dh;
                        double* dvj = dv.row(j).data() + h * dh;
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            acc += doi[c] * vj[c];
                            dvj[c] += prow[j] * doi[c];
                        }
                        dp[j] = acc;
                        inner += prow[j] * acc;
                    }
                    const double* qi = lt.q.row(i).data() + h * dh;
                    double* dqi = dq.row(i).data() + h * dh;
                    for (std::size_t j = 0; j < T; ++j) {
                        const double ds = prow[j] * (dp[j] - inner) * inv_sqrt;
                        if (ds == 0.0) continue;
                        const double* kj = lt.k.row(j).data() + h * dh;
                        double* dkj = dk.row(j).data() + h * dh;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
            if (s_q >= 0) {
                const auto s = static_cast<std::size_t>(s_q);
                dz1 += site_backward(model, sites[s], lt.sites[s], dq, gsites[s], seed_for(s));
            }
            if (s_v >= 0) {
                const auto s = static_cast<std::size_t>(s_v);
                dz1 += site_backward(model, sites[s], lt.sites[s], dv, gsites[s], seed_for(s));
            }
            if (need_below) {
                dz1 += numkit::matmul_nt(dq, bw.wq);
                dz1 += numkit::matmul_nt(dk, bw.wk);
                dz1 += numkit::matmul_nt(dv, bw.wv);
            }
        }
        if (need_below) {
            dx = std::move(d_mid);
            dx += layernorm_rows_backward(dz1, bw.ln1, lt.ln1);
        }
    }
}

GradBundle backward(const Model& model, const ForwardTrace& trace, std::span<const double> d_logits) {
    GradBundle g = GradBundle::zeros_like(model);
    backward(model, trace, d_logits, g);
    return g;
}

CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) throw DomainError("cross_entropy: label out of range");
    CrossEntropy out;
    out.d_logits = numkit::softmax(logits);
    out.loss = -std::log(std::max(out.d_logits[label], 1e-300));
    out.d_logits[label] -= 1.0;
    return out;
}

// ---------------------------------------------------------------------------

SoftmaxJacobian softmax_jacobian(std::span<const double> s) {
    double sum = 0.0;
    for (double v : s) {
        if (!(v >= -1e-9)) throw DomainError("softmax_jacobian: negative probability");
        sum += v;
    }
    if (s.empty() || std::abs(sum - 1.0) > 1e-9) throw DomainError("softmax_jacobian: off simplex");
    SoftmaxJacobian out{Vector(s.begin(), s.end()), Matrix(s.size(), s.size())};
    for (std::size_t a = 0; a < s.size(); ++a)
        for (std::size_t b = 0; b < s.size(); ++b) out.j(a, b) = s[a] * ((a == b ? 1.0 : 0.0) - s[b]);
    return out;
}

IsolationProbe attention_isolation_probe(const Model& model, const Matrix& tokens, std::size_t task,
                                         const std::function<void(TrainableParams&)>& perturb) {
    ForwardTrace before;
    forward(model, tokens, task, &before);
    Model perturbed = model;
    perturb(perturbed.params);
    ForwardTrace after;
    forward(perturbed, tokens, task, &after);

    IsolationProbe probe;
    for (std::size_t l = 0; l < model.cfg.layers; ++l) {
        double worst = 0.0;
        bool identical = true;
        for (std::size_t h = 0; h < model.cfg.heads; ++h) {
            const Matrix& a = before.layers[l].probs[h];
            const Matrix& b = after.layers[l].probs[h];
            identical = identical && a == b;
            for (std::size_t i = 0; i < a.size(); ++i) {
                worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
            }
        }
        probe.max_abs_delta.push_back(worst);
        probe.bit_identical.push_back(identical);
    }
    return probe;
}

}  // namespace mtlora::model
