// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtlora/errors.hpp"
#include "mtlora/model.hpp"
#include "support.hpp"

using namespace mtlora;
using namespace mtlora::model;
using adapters::AttachMode;
using numkit::Matrix;
using numkit::Rng;
using numkit::Vector;

namespace {

ModelConfig micro_config(AttachMode mode) {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.seq_len = 4;
    cfg.n_tasks = 3;
    cfg.classes = 3;
    cfg.rank = 2;
    cfg.groups = 2;
    cfg.attach_mode = mode;
    cfg.scale = 0.7;
    return cfg;
}

// Every trainable tensor gets generic values so no gradient path is
// trivially zero.
void randomize_params(Model& m, Rng& rng, double stddev = 0.5) {
    visit_tensors(m.params, [&](const TensorRef& t) {
        for (double& v : t.data) v = stddev * rng.normal();
    });
}

Matrix random_tokens(const ModelConfig& cfg, Rng& rng, std::size_t len = 0) {
    return numkit::random_normal(len ? len : cfg.seq_len, cfg.d, 1.0, rng);
}

Vector flatten(const TrainableParams& p) {
    Vector out;
    visit_tensors(p, [&](const TensorRef& t) { out.insert(out.end(), t.data.begin(), t.data.end()); });
    return out;
}

void unflatten(TrainableParams& p, std::span<const double> flat) {
    std::size_t off = 0;
    visit_tensors(p, [&](const TensorRef& t) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.data.size(), t.data.begin());
        off += t.data.size();
    });
}

struct Sample {
    Matrix tokens;
    std::size_t task;
    std::size_t label;
};

double batch_loss(const Model& m, const std::vector<Sample>& batch) {
    double total = 0.0;
    for (const Sample& s : batch) total += cross_entropy(forward(m, s.tokens, s.task), s.label).loss;
    return total;
}

// --- Straight-line reference forward --------------------------------------
// Written from the model definition with plain loops and no shared kernels.

using Rows = std::vector<Vector>;

Vector ref_vecmat(const Vector& x, const Matrix& w) {
    Vector out(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j)
        for (std::size_t i = 0; i < w.rows(); ++i) out[j] += x[i] * w(i, j);
    return out;
}

Vector ref_ln(const Vector& x, const LayerNormParams& p, double eps) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * p.gamma[i] + p.beta[i];
    return out;
}

double ref_gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

// Routed adapter update for each row of z.
Rows ref_site(const Model& m, const SiteParams& sp, const Rows& z) {
    const std::size_t d = m.cfg.d, n = m.cfg.n_tasks, g = m.cfg.groups, r = m.cfg.rank;
    Vector pooled(d, 0.0);
    for (const Vector& row : z)
        for (std::size_t c = 0; c < d; ++c) pooled[c] += row[c] / static_cast<double>(z.size());
    Vector hid = ref_vecmat(pooled, sp.router.w1);
    for (std::size_t k = 0; k < hid.size(); ++k) hid[k] = std::max(0.0, hid[k] + sp.router.b1[k]);
    Vector logits = ref_vecmat(hid, sp.router.w2);
    for (std::size_t k = 0; k < logits.size(); ++k) logits[k] += sp.router.b2[k];
    Matrix pi(n, g);
    for (std::size_t j = 0; j < g; ++j) {
        double mx = -1e300;
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i * g + j]);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits[i * g + j] - mx);
        for (std::size_t i = 0; i < n; ++i) pi(i, j) = std::exp(logits[i * g + j] - mx) / sum;
    }
    Rows out(z.size(), Vector(d, 0.0));
    for (std::size_t t = 0; t < z.size(); ++t) {
        Vector az(r, 0.0);
        for (std::size_t a = 0; a < r; ++a)
            for (std::size_t c = 0; c < d; ++c) az[a] += sp.experts.a(a, c) * z[t][c];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) {
                double bz = 0.0;
                for (std::size_t a = 0; a < r; ++a) bz += sp.experts.b[i](c, a) * az[a];
                out[t][c] += pi(i, c / (d / g)) * sp.experts.scale * bz;
            }
    }
    return out;
}

void add_site(const Model& m, std::size_t layer, Site which, const Rows& z, Rows& target) {
    for (const SiteParams& sp : m.params.sites[layer]) {
        if (sp.site != which) continue;
        const Rows delta = ref_site(m, sp, z);
        for (std::size_t t = 0; t < target.size(); ++t)
            for (std::size_t c = 0; c < target[t].size(); ++c) target[t][c] += delta[t][c];
    }
}

Vector ref_forward(const Model& m, const Matrix& tokens, std::size_t task) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t d = cfg.d, T = tokens.rows(), H = cfg.heads, dh = d / H;
    Rows x(T);
    for (std::size_t t = 0; t < T; ++t) {
        Vector row(d);
        for (std::size_t c = 0; c < d; ++c) row[c] = tokens(t, c);
        x[t] = ref_vecmat(row, m.base.embed);
        for (std::size_t c = 0; c < d; ++c) x[t][c] += m.base.pos(t, c);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const BlockWeights& bw = m.base.blocks[l];
        Rows z(T), q(T), k(T), v(T);
        for (std::size_t t = 0; t < T; ++t) {
            z[t] = ref_ln(x[t], bw.ln1, cfg.ln_eps);
            q[t] = ref_vecmat(z[t], bw.wq);
            k[t] = ref_vecmat(z[t], bw.wk);
            v[t] = ref_vecmat(z[t], bw.wv);
        }
        add_site(m, l, Site::Query, z, q);
        add_site(m, l, Site::Value, z, v);
        Rows attn(T, Vector(d, 0.0));
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < T; ++i) {
                Vector s(T);
                double mx = -1e300;
                for (std::size_t j = 0; j < T; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += q[i][c] * k[j][c];
                    s[j] = acc / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double sum = 0.0;
                for (double& e : s) sum += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < T; ++j)
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) attn[i][c] += s[j] / sum * v[j][c];
            }
        Rows mid = x;
        for (std::size_t t = 0; t < T; ++t) {
            const Vector o = ref_vecmat(attn[t], bw.wo);
            for (std::size_t c = 0; c < d; ++c) mid[t][c] += o[c];
        }
        add_site(m, l, Site::Attn, z, mid);
        Rows z2(T);
        Rows out = mid;
        for (std::size_t t = 0; t < T; ++t) {
            z2[t] = ref_ln(mid[t], bw.ln2, cfg.ln_eps);
            Vector pre = ref_vecmat(z2[t], bw.ffn_w1);
            for (double& p : pre) p = ref_gelu(p);
            const Vector f = ref_vecmat(pre, bw.ffn_w2);
            for (std::size_t c = 0; c < d; ++c) out[t][c] += f[c];
        }
        add_site(m, l, Site::Ffn, z2, out);
        x = out;
    }
    Vector pooled(d, 0.0);
    for (const Vector& row : x)
        for (std::size_t c = 0; c < d; ++c) pooled[c] += row[c] / static_cast<double>(T);
    const Vector feat = ref_ln(pooled, m.base.ln_final, cfg.ln_eps);
    Vector logits = ref_vecmat(feat, m.params.heads[task].w);
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += m.params.heads[task].b[c];
    return logits;
}

const AttachMode kModes[] = {AttachMode::BlockAttn, AttachMode::BlockFfn, AttachMode::BlockBoth,
                             AttachMode::ComponentQV};

}  // namespace

TEST(Forward, MatchesStraightLineReference) {
    for (AttachMode mode : kModes) {
        ModelConfig cfg = micro_config(mode);
        cfg.d = 4;
        cfg.seq_len = 2;
        cfg.n_tasks = 2;
        cfg.groups = 2;
        Model m = Model::create(cfg, 7);
        Rng rng(3);
        randomize_params(m, rng);
        for (auto& blk : m.base.blocks)
            for (double& gmm : blk.ln1.gamma) gmm = 1.0 + 0.3 * rng.normal();
        for (std::size_t task = 0; task < 2; ++task) {
            const Matrix tokens = random_tokens(cfg, rng);
            const Vector got = forward(m, tokens, task);
            const Vector want = ref_forward(m, tokens, task);
            ASSERT_EQ(got.size(), want.size());
            for (std::size_t c = 0; c < got.size(); ++c) EXPECT_NEAR(got[c], want[c], 1e-12) << to_string(mode);
        }
    }
}

TEST(Forward, ZeroAdaptersMatchFrozenBase) {
    Rng rng(5);
    const Matrix tokens = random_tokens(micro_config(AttachMode::BlockAttn), rng);
    Vector reference;
    for (AttachMode mode : kModes) {
        Model m = Model::create(micro_config(mode), 11);
        for (auto& layer : m.params.sites)
            for (auto& sp : layer)
                for (Matrix& b : sp.experts.b) b.fill(0.0);
        const Vector logits = forward(m, tokens, 1);
        if (reference.empty()) reference = logits;
        EXPECT_EQ(logits, reference) << to_string(mode);
    }
}

TEST(Forward, BothWithZeroFfnEqualsAttnOnly) {
    Rng rng(9);
    Model both = Model::create(micro_config(AttachMode::BlockBoth), 13);
    randomize_params(both, rng);
    Model attn = Model::create(micro_config(AttachMode::BlockAttn), 13);
    attn.base = both.base;
    attn.params.heads = both.params.heads;
    for (std::size_t l = 0; l < both.params.sites.size(); ++l) {
        for (SiteParams& sp : both.params.sites[l]) {
            if (sp.site == Site::Ffn) {
                for (Matrix& b : sp.experts.b) b.fill(0.0);
            } else {
                attn.params.sites[l][0] = sp;
            }
        }
    }
    const Matrix tokens = random_tokens(both.cfg, rng);
    EXPECT_EQ(forward(both, tokens, 2), forward(attn, tokens, 2));
}

TEST(Forward, UnknownTaskThrows) {
    Model m = Model::create(micro_config(AttachMode::BlockBoth), 1);
    Rng rng(1);
    EXPECT_THROW(forward(m, random_tokens(m.cfg, rng), 3), DomainError);
}

TEST(Forward, Deterministic) {
    const Model a = Model::create(micro_config(AttachMode::ComponentQV), 21);
    const Model b = Model::create(micro_config(AttachMode::ComponentQV), 21);
    EXPECT_TRUE(a.base == b.base);
    EXPECT_EQ(flatten(a.params), flatten(b.params));
    Rng rng(2);
    const Matrix tokens = random_tokens(a.cfg, rng);
    EXPECT_EQ(forward(a, tokens, 0), forward(b, tokens, 0));
}

TEST(Backward, ZeroSeedGivesZeroBundle) {
    Model m = Model::create(micro_config(AttachMode::BlockBoth), 3);
    Rng rng(4);
    randomize_params(m, rng);
    ForwardTrace trace;
    forward(m, random_tokens(m.cfg, rng), 0, &trace);
    const Vector zero(m.cfg.classes, 0.0);
    const GradBundle g = backward(m, trace, zero);
    for (double v : flatten(g.grads)) EXPECT_EQ(v, 0.0);
}

TEST(Backward, MissingTraceThrows) {
    Model m = Model::create(micro_config(AttachMode::BlockBoth), 3);
    const ForwardTrace empty;
    const Vector seed(m.cfg.classes, 1.0);
    EXPECT_THROW(backward(m, empty, seed), StateError);
}

TEST(Backward, FfnModeHasNoAttentionSites) {
    Model m = Model::create(micro_config(AttachMode::BlockFfn), 3);
    const GradBundle g = GradBundle::zeros_like(m);
    for (const auto& layer : g.grads.sites) {
        ASSERT_EQ(layer.size(), 1u);
        EXPECT_EQ(layer[0].site, Site::Ffn);
    }
    EXPECT_EQ(sites_for(AttachMode::ComponentQV), (std::vector<Site>{Site::Query, Site::Value}));
    EXPECT_EQ(sites_for(AttachMode::BlockBoth), (std::vector<Site>{Site::Attn, Site::Ffn}));
}

class BackwardFd : public ::testing::TestWithParam<AttachMode> {};

TEST_P(BackwardFd, EveryTensorMatchesFiniteDifferences) {
    Model m = Model::create(micro_config(GetParam()), 17);
    Rng rng(19);
    randomize_params(m, rng);
    std::vector<Sample> batch;
    for (std::size_t i = 0; i < 3; ++i) batch.push_back({random_tokens(m.cfg, rng), i % 3, (i + 1) % 3});

    GradBundle g = GradBundle::zeros_like(m);
    for (const Sample& s : batch) {
        ForwardTrace trace;
        const Vector logits = forward(m, s.tokens, s.task, &trace);
        backward(m, trace, cross_entropy(logits, s.label).d_logits, g);
    }
    const Vector analytic = flatten(g.grads);
    const Vector p0 = flatten(m.params);
    Model probe = m;
    const Vector fd = numkit::finite_diff_grad(
        [&](std::span<const double> p) {
            unflatten(probe.params, p);
            return batch_loss(probe, batch);
        },
        p0, 1e-5);
    EXPECT_LE(ts::rel_error(analytic, fd), 1e-4);
    EXPECT_GT(ts::fro(Matrix(1, analytic.size(), analytic)), 0.0);
}

INSTANTIATE_TEST_SUITE_P(AllModes, BackwardFd, ::testing::ValuesIn(kModes),
                         [](const auto& info) {
                             std::string s(to_string(info.param));
                             std::replace(s.begin(), s.end(), '-', '_');
                             return s;
                         });

TEST(Backward, FrozenTensorsEmitNothing) {
    ModelConfig cfg = micro_config(AttachMode::BlockBoth);
    cfg.train_a = false;
    cfg.train_heads = false;
    Model m = Model::create(cfg, 3);
    Rng rng(6);
    randomize_params(m, rng);
    ForwardTrace trace;
    const Vector logits = forward(m, random_tokens(cfg, rng), 1, &trace);
    const GradBundle g = backward(m, trace, cross_entropy(logits, 0).d_logits);
    visit_tensors(g.grads, [&](const TensorRef& t) {
        if (t.kind == TensorKind::A || t.kind == TensorKind::HeadW || t.kind == TensorKind::HeadB) {
            for (double v : t.data) EXPECT_EQ(v, 0.0) << t.name;
        }
    });
}

TEST(CrossEntropy, UniformLogits) {
    const Vector logits{0.0, 0.0, 0.0, 0.0};
    const CrossEntropy ce = cross_entropy(logits, 2);
    EXPECT_NEAR(ce.loss, std::log(4.0), 1e-15);
    EXPECT_NEAR(ce.d_logits[2], -0.75, 1e-15);
    EXPECT_NEAR(ce.d_logits[0], 0.25, 1e-15);
}

TEST(SoftmaxJacobianTest, HalfHalf) {
    const Vector s{0.5, 0.5};
    const SoftmaxJacobian j = softmax_jacobian(s);
    EXPECT_DOUBLE_EQ(j.j(0, 0), 0.25);
    EXPECT_DOUBLE_EQ(j.j(0, 1), -0.25);
    EXPECT_DOUBLE_EQ(j.j(1, 0), -0.25);
    EXPECT_DOUBLE_EQ(j.j(1, 1), 0.25);
}

TEST(SoftmaxJacobianTest, OneHotIsZero) {
    const Vector s{0.0, 1.0, 0.0};
    const SoftmaxJacobian j = softmax_jacobian(s);
    for (double v : j.j.data()) EXPECT_EQ(v, 0.0);
}

TEST(SoftmaxJacobianTest, OffSimplexThrows) {
    const Vector s{0.5, 0.6};
    EXPECT_THROW(softmax_jacobian(s), DomainError);
    const Vector neg{1.5, -0.5};
    EXPECT_THROW(softmax_jacobian(neg), DomainError);
}

TEST(SoftmaxJacobianTest, RandomRowProperties) {
    Rng rng(23);
    for (int trial = 0; trial < 500; ++trial) {
        Vector logits(2 + rng.index(7));
        for (double& v : logits) v = 2.0 * rng.normal();
        const Vector s = numkit::softmax(logits);
        const SoftmaxJacobian j = softmax_jacobian(s);
        const std::size_t n = s.size();
        for (std::size_t a = 0; a < n; ++a) {
            double row = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                row += j.j(a, b);
                EXPECT_EQ(j.j(a, b), j.j(b, a));
            }
            EXPECT_LE(std::abs(row), 1e-12);
        }
        // J = diag(s) − ssᵀ is positive semidefinite.
        const auto eig = numkit::symmetric_eigen(j.j);
        for (double ev : eig.values) EXPECT_GE(ev, -1e-12);
    }
}

TEST(SoftmaxJacobianTest, ProbabilityMassCompetition) {
    Rng rng(29);
    for (int trial = 0; trial < 200; ++trial) {
        Vector logits(3 + rng.index(5));
        for (double& v : logits) v = rng.normal();
        const Vector before = numkit::softmax(logits);
        const std::size_t bump = rng.index(logits.size());
        logits[bump] += 0.1 + rng.uniform();
        const Vector after = numkit::softmax(logits);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            if (i == bump) {
                EXPECT_GT(after[i], before[i]);
            }
            else EXPECT_LT(after[i], before[i]);
        }
    }
}

TEST(IsolationProbe, BlockLevelLeavesSameLayerAttentionBitIdentical) {
    for (AttachMode mode : {AttachMode::BlockAttn, AttachMode::BlockFfn, AttachMode::BlockBoth}) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            Model m = Model::create(micro_config(mode), seed);
            Rng rng(seed * 31);
            randomize_params(m, rng);
            const Matrix tokens = random_tokens(m.cfg, rng);
            const IsolationProbe p = attention_isolation_probe(m, tokens, 0, [&](TrainableParams& tp) {
                for (auto& sp : tp.sites[0]) sp.experts.b[1] += numkit::random_normal(8, 2, 1.0, rng);
            });
            ASSERT_EQ(p.bit_identical.size(), 2u);
            EXPECT_TRUE(p.bit_identical[0]) << to_string(mode) << " seed " << seed;
            EXPECT_EQ(p.max_abs_delta[0], 0.0);
        }
    }
}

TEST(IsolationProbe, ComponentLevelMovesSameLayerAttention) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Model m = Model::create(micro_config(AttachMode::ComponentQV), seed);
        Rng rng(seed * 37);
        randomize_params(m, rng);
        const Matrix tokens = random_tokens(m.cfg, rng);
        const IsolationProbe p = attention_isolation_probe(m, tokens, 0, [&](TrainableParams& tp) {
            for (auto& sp : tp.sites[0])
                if (sp.site == Site::Query) sp.experts.b[1] += numkit::random_normal(8, 2, 1.0, rng);
        });
        EXPECT_FALSE(p.bit_identical[0]);
        EXPECT_GT(p.max_abs_delta[0], 1e-8) << "seed " << seed;
    }
}

TEST(IsolationProbe, ZeroPerturbationIsZeroEverywhere) {
    for (AttachMode mode : kModes) {
        Model m = Model::create(micro_config(mode), 2);
        Rng rng(41);
        randomize_params(m, rng);
        const IsolationProbe p =
            attention_isolation_probe(m, random_tokens(m.cfg, rng), 1, [](TrainableParams&) {});
        for (std::size_t l = 0; l < p.bit_identical.size(); ++l) {
            EXPECT_TRUE(p.bit_identical[l]);
            EXPECT_EQ(p.max_abs_delta[l], 0.0);
        }
    }
}

TEST(ModelConfigTest, ValidateRejectsBadShapes) {
    ModelConfig cfg = micro_config(AttachMode::BlockBoth);
    cfg.heads = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = micro_config(AttachMode::BlockBoth);
    cfg.groups = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = micro_config(AttachMode::BlockBoth);
    cfg.router_init = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ModelCreate, ZeroRouterInitIsUniform) {
    ModelConfig cfg = micro_config(AttachMode::BlockBoth);
    cfg.router_init = 0.0;
    const Model m = Model::create(cfg, 5);
    for (const auto& layer : m.params.sites)
        for (const auto& sp : layer) {
            for (double v : sp.router.w2.data()) EXPECT_EQ(v, 0.0);
            for (const Matrix& b : sp.experts.b) EXPECT_EQ(ts::fro(b), 0.0);
        }
}
