// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include "mtlora/adapters.hpp"
#include "mtlora/errors.hpp"
#include "support.hpp"

using namespace mtlora;
using namespace mtlora::adapters;
using numkit::Matrix;
using numkit::Rng;
using numkit::Vector;
using routing::RoutingWeights;
using ts::naive_matmul;
using ts::naive_transpose;

namespace {

ExpertSet random_set(std::size_t d, std::size_t r, std::size_t n, Rng& rng, double scale = 1.0) {
    ExpertSet es = make_expert_set(d, r, n, scale, rng);
    for (auto& b : es.b) b = numkit::random_normal(d, r, 1.0, rng);
    return es;
}

RoutingWeights random_pi(std::size_t n, std::size_t g, Rng& rng) {
    RoutingWeights w{Matrix(n, g)};
    for (std::size_t j = 0; j < g; ++j) {
        Vector logits(n);
        for (double& v : logits) v = rng.normal();
        const Vector s = numkit::softmax(logits);
        for (std::size_t i = 0; i < n; ++i) w.pi(i, j) = s[i];
    }
    return w;
}

}  // namespace

TEST(ExpertUpdate, ZeroBGivesZero) {
    Rng rng(1);
    const ExpertSet es = make_expert_set(6, 2, 3, 1.0, rng);
    for (double v : expert_update(es, 1, Vector(6, 1.0))) EXPECT_EQ(v, 0.0);
}

TEST(ExpertUpdate, PaddedIdentityPassesBasisVector) {
    ExpertSet es;
    es.a = Matrix(2, 4);
    es.a(0, 0) = es.a(1, 1) = 1.0;
    es.b = {Matrix(4, 2)};
    es.b[0](0, 0) = es.b[0](1, 1) = 1.0;
    EXPECT_EQ(expert_update(es, 0, Vector{1, 0, 0, 0}), (Vector{1, 0, 0, 0}));
}

TEST(ExpertUpdate, HandEvaluated) {
    ExpertSet es;
    es.a = Matrix::from_rows({{1, 1}});
    es.b = {Matrix::from_rows({{2}, {3}})};
    EXPECT_EQ(expert_update(es, 0, Vector{1, 0}), (Vector{2, 3}));
}

TEST(ExpertUpdate, IndexOutOfRangeThrows) {
    Rng rng(2);
    const ExpertSet es = make_expert_set(4, 2, 2, 1.0, rng);
    EXPECT_THROW(expert_update(es, 2, Vector(4, 0.0)), IndexError);
}

TEST(ExpertSet, ValidateRejectsBadShapes) {
    Rng rng(3);
    ExpertSet es = make_expert_set(4, 2, 2, 1.0, rng);
    es.b[1] = Matrix(4, 3);
    EXPECT_THROW(es.validate(), ShapeError);
    EXPECT_THROW(make_expert_set(2, 3, 1, 1.0, rng), ConfigError);
    EXPECT_THROW(make_expert_set(4, 2, 0, 1.0, rng), ConfigError);
}

TEST(ExpertSet, InitialisationStatistics) {
    Rng rng(4);
    const ExpertSet es = make_expert_set(64, 16, 2, 1.0, rng);
    double sq = 0.0;
    for (double v : es.a.data()) sq += v * v;
    EXPECT_NEAR(sq / es.a.size(), 1.0 / 64.0, 0.15 / 64.0);
    for (const auto& b : es.b)
        for (double v : b.data()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// Composition

TEST(Compose, UniformOverIdenticalExpertsIsThatExpert) {
    Rng rng(5);
    ExpertSet es = random_set(6, 2, 3, rng);
    es.b[1] = es.b[0];
    es.b[2] = es.b[0];
    const Vector x{0.5, -1, 2, 0.1, 0.3, -0.7};
    const Vector d0 = expert_update(es, 0, x);
    const Vector got = compose(es, RoutingWeights::uniform(3, 2), x).delta;
    EXPECT_LE(ts::rel_error(got, d0), 1e-15);
}

TEST(Compose, GroupedSelectionHandEvaluated) {
    // Δ₁ = [1,1,1,1] and Δ₂ = [2,2,2,2] from rank-1 experts.
    ExpertSet es;
    es.a = Matrix::from_rows({{1, 0, 0, 0}});
    es.b = {Matrix(4, 1, 1.0), Matrix(4, 1, 2.0)};
    const RoutingWeights pi{Matrix::from_rows({{1, 0}, {0, 1}})};
    EXPECT_EQ(compose(es, pi, Vector{1, 0, 0, 0}).delta, (Vector{1, 1, 2, 2}));
}

TEST(Compose, OneHotSelectsExpert) {
    Rng rng(6);
    const ExpertSet es = random_set(8, 3, 4, rng);
    const Vector x(8, 0.25);
    EXPECT_EQ(compose(es, RoutingWeights::one_hot(4, 4, 2), x).delta, expert_update(es, 2, x));
}

TEST(Compose, GroupsMustDivideWidth) {
    Rng rng(7);
    const ExpertSet es = random_set(6, 2, 2, rng);
    EXPECT_THROW(compose(es, RoutingWeights::uniform(2, 4), Vector(6, 1.0)), ConfigError);
}

TEST(Compose, ScalarRoutingMatchesWeightedSum) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const ExpertSet es = random_set(8, 2, 3, rng);
        const RoutingWeights pi = random_pi(3, 1, rng);
        Vector x(8);
        for (double& v : x) v = rng.normal();
        Vector ref(8, 0.0);
        for (std::size_t i = 0; i < 3; ++i) {
            const Vector di = expert_update(es, i, x);
            for (std::size_t c = 0; c < 8; ++c) ref[c] += pi.pi(i, 0) * di[c];
        }
        ASSERT_LE(ts::rel_error(compose(es, pi, x).delta, ref), 1e-12);
    }
}

TEST(Compose, LinearInEachExpert) {
    Rng rng(9);
    ExpertSet es = random_set(8, 2, 2, rng);
    const RoutingWeights pi = random_pi(2, 4, rng);
    const Vector x(8, 0.5);
    const Vector base = compose(es, pi, x).delta;
    ExpertSet doubled = es;
    doubled.b[1] *= 2.0;
    ExpertSet zeroed = es;
    zeroed.b[1].fill(0.0);
    const Vector d2 = compose(doubled, pi, x).delta;
    const Vector d0 = compose(zeroed, pi, x).delta;
    // f(2B) − f(B) = f(B) − f(0).
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(d2[c] - base[c], base[c] - d0[c], 1e-12);
}

// ---------------------------------------------------------------------------
// Attachment

TEST(AttachBlock, ZeroDeltaIsPlainResidual) {
    const Vector h{0.1, 0.2, 0.3}, f{1.0, -2.0, 0.5};
    const Vector out = attach_block(h, f, {Vector(3, 0.0)});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i], h[i] + f[i]);
}

TEST(AttachBlock, ZeroBlockIsAdapterPath) {
    const Vector h{0.1, 0.2}, d{0.5, 0.7};
    const Vector out = attach_block(h, Vector(2, 0.0), {d});
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(out[i], h[i] + d[i]);
}

TEST(AttachBlock, HandSum) { EXPECT_EQ(attach_block(Vector{1, 0}, Vector{0, 1}, {Vector{1, 1}}), (Vector{2, 2})); }

TEST(AttachBlock, LengthMismatchThrows) {
    EXPECT_THROW(attach_block(Vector{1, 0}, Vector{0}, {Vector{1, 1}}), ShapeError);
}

TEST(AttachComponent, ZeroedAdapterIsPlainProjection) {
    Rng rng(10);
    const Matrix w = numkit::random_normal(4, 4, 1.0, rng);
    const ExpertSet es = make_expert_set(4, 2, 2, 1.0, rng);
    const Vector x{1, 2, 3, 4};
    EXPECT_EQ(attach_component(w, es, RoutingWeights::uniform(2, 1), x), numkit::vecmat(x, w));
}

TEST(AttachComponent, ZeroProjectionIsExpertOutput) {
    Rng rng(11);
    const ExpertSet es = random_set(4, 2, 1, rng);
    const Vector x{0.3, -0.1, 0.8, 0.2};
    EXPECT_LE(ts::rel_error(attach_component(Matrix(4, 4), es, RoutingWeights::uniform(1, 1), x),
                                 expert_update(es, 0, x)),
              1e-15);
}

TEST(AttachComponent, MatchesDenseMergedWeight) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const ExpertSet es = random_set(6, 2, 1, rng, 0.5);
        const Matrix w = numkit::random_normal(6, 6, 1.0, rng);
        Vector x(6);
        for (double& v : x) v = rng.normal();
        // Row-vector convention: x·(W + scale·(B A)ᵀ).
        Matrix merged = w + 0.5 * naive_transpose(naive_matmul(es.b[0], es.a));
        const Vector ref = numkit::vecmat(x, merged);
        ASSERT_LE(ts::rel_error(attach_component(w, es, RoutingWeights::uniform(1, 1), x), ref), 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Orthogonality carries from B to the full update

TEST(OrthogonalityCarry, OrthogonalBGivesOrthogonalUpdates) {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 16, r = 4;
        const Matrix a = numkit::random_normal(r, d, 1.0, rng);
        // Orthonormal basis of R^d split between Bᵢ and Bⱼ columns.
        const numkit::SvdResult q = numkit::svd_thin(numkit::random_normal(d, 2 * r, 1.0, rng));
        Matrix bi(d, r), bj(d, r);
        for (std::size_t k = 0; k < r; ++k) {
            const double si = 1.0 + rng.uniform(), sj = 1.0 + rng.uniform();
            for (std::size_t c = 0; c < d; ++c) {
                bi(c, k) = q.u(c, k) * si;
                bj(c, k) = q.u(c, r + k) * sj;
            }
        }
        const Matrix cross = naive_matmul(naive_transpose(naive_matmul(bi, a)), naive_matmul(bj, a));
        const double bound = ts::fro(a) * ts::fro(a) * ts::fro(bi) * ts::fro(bj);
        ASSERT_LE(ts::fro(cross), 1e-10 * bound);
    }
}

// ---------------------------------------------------------------------------
// Sequence kernels

TEST(Sequence, RowsMatchPerTokenCompose) {
    Rng rng(14);
    const ExpertSet es = random_set(8, 2, 3, rng);
    const RoutingWeights pi = random_pi(3, 4, rng);
    const Matrix z = numkit::random_normal(5, 8, 1.0, rng);
    const Matrix out = apply_sequence(es, pi, z, nullptr);
    for (std::size_t t = 0; t < 5; ++t) {
        const Vector ref = compose(es, pi, z.row(t)).delta;
        EXPECT_LE(ts::rel_error(out.row(t), ref), 1e-13);
    }
}

TEST(Sequence, BackwardMatchesFiniteDifferences) {
    Rng rng(15);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t d = 8, r = 2, n = 3, g = 2, T = 4;
        ExpertSet es = random_set(d, r, n, rng, 0.7);
        const RoutingWeights pi = random_pi(n, g, rng);
        const Matrix z = numkit::random_normal(T, d, 1.0, rng);
        const Matrix c = numkit::random_normal(T, d, 1.0, rng);  // L = Σ c ⊙ Δ
        auto loss = [&](const ExpertSet& e, const RoutingWeights& p, const Matrix& zz) {
            const Matrix out = apply_sequence(e, p, zz, nullptr);
            double s = 0.0;
            for (std::size_t k = 0; k < out.size(); ++k) s += c.data()[k] * out.data()[k];
            return s;
        };

        SequenceTrace tr;
        apply_sequence(es, pi, z, &tr);
        ExpertGrads grads = zeros_like(es);
        Matrix d_pi;
        const Matrix dz = backward_sequence(es, pi, z, tr, c, grads, true, d_pi);

        const Vector a0(es.a.data().begin(), es.a.data().end());
        ExpertSet probe = es;
        const Vector fd_a = numkit::finite_diff_grad(
            [&](std::span<const double> p) {
                std::copy(p.begin(), p.end(), probe.a.data().begin());
                return loss(probe, pi, z);
            },
            a0);
        EXPECT_LE(ts::rel_error(grads.a.data(), fd_a), 1e-7);

        for (std::size_t i = 0; i < n; ++i) {
            ExpertSet pb = es;
            const Vector b0(es.b[i].data().begin(), es.b[i].data().end());
            const Vector fd_b = numkit::finite_diff_grad(
                [&](std::span<const double> p) {
                    std::copy(p.begin(), p.end(), pb.b[i].data().begin());
                    return loss(pb, pi, z);
                },
                b0);
            EXPECT_LE(ts::rel_error(grads.b[i].data(), fd_b), 1e-7);
        }

        RoutingWeights pp = pi;
        const Vector pi0(pi.pi.data().begin(), pi.pi.data().end());
        const Vector fd_pi = numkit::finite_diff_grad(
            [&](std::span<const double> p) {
                std::copy(p.begin(), p.end(), pp.pi.data().begin());
                return loss(es, pp, z);
            },
            pi0);
        EXPECT_LE(ts::rel_error(d_pi.data(), fd_pi), 1e-7);

        Matrix zp = z;
        const Vector z0(z.data().begin(), z.data().end());
        const Vector fd_z = numkit::finite_diff_grad(
            [&](std::span<const double> p) {
                std::copy(p.begin(), p.end(), zp.data().begin());
                return loss(es, pi, zp);
            },
            z0);
        EXPECT_LE(ts::rel_error(dz.data(), fd_z), 1e-7);
    }
}

TEST(Sequence, FrozenAReceivesNoGradient) {
    Rng rng(16);
    const ExpertSet es = random_set(4, 2, 2, rng);
    const Matrix z = numkit::random_normal(3, 4, 1.0, rng);
    SequenceTrace tr;
    const RoutingWeights pi = RoutingWeights::uniform(2, 2);
    apply_sequence(es, pi, z, &tr);
    ExpertGrads grads = zeros_like(es);
    Matrix d_pi;
    backward_sequence(es, pi, z, tr, Matrix(3, 4, 1.0), grads, false, d_pi);
    for (double v : grads.a.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttachMode, ParseRoundTrip) {
    for (AttachMode m : {AttachMode::BlockAttn, AttachMode::BlockFfn, AttachMode::BlockBoth, AttachMode::ComponentQV}) {
        EXPECT_EQ(parse_attach_mode(to_string(m)), m);
    }
    EXPECT_THROW(parse_attach_mode("block"), ConfigError);
}
