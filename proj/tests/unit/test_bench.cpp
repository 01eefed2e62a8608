// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "mtlora/bench.hpp"
#include "mtlora/errors.hpp"
#include "support.hpp"

using namespace mtlora;
using namespace mtlora::bench;
using model::Model;
using numkit::Rng;

namespace {

TaskTemplate small_template() {
    TaskTemplate t;
    t.d = 16;
    t.seq_len = 4;
    t.classes = 2;
    t.train_size = 24;
    t.val_size = 12;
    return t;
}

RunSpec small_spec() {
    RunSpec s = preset_spec("collapse");
    s.data = small_template();
    s.model.d = 16;
    s.model.seq_len = 4;
    s.model.classes = 2;
    s.model.rank = 2;
    s.model.groups = 2;
    s.optim.epochs = 2;
    s.optim.batch_size = 8;
    return s;
}

Vector token_mean(const Example& e) {
    Vector m(e.tokens.cols(), 0.0);
    for (std::size_t t = 0; t < e.tokens.rows(); ++t)
        for (std::size_t c = 0; c < m.size(); ++c) m[c] += e.tokens(t, c) / static_cast<double>(e.tokens.rows());
    return m;
}

}  // namespace

TEST(Hadamard, OrthogonalRows) {
    for (std::size_t k : {1u, 2u, 4u, 8u}) {
        const Matrix h = hadamard(k);
        const Matrix g = ts::naive_matmul(h, ts::naive_transpose(h));
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(g(i, j), i == j ? double(k) : 0.0);
    }
    EXPECT_THROW(hadamard(3), ConfigError);
}

TEST(SignMasks, OrderedByHammingDistance) {
    const auto masks = sign_masks(4, 16);
    ASSERT_GE(masks.size(), 16u);
    int prev = 0;
    for (std::size_t i = 0; i < 16; ++i) {
        int flips = 0;
        for (double v : masks[i]) flips += v < 0;
        EXPECT_GE(flips, prev);
        prev = flips;
        for (std::size_t j = 0; j < i; ++j) EXPECT_NE(masks[i], masks[j]);
    }
    EXPECT_EQ(masks[0], (Vector{1, 1, 1, 1}));
}

TEST(TaskTemplateTest, BudgetAndShapeChecks) {
    TaskTemplate t = small_template();
    EXPECT_NO_THROW(t.validate(4));
    EXPECT_THROW(t.validate(5), ConfigError);  // only 2^classes sign masks
    t.classes = 4;
    EXPECT_NO_THROW(t.validate(8));
    EXPECT_THROW(t.validate(9), ConfigError);  // 2*classes + n_tasks > d
    t.classes = 3;
    EXPECT_THROW(t.validate(2), ConfigError);
    t = small_template();
    t.shared_weight = 1.5;
    EXPECT_THROW(t.validate(2), ConfigError);
}

TEST(GenTasks, Deterministic) {
    const auto a = gen_tasks(3, small_template(), 7);
    const auto b = gen_tasks(3, small_template(), 7);
    const auto c = gen_tasks(3, small_template(), 8);
    for (std::size_t t = 0; t < 3; ++t) {
        ASSERT_EQ(a[t].train.size(), 24u);
        ASSERT_EQ(a[t].val.size(), 12u);
        for (std::size_t i = 0; i < a[t].train.size(); ++i) {
            EXPECT_EQ(a[t].train[i].label, b[t].train[i].label);
            EXPECT_EQ(a[t].train[i].tokens.data()[5], b[t].train[i].tokens.data()[5]);
            EXPECT_EQ(a[t].train[i].task, t);
        }
    }
    EXPECT_NE(a[0].train[0].tokens.data()[0], c[0].train[0].tokens.data()[0]);
}

TEST(GenTasks, TaskDataIndependentOfTaskCount) {
    const auto few = gen_tasks(2, small_template(), 3);
    const auto many = gen_tasks(4, small_template(), 3);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < few[t].val.size(); ++i) {
            EXPECT_EQ(few[t].val[i].label, many[t].val[i].label);
            EXPECT_EQ(few[t].val[i].tokens.data()[0], many[t].val[i].tokens.data()[0]);
        }
}

TEST(GenTasks, NoiselessDataIsSeparableByClassMeans) {
    TaskTemplate tmpl = small_template();
    tmpl.classes = 4;
    tmpl.noise = 0.0;
    tmpl.shared_weight = 0.5;
    const auto tasks = gen_tasks(4, tmpl, 11);
    for (const TaskData& td : tasks) {
        const Matrix mu = td.spec.class_means();
        for (const Example& e : td.train) {
            const Vector x = token_mean(e);
            std::size_t best = 0;
            double best_score = -1e300;
            for (std::size_t k = 0; k < 4; ++k) {
                const double score = numkit::dot(x, mu.row(k)) - 0.5 * numkit::dot(mu.row(k), mu.row(k));
                if (score > best_score) best_score = score, best = k;
            }
            EXPECT_EQ(best, e.label);
        }
    }
}

TEST(GenTasks, DirectionsAreOrthonormal) {
    TaskTemplate tmpl = small_template();
    tmpl.classes = 4;
    const auto specs = make_task_specs(5, tmpl, 2);
    for (std::size_t a = 0; a < 5; ++a) {
        for (std::size_t b = 0; b < 5; ++b)
            EXPECT_NEAR(numkit::dot(specs[a].identity, specs[b].identity), a == b ? 1.0 : 0.0, 1e-12);
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_NEAR(numkit::norm2(specs[a].shared.row(k)), 1.0, 1e-12);
            EXPECT_NEAR(numkit::norm2(specs[a].conflict.row(k)), 1.0, 1e-12);
            EXPECT_NEAR(numkit::dot(specs[a].identity, specs[a].shared.row(k)), 0.0, 1e-12);
        }
    }
}

TEST(GenTasks, ZeroSharedWeightRemovesSharedComponent) {
    TaskTemplate tmpl = small_template();
    tmpl.classes = 4;
    tmpl.shared_weight = 0.0;
    const auto specs = make_task_specs(4, tmpl, 5);
    for (const TaskSpec& s : specs) {
        const Matrix mu = s.class_means();
        for (std::size_t k = 0; k < 4; ++k)
            for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(numkit::dot(mu.row(k), s.shared.row(j)), 0.0, 1e-12);
    }
    // Full sharing without task identity: every task has the same class means.
    tmpl.shared_weight = 1.0;
    tmpl.task_signal = 0.0;
    const auto same = make_task_specs(4, tmpl, 5);
    for (std::size_t t = 1; t < 4; ++t)
        EXPECT_LT(ts::max_abs_diff(same[t].class_means(), same[0].class_means()), 1e-15);
}

TEST(GenTasks, ConflictGrowsWithSignFlips) {
    // Classes agree across tasks 0 and 1 only on the coordinates where their
    // masks agree, so the class-mean overlap falls as masks diverge.
    TaskTemplate tmpl = small_template();
    tmpl.classes = 4;
    tmpl.task_signal = 0.0;
    const auto specs = make_task_specs(8, tmpl, 1);
    auto overlap = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += numkit::dot(specs[a].conflict.row(k), specs[b].conflict.row(k));
        return s / 4.0;
    };
    EXPECT_NEAR(overlap(0, 0), 1.0, 1e-12);
    EXPECT_LT(overlap(0, 7), overlap(0, 1));
}

TEST(Dataset, RoundTrip) {
    const auto dir = ts::scratch_dir("bench_ds");
    const auto tasks = gen_tasks(3, small_template(), 4);
    save_dataset(dir, tasks, small_template(), 4);
    const auto loaded = load_dataset(dir);
    ASSERT_EQ(loaded.size(), 3u);
    for (std::size_t t = 0; t < 3; ++t) {
        ASSERT_EQ(loaded[t].train.size(), tasks[t].train.size());
        for (std::size_t i = 0; i < tasks[t].train.size(); ++i) {
            EXPECT_EQ(loaded[t].train[i].label, tasks[t].train[i].label);
            EXPECT_EQ(loaded[t].train[i].tokens.data()[3], tasks[t].train[i].tokens.data()[3]);
            EXPECT_EQ(loaded[t].train[i].task, t);
        }
        EXPECT_EQ(loaded[t].val.back().tokens.data()[0], tasks[t].val.back().tokens.data()[0]);
    }
}

TEST(Dataset, CorruptFilesRejected) {
    const auto dir = ts::scratch_dir("bench_bad");
    const auto tasks = gen_tasks(1, small_template(), 4);
    save_task(dir / "t.bin", tasks[0]);
    std::string bytes;
    {
        std::ifstream in(dir / "t.bin", std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    {
        std::ofstream out(dir / "trunc.bin", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    }
    EXPECT_THROW(load_task(dir / "trunc.bin"), DataError);
    bytes[0] = 'X';
    {
        std::ofstream out(dir / "magic.bin", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    EXPECT_THROW(load_task(dir / "magic.bin"), DataError);
    EXPECT_THROW(load_task(dir / "missing.bin"), DataError);
    EXPECT_THROW(load_dataset(dir / "nowhere"), DataError);
}

TEST(RunSpecJson, RoundTripAndStrictKeys) {
    const RunSpec s = small_spec();
    const RunSpec back = run_spec_from_json(to_json(s));
    EXPECT_EQ(to_json(back).dump(), to_json(s).dump());
    nlohmann::json bad = to_json(s);
    bad["model"]["rnak"] = 3;
    EXPECT_THROW(run_spec_from_json(bad), ConfigError);
    nlohmann::json typed = to_json(s);
    typed["optim"]["epochs"] = "many";
    EXPECT_THROW(run_spec_from_json(typed), ConfigError);
}

TEST(GridJson, RoundTrip) {
    const ExperimentGrid g = preset_grid("attach-level");
    EXPECT_EQ(to_json(grid_from_json(to_json(g))).dump(), to_json(g).dump());
    EXPECT_THROW(preset_grid("nope"), ConfigError);
    EXPECT_EQ(preset_grid("lambda-sweep").cells().size(), 8u);
}

TEST(Compose, NaiveAverageOfIdenticalExpertsEqualsExpert) {
    const RunSpec spec = small_spec();
    const auto tasks = gen_tasks(3, spec.data, 2);
    const Model single = train_single(spec, 0, 2, tasks[0]);
    CellKey key;
    key.n_tasks = 3;
    key.groups = spec.model.groups;
    key.composition = Composition::NaiveAverage;
    const std::vector<const Model*> experts{&single, &single, &single};
    const Model merged = merge_naive(spec, key, 2, experts);
    for (const Example& e : tasks[0].val) {
        const Vector a = model::forward(single, e.tokens, 0);
        const Vector b = model::forward(merged, e.tokens, 0);
        for (std::size_t c = 0; c < a.size(); ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
    }
}

TEST(Compose, OneHotRoutingRecoversEachExpert) {
    const RunSpec spec = small_spec();
    const auto tasks = gen_tasks(2, spec.data, 3);
    const Model e0 = train_single(spec, 0, 3, tasks[0]);
    const Model e1 = train_single(spec, 1, 3, tasks[1]);
    CellKey key;
    key.n_tasks = 2;
    key.groups = 1;
    key.composition = Composition::NaiveAverage;
    Model merged = merge_naive(spec, key, 3, {&e0, &e1});
    merged.routing = model::RoutingMode::TaskOracle;
    for (std::size_t t = 0; t < 2; ++t) {
        const Model& expert = t == 0 ? e0 : e1;
        for (const Example& e : tasks[t].val) {
            const Vector a = model::forward(expert, e.tokens, 0);
            const Vector b = model::forward(merged, e.tokens, t);
            for (std::size_t c = 0; c < a.size(); ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
        }
    }
}

TEST(RunCell, SingleTaskNaiveMatchesOracle) {
    const RunSpec spec = small_spec();
    CellKey key;
    key.n_tasks = 1;
    key.groups = 2;
    key.composition = Composition::SingleTaskOracle;
    const CellResult oracle = run_cell(spec, key, 1);
    key.composition = Composition::NaiveAverage;
    const CellResult naive = run_cell(spec, key, 1);
    EXPECT_DOUBLE_EQ(oracle.mean_accuracy, naive.mean_accuracy);
}

TEST(RunCell, DeterministicReport) {
    const RunSpec spec = small_spec();
    CellKey key;
    key.n_tasks = 2;
    key.groups = 2;
    key.lambda1 = 0.5;
    const CellResult a = run_cell(spec, key, 5);
    const CellResult b = run_cell(spec, key, 5);
    EXPECT_EQ(diagnostics::dump(a.report), diagnostics::dump(b.report));
    EXPECT_TRUE(a.ok);
    const CellResult back = cell_result_from_json(to_json(a));
    EXPECT_EQ(to_json(back).dump(), to_json(a).dump());
    EXPECT_THROW(cell_result_from_json(nlohmann::json{{"key", 3}}), DataError);
}

TEST(Grid, SingleCellAndDuplicateSeeds) {
    const RunSpec spec = small_spec();
    ExperimentGrid g;
    g.groups = {2};
    g.seeds = {4, 4};
    const GridResult r = run_grid(spec, g, 1);
    EXPECT_EQ(r.runs.size(), 1u);
    EXPECT_EQ(r.failures, 0u);
    ASSERT_EQ(r.warnings.size(), 1u);
    const std::string csv = aggregate_csv(r);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
    EXPECT_EQ(csv.rfind("n_tasks,lambda1,groups", 0), 0u);
}

TEST(Grid, FailingCellIsRecordedAndGridContinues) {
    const RunSpec spec = small_spec();
    ExperimentGrid g;
    g.groups = {2, 3};
    g.seeds = {1};
    const GridResult r = run_grid(spec, g, 2);
    ASSERT_EQ(r.runs.size(), 2u);
    EXPECT_EQ(r.failures, 1u);
    EXPECT_TRUE(r.runs[0].ok);
    EXPECT_FALSE(r.runs[1].ok);
    EXPECT_FALSE(r.runs[1].error.empty());
}

TEST(Grid, WorkerCountDoesNotChangeResults) {
    const RunSpec spec = small_spec();
    ExperimentGrid g;
    g.groups = {1, 2};
    g.seeds = {1, 2};
    const GridResult serial = run_grid(spec, g, 1);
    const GridResult parallel = run_grid(spec, g, 3);
    EXPECT_EQ(aggregate_csv(serial), aggregate_csv(parallel));
}
