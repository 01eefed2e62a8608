// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// mtlora command-line front end.
//
//   mtlora gen-data   --config C --out DIR
//   mtlora train      --config C [--data DIR] [--resume CKPT] --out DIR
//   mtlora analyze    CKPT [CKPT] [--spectral --conflict --routing --suppression --jacobian] --out DIR
//   mtlora grid       (--preset NAME | --config C) [--workers K] --out DIR
//   mtlora export-csv --in DIR [--out FILE]
//
// Exit codes: 0 success, 2 config/validation, 3 data/compatibility,
// 4 numeric failure, 1 anything else (including a grid whose every cell failed).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtlora/bench.hpp"
#include "mtlora/diagnostics.hpp"
#include "mtlora/errors.hpp"
#include "mtlora/io.hpp"
#include "mtlora/model.hpp"
#include "mtlora/spectral.hpp"
#include "mtlora/training.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace mtlora;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<double> lambda1;
    std::optional<double> lambda2;
    std::optional<std::size_t> groups;
    std::optional<std::string> attach;
    bool uniform_reg = false;
    std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "Run configuration (JSON)");
    cmd->add_option("--seed", c.seed, "Seed");
    cmd->add_option("--out", c.out, "Output directory");
    cmd->add_option("--lambda1", c.lambda1, "Spectral regularization weight");
    cmd->add_option("--lambda2", c.lambda2, "Load-balance weight");
    cmd->add_option("--groups", c.groups, "Routing groups");
    cmd->add_option("--attach", c.attach, "Attach mode")
        ->check(CLI::IsMember({"block-attn", "block-ffn", "block-both", "component-qv"}));
    cmd->add_flag("--uniform-reg", c.uniform_reg, "Orthogonality penalty with w = 1 for every component");
    cmd->add_option("--workers", c.workers, "Parallel grid workers");
}

io::RunConfig load_config(const Common& c) {
    io::RunConfig rc;
    if (!c.config.empty()) rc = io::load_run_config(c.config);
    if (c.seed) rc.seed = *c.seed;
    if (c.lambda1) rc.spec.loss.lambda1 = *c.lambda1;
    if (c.lambda2) rc.spec.loss.lambda2 = *c.lambda2;
    if (c.groups) rc.spec.model.groups = *c.groups;
    if (c.attach) rc.spec.model.attach_mode = adapters::parse_attach_mode(*c.attach);
    if (c.uniform_reg) rc.spec.loss.uniform_reg = true;
    if (c.workers) rc.workers = *c.workers;
    if (!c.out.empty()) rc.out_dir = c.out;
    rc.validate();
    return rc;
}

fs::path require_out(const io::RunConfig& rc) {
    if (rc.out_dir.empty()) throw ConfigError("no output directory (use --out or paths.out)");
    return rc.out_dir;
}

std::size_t worker_cap(std::size_t requested) {
    std::size_t n = std::max<std::size_t>(1, requested);
    if (const char* env = std::getenv("MTLORA_THREADS")) {
        char* end = nullptr;
        const unsigned long cap = std::strtoul(env, &end, 10);
        if (end == env || *end != '\0' || cap == 0) {
            throw ConfigError("MTLORA_THREADS must be a positive integer");
        }
        n = std::min<std::size_t>(n, cap);
    }
    return n;
}

void write_text(const fs::path& path, const std::string& text) {
    io::write_file(path, text);
    std::cerr << "wrote " << path.string() << '\n';
}

/// Tasks from a dataset directory, or generated in memory from the config.
std::vector<bench::TaskData> tasks_for(const io::RunConfig& rc, const std::string& data_flag) {
    const std::string dir = data_flag.empty() ? rc.data_dir : data_flag;
    if (dir.empty()) return bench::gen_tasks(rc.n_tasks, rc.spec.data, rc.seed);
    std::vector<bench::TaskData> tasks = bench::load_dataset(dir);
    if (tasks.empty()) throw DataError("dataset '" + dir + "' has no tasks");
    const auto& first = tasks.front();
    const std::size_t d = first.spec.identity.size();
    const std::size_t seq = first.train.empty() ? 0 : first.train.front().tokens.rows();
    const auto& m = rc.spec.model;
    if (d != m.d || seq != m.seq_len || first.spec.classes != m.classes) {
        throw DataError("dataset '" + dir + "' (d=" + std::to_string(d) + ", seq_len=" + std::to_string(seq) +
                        ", classes=" + std::to_string(first.spec.classes) + ") does not match the model config");
    }
    return tasks;
}

Json eval_metrics(const Json& report) {
    Json m = Json::object();
    for (const char* k : {"accuracy", "routing"}) {
        if (report.contains(k)) m[k] = report.at(k);
    }
    return m;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, std::optional<std::size_t> n_tasks) {
    io::RunConfig rc = load_config(c);
    if (n_tasks) {
        rc.n_tasks = *n_tasks;
        rc.validate();
    }
    const fs::path out = require_out(rc);
    const auto tasks = bench::gen_tasks(rc.n_tasks, rc.spec.data, rc.seed);
    bench::save_dataset(out, tasks, rc.spec.data, rc.seed);
    std::cerr << "wrote " << tasks.size() << " task files to " << out.string() << '\n';
    return kOk;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume) {
    io::RunConfig rc = load_config(c);
    const fs::path out = require_out(rc);
    const auto tasks = tasks_for(rc, data_dir);
    rc.n_tasks = tasks.size();
    rc.validate();
    const std::vector<training::Example> train = bench::concat_train(tasks);
    const std::vector<training::Example> val = bench::concat_val(tasks);

    model::Model m = model::Model::create(rc.model_config(), rc.seed);
    m.routing = rc.routing;
    std::size_t start = 0;
    if (!resume.empty()) {
        io::Checkpoint ck = io::load_checkpoint(resume);
        io::require_compatible(ck.model, m);
        if (ck.model.seed != m.seed) throw DataError("checkpoint seed differs from the run seed");
        m = std::move(ck.model);
        m.routing = rc.routing;
        start = ck.epoch;
        std::cerr << "resuming from epoch " << start << '\n';
    }

    training::OptimConfig opt = rc.spec.optim;
    opt.epochs = opt.epochs > start ? opt.epochs - start : 0;
    auto log = [&](const training::EpochLog& e) {
        std::cerr << "epoch " << start + e.epoch << "  task " << e.loss.task << "  spectral " << e.loss.spectral
                  << "  balance " << e.loss.balance << "  total " << e.loss.total() << '\n';
    };
    std::vector<training::EpochLog> logs;
    if (opt.epochs > 0) {
        logs = training::train(m, train, rc.spec.loss, opt, numkit::splitmix64(rc.seed ^ start), log);
        for (auto& e : logs) e.epoch += start;
    }
    io::round_to_f32(m);

    diagnostics::ReportInputs in;
    in.config = rc.to_json();
    in.seed = rc.seed;
    in.eval = training::evaluate(m, val);
    in.epochs = logs;
    if (rc.spec.spectral_report && m.cfg.n_tasks >= 2) {
        const auto banks = bench::banks_of(m);
        in.spectral = spectral::analyze_banks(banks);
    }
    const Json report = diagnostics::run_report(m, in);
    io::save_checkpoint(out / "model.ckpt", m, start + opt.epochs, eval_metrics(report));
    std::cerr << "wrote " << (out / "model.ckpt").string() << '\n';
    write_text(out / "report.json", diagnostics::dump(report));
    std::cerr << "mean accuracy " << in.eval->mean_accuracy << ", routing entropy " << in.eval->mean_entropy
              << '\n';
    return kOk;
}

struct AnalyzeFlags {
    std::vector<std::string> checkpoints;
    std::string data_dir;
    bool spectral = false;
    bool conflict = false;
    bool routing = false;
    bool suppression = false;
    bool jacobian = false;
    std::size_t pairs = 200;
};

Json jacobian_probe(const model::Model& m, const std::vector<training::Example>& val, numkit::Rng& rng) {
    Json probes = Json::array();
    const std::size_t n = std::min<std::size_t>(val.size(), 8);
    for (std::size_t i = 0; i < n; ++i) {
        const training::Example& ex = val[rng.index(val.size())];
        auto perturb = [&](model::TrainableParams& p) {
            for (double& v : p.sites[0][0].experts.b[0].data()) v += 0.1 * rng.normal();
        };
        const model::IsolationProbe probe = model::attention_isolation_probe(m, ex.tokens, ex.task, perturb);
        const auto& fwd = probe.max_abs_delta;
        Json row{{"task", ex.task}, {"max_abs_delta", fwd}};
        Json bits = Json::array();
        for (bool b : probe.bit_identical) bits.push_back(b);
        row["bit_identical"] = bits;
        probes.push_back(std::move(row));
    }
    return Json{{"attention_isolation", {{"attach_mode", adapters::to_string(m.cfg.attach_mode)},
                                         {"perturbed", "layer0 first site expert 0"},
                                         {"probes", probes}}}};
}

int cmd_analyze(const Common& c, AnalyzeFlags f) {
    io::RunConfig rc = load_config(c);
    const fs::path out = require_out(rc);
    if (f.checkpoints.empty() || f.checkpoints.size() > 2) {
        throw ConfigError("analyze takes one or two checkpoints");
    }
    if (f.suppression && f.checkpoints.size() != 2) {
        throw ConfigError("--suppression needs exactly two checkpoints (before, after)");
    }
    if (!f.spectral && !f.conflict && !f.routing && !f.suppression && !f.jacobian) {
        f.spectral = true;
        f.routing = true;
    }
    std::vector<io::Checkpoint> cks;
    for (const auto& p : f.checkpoints) cks.push_back(io::load_checkpoint(p));
    if (cks.size() == 2) io::require_compatible(cks[0].model, cks[1].model);
    const model::Model& m = cks.back().model;

    // Data follows the checkpoint's dimensions; the template supplies the rest.
    io::RunConfig drc = rc;
    drc.spec.model = m.cfg;
    drc.spec.data.d = m.cfg.d;
    drc.spec.data.seq_len = m.cfg.seq_len;
    drc.spec.data.classes = m.cfg.classes;
    drc.n_tasks = m.cfg.n_tasks;
    if (!c.seed) drc.seed = m.seed;

    diagnostics::ReportInputs in;
    in.config = Json{{"checkpoints", f.checkpoints},
                     {"sections",
                      {{"spectral", f.spectral},
                       {"conflict", f.conflict},
                       {"routing", f.routing},
                       {"suppression", f.suppression},
                       {"jacobian", f.jacobian}}},
                     {"pairs", f.pairs},
                     {"run", drc.to_json()}};
    in.seed = drc.seed;

    std::vector<bench::TaskData> tasks;
    if (f.conflict || f.routing || f.jacobian) {
        tasks = tasks_for(drc, f.data_dir);
        if (tasks.size() != m.cfg.n_tasks) throw DataError("dataset task count differs from the checkpoint");
    }
    if (f.routing) in.eval = training::evaluate(m, bench::concat_val(tasks));
    if (f.spectral) {
        const auto banks = bench::banks_of(m);
        in.spectral = spectral::analyze_banks(banks);
    }
    if (f.suppression) {
        const auto before_banks = bench::banks_of(cks[0].model);
        const auto after_banks = bench::banks_of(cks[1].model);
        in.suppression = spectral::suppression_report(spectral::analyze_banks(before_banks),
                                                      spectral::analyze_banks(after_banks));
    }
    if (f.conflict) {
        if (m.cfg.n_tasks < 2) throw ConfigError("--conflict needs a checkpoint with at least two tasks");
        numkit::Rng rng = numkit::Rng(drc.seed).derive(0xc0f1);
        in.conflict = diagnostics::conflict_score(
            m, diagnostics::group_by_task(bench::concat_train(tasks), m.cfg.n_tasks), f.pairs, rng);
        write_text(out / "conflict_layers.csv", diagnostics::per_layer_csv(*in.conflict));
    }
    if (f.jacobian) {
        numkit::Rng rng = numkit::Rng(drc.seed).derive(0x1ac0);
        in.extra = jacobian_probe(m, bench::concat_val(tasks), rng);
    }
    write_text(out / "analysis.json", diagnostics::dump(diagnostics::run_report(m, in)));
    return kOk;
}

std::string run_file_name(std::size_t index, const bench::CellResult& r) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu_", index);
    return std::string(buf) + r.key.label() + "_s" + std::to_string(r.seed) + ".json";
}

int cmd_grid(const Common& c, const std::string& preset_flag) {
    io::RunConfig rc = load_config(c);
    const fs::path out = require_out(rc);
    const std::string preset = preset_flag.empty() ? rc.preset : preset_flag;
    bench::ExperimentGrid grid;
    bench::RunSpec spec = rc.spec;
    if (!preset.empty()) {
        grid = bench::preset_grid(preset);
        if (c.config.empty()) spec = bench::preset_spec(preset);
    } else if (rc.grid) {
        grid = *rc.grid;
    } else {
        throw ConfigError("grid needs --preset or a config with a grid section");
    }
    if (c.lambda1) grid.lambda1 = {*c.lambda1};
    if (c.lambda2) spec.loss.lambda2 = *c.lambda2;
    if (c.groups) grid.groups = {*c.groups};
    if (c.attach) grid.attach = {adapters::parse_attach_mode(*c.attach)};
    if (c.uniform_reg) grid.uniform_reg = {true};
    if (c.seed) grid.seeds = {*c.seed};
    spec.validate();
    grid.validate();

    const std::size_t workers = worker_cap(rc.workers);
    std::cerr << grid.cells().size() << " cells x " << grid.seeds.size() << " seeds on " << workers
              << " worker(s)\n";
    const bench::GridResult result =
        bench::run_grid(spec, grid, workers, [](const std::string& msg) { std::cerr << msg << '\n'; });

    for (std::size_t i = 0; i < result.runs.size(); ++i) {
        Json rec = bench::to_json(result.runs[i]);
        rec["index"] = i;
        io::write_file(out / "runs" / run_file_name(i, result.runs[i]), diagnostics::dump(rec));
    }
    write_text(out / "summary.csv", bench::aggregate_csv(result));
    if (result.failures > 0) {
        std::cerr << result.failures << " of " << result.runs.size() << " runs failed\n";
    }
    return result.failures == result.runs.size() ? kOther : kOk;
}

int cmd_export_csv(const std::string& in_dir, const std::string& out_file) {
    const fs::path runs = fs::path(in_dir) / "runs";
    if (!fs::is_directory(runs)) throw DataError("no runs/ directory in '" + in_dir + "'");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(runs)) {
        if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    bench::GridResult result;
    for (const auto& p : files) {
        Json j;
        try {
            j = Json::parse(io::read_file(p));
        } catch (const Json::exception& e) {
            throw DataError(p.string() + ": " + e.what());
        }
        result.runs.push_back(bench::cell_result_from_json(j));
        if (!result.runs.back().ok) ++result.failures;
    }
    if (result.runs.empty()) throw DataError("no run records in '" + runs.string() + "'");
    const std::string csv = bench::aggregate_csv(result);
    if (out_file.empty()) {
        std::cout << csv;
    } else {
        write_text(out_file, csv);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task routed low-rank adapters on a desk-scale transformer"};
    app.require_subcommand(1);

    Common c;
    std::optional<std::size_t> n_tasks;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic multi-task dataset");
    add_common(gen, c);
    gen->add_option("--n-tasks", n_tasks, "Number of tasks (overrides the config)");

    std::string data_dir, resume;
    auto* train = app.add_subcommand("train", "Train a routed adapter model");
    add_common(train, c);
    train->add_option("--data", data_dir, "Dataset directory written by gen-data");
    train->add_option("--resume", resume, "Checkpoint to continue from");

    AnalyzeFlags af;
    auto* analyze = app.add_subcommand("analyze", "Spectral, routing, conflict and Jacobian diagnostics");
    add_common(analyze, c);
    analyze->add_option("checkpoints", af.checkpoints, "One checkpoint, or two (before, after)")->required();
    analyze->add_option("--data", af.data_dir, "Dataset directory");
    analyze->add_flag("--spectral", af.spectral, "Singular-value spectra, band mass and alignment");
    analyze->add_flag("--conflict", af.conflict, "Gradient conflict score");
    analyze->add_flag("--routing", af.routing, "Accuracy and routing statistics");
    analyze->add_flag("--suppression", af.suppression, "Per-band sigma change between two checkpoints");
    analyze->add_flag("--jacobian", af.jacobian, "Attention isolation probe");
    analyze->add_option("--pairs", af.pairs, "Sampled task pairs for --conflict")->check(CLI::PositiveNumber);

    std::string preset;
    auto* grid = app.add_subcommand("grid", "Run an experiment grid");
    add_common(grid, c);
    grid->add_option("--preset", preset, "collapse, lambda-sweep, granularity or attach-level");

    std::string csv_in, csv_out;
    auto* csv = app.add_subcommand("export-csv", "Aggregate a grid directory into CSV");
    csv->add_option("--in", csv_in, "Grid output directory")->required();
    csv->add_option("--out", csv_out, "CSV file (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*gen) return cmd_gen_data(c, n_tasks);
        if (*train) return cmd_train(c, data_dir, resume);
        if (*analyze) return cmd_analyze(c, af);
        if (*grid) return cmd_grid(c, preset);
        if (*csv) return cmd_export_csv(csv_in, csv_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
    return kOther;
}
