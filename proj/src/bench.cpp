// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/bench.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json_util.hpp"
#include "mtlora/errors.hpp"

namespace mtlora::bench {

using Json = nlohmann::json;
using model::Model;
using model::ModelConfig;

// ---------------------------------------------------------------------------
// Task geometry

void TaskTemplate::validate(std::size_t n_tasks) const {
    if (d == 0 || seq_len == 0) throw ConfigError("task template: d and seq_len must be positive");
    if (classes < 2 || !std::has_single_bit(classes)) {
        throw ConfigError("task template: classes must be a power of two >= 2");
    }
    if (n_tasks == 0) throw ConfigError("task template: n_tasks must be positive");
    if (2 * classes + n_tasks > d) {
        throw ConfigError("task template: direction budget exceeded (2*classes + n_tasks = " +
                          std::to_string(2 * classes + n_tasks) + " > d = " + std::to_string(d) + ")");
    }
    if (classes < 64 && n_tasks > (std::size_t{1} << classes)) {
        throw ConfigError("task template: at most 2^classes distinct sign masks");
    }
    if (train_size == 0 || val_size == 0) throw ConfigError("task template: empty split");
    if (!(shared_weight >= 0.0 && shared_weight <= 1.0)) {
        throw ConfigError("task template: shared_weight must lie in [0, 1]");
    }
    if (!(noise >= 0.0) || !(task_signal >= 0.0)) {
        throw ConfigError("task template: noise and task_signal must be non-negative");
    }
}

Matrix hadamard(std::size_t k) {
    if (k == 0 || !std::has_single_bit(k)) throw ConfigError("hadamard: order must be a power of two");
    Matrix h(1, 1, 1.0);
    while (h.rows() < k) {
        const std::size_t n = h.rows();
        Matrix next(2 * n, 2 * n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                next(i, j) = h(i, j);
                next(i, j + n) = h(i, j);
                next(i + n, j) = h(i, j);
                next(i + n, j + n) = -h(i, j);
            }
        }
        h = std::move(next);
    }
    return h;
}

std::vector<Vector> sign_masks(std::size_t classes, std::size_t count) {
    if (classes == 0 || classes > 20) throw ConfigError("sign_masks: unsupported class count");
    const std::size_t total = std::size_t{1} << classes;
    if (count > total) throw ConfigError("sign_masks: not enough distinct masks");
    // Bit (K−1−m) of a code marks a negative entry at position m.
    std::vector<std::size_t> codes(total);
    for (std::size_t c = 0; c < total; ++c) codes[c] = c;
    std::stable_sort(codes.begin(), codes.end(), [](std::size_t a, std::size_t b) {
        return std::popcount(a) < std::popcount(b);
    });
    std::vector<Vector> out;
    for (std::size_t i = 0; i < count; ++i) {
        Vector h(classes);
        for (std::size_t m = 0; m < classes; ++m) {
            h[m] = (codes[i] >> (classes - 1 - m)) & 1U ? -1.0 : 1.0;
        }
        out.push_back(std::move(h));
    }
    return out;
}

namespace {

/// Orthonormal d×d basis (columns) by modified Gram-Schmidt on a Gaussian matrix.
Matrix random_basis(std::size_t d, numkit::Rng& rng) {
    Matrix g = numkit::random_normal(d, d, 1.0, rng);
    for (std::size_t c = 0; c < d; ++c) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t p = 0; p < c; ++p) {
                double proj = 0.0;
                for (std::size_t r = 0; r < d; ++r) proj += g(r, p) * g(r, c);
                for (std::size_t r = 0; r < d; ++r) g(r, c) -= proj * g(r, p);
            }
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < d; ++r) norm += g(r, c) * g(r, c);
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw NumericError("random_basis: degenerate draw");
        for (std::size_t r = 0; r < d; ++r) g(r, c) /= norm;
    }
    return g;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Matrix TaskSpec::class_means() const {
    const std::size_t d = identity.size();
    Matrix mu(classes, d);
    const double w_conf = std::sqrt(std::max(0.0, 1.0 - shared_weight * shared_weight));
    for (std::size_t k = 0; k < classes; ++k) {
        for (std::size_t c = 0; c < d; ++c) {
            mu(k, c) = shared_weight * shared(k, c) + w_conf * conflict(k, c) + task_signal * identity[c];
        }
    }
    return mu;
}

std::vector<TaskSpec> make_task_specs(std::size_t n_tasks, const TaskTemplate& tmpl, std::uint64_t seed) {
    tmpl.validate(n_tasks);
    const std::size_t d = tmpl.d;
    const std::size_t k = tmpl.classes;
    numkit::Rng basis_rng = numkit::Rng(seed).derive(0xda7a);
    const Matrix q = random_basis(d, basis_rng);
    const Matrix h = hadamard(k);
    const std::vector<Vector> masks = sign_masks(k, n_tasks);
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k));

    std::vector<TaskSpec> specs;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        TaskSpec s;
        s.task = t;
        s.classes = k;
        s.shared = Matrix(k, d);
        s.conflict = Matrix(k, d);
        s.identity.assign(d, 0.0);
        s.sign_mask = masks[t];
        for (std::size_t cls = 0; cls < k; ++cls) {
            for (std::size_t r = 0; r < d; ++r) {
                s.shared(cls, r) = q(r, cls);
                double v = 0.0;
                for (std::size_t m = 0; m < k; ++m) v += h(cls, m) * masks[t][m] * q(r, k + m);
                s.conflict(cls, r) = v * inv_sqrt_k;
            }
        }
        for (std::size_t r = 0; r < d; ++r) s.identity[r] = q(r, 2 * k + t);
        s.shared_weight = tmpl.shared_weight;
        s.task_signal = tmpl.task_signal;
        s.noise = tmpl.noise;
        s.train_size = tmpl.train_size;
        s.val_size = tmpl.val_size;
        s.seed = seed;
        specs.push_back(std::move(s));
    }
    return specs;
}

std::vector<TaskData> gen_tasks(std::size_t n_tasks, const TaskTemplate& tmpl, std::uint64_t seed) {
    std::vector<TaskData> out;
    for (TaskSpec& spec : make_task_specs(n_tasks, tmpl, seed)) {
        TaskData td;
        numkit::Rng rng = numkit::Rng(seed).derive(0x7a5c'0000 + spec.task);
        const Matrix mu = spec.class_means();
        auto draw = [&](std::size_t count, std::vector<Example>& dst) {
            for (std::size_t i = 0; i < count; ++i) {
                Example ex;
                ex.task = spec.task;
                ex.label = rng.index(spec.classes);
                ex.tokens = Matrix(tmpl.seq_len, tmpl.d);
                for (std::size_t t = 0; t < tmpl.seq_len; ++t) {
                    for (std::size_t c = 0; c < tmpl.d; ++c) {
                        ex.tokens(t, c) = to_f32(mu(ex.label, c) + spec.noise * rng.normal());
                    }
                }
                dst.push_back(std::move(ex));
            }
        };
        draw(spec.train_size, td.train);
        draw(spec.val_size, td.val);
        td.spec = std::move(spec);
        out.push_back(std::move(td));
    }
    return out;
}

std::vector<Example> concat_train(const std::vector<TaskData>& tasks) {
    std::vector<Example> out;
    for (const auto& t : tasks) out.insert(out.end(), t.train.begin(), t.train.end());
    return out;
}

std::vector<Example> concat_val(const std::vector<TaskData>& tasks) {
    std::vector<Example> out;
    for (const auto& t : tasks) out.insert(out.end(), t.val.begin(), t.val.end());
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files

namespace {

constexpr char kDataMagic[4] = {'M', 'T', 'L', 'D'};
constexpr std::uint16_t kDataVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("dataset file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw DataError("dataset file truncated");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

Json matrix_json(const Matrix& m) {
    return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", Vector(m.data().begin(), m.data().end())}};
}

Matrix matrix_from_json(const Json& j) {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    Vector data = j.at("data").get<Vector>();
    if (data.size() != rows * cols) throw DataError("matrix payload size mismatch");
    return Matrix(rows, cols, std::move(data));
}

}  // namespace

void save_task(const std::filesystem::path& path, const TaskData& task) {
    const TaskSpec& s = task.spec;
    const std::size_t d = s.identity.size();
    const std::size_t seq = task.train.empty() ? 0 : task.train.front().tokens.rows();
    Json header{{"task", s.task},
                {"classes", s.classes},
                {"d", d},
                {"seq_len", seq},
                {"train_size", task.train.size()},
                {"val_size", task.val.size()},
                {"seed", s.seed},
                {"shared_weight", s.shared_weight},
                {"task_signal", s.task_signal},
                {"noise", s.noise},
                {"sign_mask", s.sign_mask},
                {"identity", s.identity},
                {"shared", matrix_json(s.shared)},
                {"conflict", matrix_json(s.conflict)}};
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open '" + path.string() + "' for writing");
    os.write(kDataMagic, 4);
    put_u16(os, kDataVersion);
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* split : {&task.train, &task.val}) {
        for (const Example& ex : *split) {
            if (ex.tokens.rows() != seq || ex.tokens.cols() != d) throw ShapeError("save_task: ragged examples");
            put_u32(os, static_cast<std::uint32_t>(ex.label));
            for (double v : ex.tokens.data()) put_f32(os, v);
        }
    }
    if (!os) throw ConfigError("write to '" + path.string() + "' failed");
}

TaskData load_task(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open dataset file '" + path.string() + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDataMagic, 4) != 0) {
        throw DataError("'" + path.string() + "' is not a dataset file");
    }
    if (get_u16(is) != kDataVersion) throw DataError("unsupported dataset version");
    const std::uint32_t len = get_u32(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), len)) throw DataError("dataset header truncated");
    Json h;
    try {
        h = Json::parse(text);
    } catch (const Json::exception& e) {
        throw DataError(std::string("dataset header: ") + e.what());
    }
    TaskData td;
    TaskSpec& s = td.spec;
    try {
        s.task = h.at("task").get<std::size_t>();
        s.classes = h.at("classes").get<std::size_t>();
        s.seed = h.at("seed").get<std::uint64_t>();
        s.shared_weight = h.at("shared_weight").get<double>();
        s.task_signal = h.at("task_signal").get<double>();
        s.noise = h.at("noise").get<double>();
        s.sign_mask = h.at("sign_mask").get<Vector>();
        s.identity = h.at("identity").get<Vector>();
        s.shared = matrix_from_json(h.at("shared"));
        s.conflict = matrix_from_json(h.at("conflict"));
        s.train_size = h.at("train_size").get<std::size_t>();
        s.val_size = h.at("val_size").get<std::size_t>();
    } catch (const Json::exception& e) {
        throw DataError(std::string("dataset header: ") + e.what());
    }
    const auto d = h.at("d").get<std::size_t>();
    const auto seq = h.at("seq_len").get<std::size_t>();
    if (s.identity.size() != d) throw DataError("dataset header: identity length != d");
    auto read_split = [&](std::size_t count, std::vector<Example>& dst) {
        for (std::size_t i = 0; i < count; ++i) {
            Example ex;
            ex.task = s.task;
            ex.label = get_u32(is);
            if (ex.label >= s.classes) throw DataError("dataset: label out of range");
            ex.tokens = Matrix(seq, d);
            for (double& v : ex.tokens.data()) {
                v = static_cast<double>(std::bit_cast<float>(get_u32(is)));
            }
            dst.push_back(std::move(ex));
        }
    };
    read_split(s.train_size, td.train);
    read_split(s.val_size, td.val);
    if (is.peek() != std::char_traits<char>::eof()) throw DataError("dataset: trailing bytes");
    return td;
}

Json to_json(const TaskTemplate& t) {
    return Json{{"d", t.d},
                {"seq_len", t.seq_len},
                {"classes", t.classes},
                {"train_size", t.train_size},
                {"val_size", t.val_size},
                {"shared_weight", t.shared_weight},
                {"task_signal", t.task_signal},
                {"noise", t.noise}};
}

TaskTemplate template_from_json(const Json& j) {
    detail::check_keys(j, {"d", "seq_len", "classes", "train_size", "val_size", "shared_weight",
                           "task_signal", "noise"},
                       "data");
    TaskTemplate t;
    detail::read(j, "d", t.d, "data");
    detail::read(j, "seq_len", t.seq_len, "data");
    detail::read(j, "classes", t.classes, "data");
    detail::read(j, "train_size", t.train_size, "data");
    detail::read(j, "val_size", t.val_size, "data");
    detail::read(j, "shared_weight", t.shared_weight, "data");
    detail::read(j, "task_signal", t.task_signal, "data");
    detail::read(j, "noise", t.noise, "data");
    return t;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<TaskData>& tasks,
                  const TaskTemplate& tmpl, std::uint64_t seed) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create '" + dir.string() + "': " + ec.message());
    Json files = Json::array();
    for (const TaskData& t : tasks) {
        char name[32];
        std::snprintf(name, sizeof name, "task_%03zu.bin", t.spec.task);
        save_task(dir / name, t);
        files.push_back(name);
    }
    const Json manifest{{"format", "mtlora-dataset"},
                        {"version", kDataVersion},
                        {"n_tasks", tasks.size()},
                        {"seed", seed},
                        {"template", to_json(tmpl)},
                        {"files", files}};
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw ConfigError("cannot write manifest in '" + dir.string() + "'");
    os << manifest.dump(2) << '\n';
}

std::vector<TaskData> load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw DataError("no manifest.json in '" + dir.string() + "'");
    Json manifest;
    try {
        manifest = Json::parse(is);
    } catch (const Json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "mtlora-dataset") throw DataError("manifest: unknown format");
    std::vector<TaskData> tasks;
    for (const auto& f : manifest.at("files")) tasks.push_back(load_task(dir / f.get<std::string>()));
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t].spec.task != t) throw DataError("manifest: task files out of order");
    }
    if (tasks.size() != manifest.at("n_tasks").get<std::size_t>()) throw DataError("manifest: task count");
    return tasks;
}

// ---------------------------------------------------------------------------
// Compositions

std::string_view to_string(Composition c) {
    switch (c) {
        case Composition::SingleTaskOracle: return "single-task-oracle";
        case Composition::NaiveAverage: return "naive-average";
        case Composition::UniformRouting: return "uniform-routing";
        case Composition::ScalarRouting: return "scalar-routing";
        case Composition::FineGrained: return "fine-grained";
    }
    return "unknown";
}

Composition parse_composition(std::string_view text) {
    for (Composition c : {Composition::SingleTaskOracle, Composition::NaiveAverage,
                          Composition::UniformRouting, Composition::ScalarRouting,
                          Composition::FineGrained}) {
        if (text == to_string(c)) return c;
    }
    throw ConfigError("unknown composition '" + std::string(text) + "'");
}

std::string CellKey::label() const {
    std::ostringstream os;
    os << "n" << n_tasks << "_l" << lambda1 << "_g" << groups << "_" << adapters::to_string(attach)
       << "_" << to_string(composition) << (uniform_reg ? "_ureg" : "");
    return os.str();
}

Json to_json(const ModelConfig& m) {
    return Json{{"d", m.d},
                {"layers", m.layers},
                {"heads", m.heads},
                {"seq_len", m.seq_len},
                {"classes", m.classes},
                {"rank", m.rank},
                {"groups", m.groups},
                {"router_hidden", m.router_hidden},
                {"router_init", m.router_init},
                {"attach_mode", adapters::to_string(m.attach_mode)},
                {"scale", m.scale},
                {"ln_eps", m.ln_eps},
                {"train_a", m.train_a},
                {"train_heads", m.train_heads},
                {"train_router", m.train_router}};
}

ModelConfig model_config_from_json(const Json& j) {
    detail::check_keys(j, {"d", "layers", "heads", "seq_len", "classes", "rank", "groups", "router_hidden",
                           "router_init", "attach_mode", "scale", "ln_eps", "train_a", "train_heads", "train_router"},
                       "model");
    ModelConfig m;
    detail::read(j, "d", m.d, "model");
    detail::read(j, "layers", m.layers, "model");
    detail::read(j, "heads", m.heads, "model");
    detail::read(j, "seq_len", m.seq_len, "model");
    detail::read(j, "classes", m.classes, "model");
    detail::read(j, "rank", m.rank, "model");
    detail::read(j, "groups", m.groups, "model");
    detail::read(j, "router_hidden", m.router_hidden, "model");
    detail::read(j, "router_init", m.router_init, "model");
    std::string attach(adapters::to_string(m.attach_mode));
    detail::read(j, "attach_mode", attach, "model");
    m.attach_mode = adapters::parse_attach_mode(attach);
    detail::read(j, "scale", m.scale, "model");
    detail::read(j, "ln_eps", m.ln_eps, "model");
    detail::read(j, "train_a", m.train_a, "model");
    detail::read(j, "train_heads", m.train_heads, "model");
    detail::read(j, "train_router", m.train_router, "model");
    return m;
}

Json to_json(const RunSpec& s) {
    return Json{{"model", to_json(s.model)},
                {"data", to_json(s.data)},
                {"loss", {{"lambda1", s.loss.lambda1}, {"lambda2", s.loss.lambda2}, {"uniform_reg", s.loss.uniform_reg}}},
                {"optim",
                 {{"lr", s.optim.lr},
                  {"momentum", s.optim.momentum},
                  {"batch_size", s.optim.batch_size},
                  {"epochs", s.optim.epochs}}},
                {"conflict_pairs", s.conflict_pairs},
                {"spectral_report", s.spectral_report}};
}

RunSpec run_spec_from_json(const Json& j, RunSpec s) {
    detail::check_keys(j, {"model", "data", "loss", "optim", "conflict_pairs", "spectral_report"}, "run");
    if (j.contains("model")) s.model = model_config_from_json(j.at("model"));
    if (j.contains("data")) s.data = template_from_json(j.at("data"));
    if (j.contains("loss")) {
        const Json& l = j.at("loss");
        detail::check_keys(l, {"lambda1", "lambda2", "uniform_reg"}, "loss");
        detail::read(l, "lambda1", s.loss.lambda1, "loss");
        detail::read(l, "lambda2", s.loss.lambda2, "loss");
        detail::read(l, "uniform_reg", s.loss.uniform_reg, "loss");
    }
    if (j.contains("optim")) {
        const Json& o = j.at("optim");
        detail::check_keys(o, {"lr", "momentum", "batch_size", "epochs"}, "optim");
        detail::read(o, "lr", s.optim.lr, "optim");
        detail::read(o, "momentum", s.optim.momentum, "optim");
        detail::read(o, "batch_size", s.optim.batch_size, "optim");
        detail::read(o, "epochs", s.optim.epochs, "optim");
    }
    detail::read(j, "conflict_pairs", s.conflict_pairs, "run");
    detail::read(j, "spectral_report", s.spectral_report, "run");
    return s;
}

void RunSpec::validate() const {
    data.validate(1);
    if (model.d != data.d || model.seq_len != data.seq_len || model.classes != data.classes) {
        throw ConfigError("model and data disagree on d, seq_len or classes");
    }
    model.validate();
    if (loss.lambda1 < 0.0 || loss.lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
    if (!(optim.lr > 0.0) || optim.momentum < 0.0 || optim.momentum >= 1.0 || optim.batch_size == 0) {
        throw ConfigError("optim: require lr > 0, 0 <= momentum < 1, batch_size > 0");
    }
}

namespace {

Json key_json(const CellKey& k) {
    return Json{{"n_tasks", k.n_tasks},
                {"lambda1", k.lambda1},
                {"groups", k.groups},
                {"attach_mode", adapters::to_string(k.attach)},
                {"composition", to_string(k.composition)},
                {"uniform_reg", k.uniform_reg}};
}

ModelConfig cell_model(const RunSpec& base, const CellKey& key) {
    ModelConfig cfg = base.model;
    cfg.n_tasks = key.n_tasks;
    cfg.attach_mode = key.attach;
    cfg.groups = key.composition == Composition::ScalarRouting ? 1 : key.groups;
    cfg.d = base.data.d;
    cfg.seq_len = base.data.seq_len;
    cfg.classes = base.data.classes;
    return cfg;
}

std::vector<Example> relabel(const std::vector<Example>& xs, std::size_t task) {
    std::vector<Example> out = xs;
    for (Example& e : out) e.task = task;
    return out;
}

}  // namespace

std::vector<spectral::Bank> banks_of(const Model& m) {
    std::vector<spectral::Bank> banks;
    for (std::size_t l = 0; l < m.params.sites.size(); ++l) {
        for (const auto& sp : m.params.sites[l]) {
            banks.push_back({l, std::string(model::to_string(sp.site)), &sp.experts});
        }
    }
    return banks;
}

Model train_single(const RunSpec& base, std::size_t t, std::uint64_t seed, const TaskData& task) {
    CellKey key;
    key.n_tasks = 1;
    key.groups = 1;
    key.attach = base.model.attach_mode;
    ModelConfig cfg = cell_model(base, key);
    cfg.attach_mode = base.model.attach_mode;
    cfg.train_a = false;  // experts must share A to be mergeable
    Model m = Model::create(cfg, seed);
    const std::vector<Example> train = relabel(task.train, 0);
    training::LossWeights w;  // no auxiliary losses with a single expert
    training::train(m, train, w, base.optim, numkit::splitmix64(seed ^ (0x51e6'0000 + t)));
    return m;
}

Model merge_naive(const RunSpec& base, const CellKey& key, std::uint64_t seed,
                  const std::vector<const Model*>& experts) {
    if (experts.size() != key.n_tasks) throw ConfigError("merge_naive: expert count != n_tasks");
    Model m = Model::create(cell_model(base, key), seed);
    m.routing = model::RoutingMode::Uniform;
    for (std::size_t t = 0; t < experts.size(); ++t) {
        const Model& e = *experts[t];
        if (e.params.sites.size() != m.params.sites.size()) throw ConfigError("merge_naive: layout mismatch");
        for (std::size_t l = 0; l < m.params.sites.size(); ++l) {
            if (e.params.sites[l].size() != m.params.sites[l].size()) {
                throw ConfigError("merge_naive: attach mode mismatch");
            }
            for (std::size_t k = 0; k < m.params.sites[l].size(); ++k) {
                auto& dst = m.params.sites[l][k].experts;
                const auto& src = e.params.sites[l][k].experts;
                if (!(src.a == dst.a)) throw ConfigError("merge_naive: experts do not share A");
                dst.b[t] = src.b[0];
            }
        }
        m.params.heads[t] = e.params.heads[0];
    }
    return m;
}

Model train_joint(const RunSpec& base, const CellKey& key, std::uint64_t seed,
                  const std::vector<TaskData>& tasks, std::vector<training::EpochLog>* logs) {
    if (tasks.size() < key.n_tasks) throw ConfigError("train_joint: not enough tasks");
    Model m = Model::create(cell_model(base, key), seed);
    switch (key.composition) {
        case Composition::UniformRouting: m.routing = model::RoutingMode::Uniform; break;
        case Composition::ScalarRouting:
        case Composition::FineGrained: m.routing = model::RoutingMode::Learned; break;
        default: throw ConfigError("train_joint: composition is not jointly trained");
    }
    std::vector<TaskData> used(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(key.n_tasks));
    const std::vector<Example> train = concat_train(used);
    training::LossWeights w = base.loss;
    w.lambda1 = key.lambda1;
    w.uniform_reg = key.uniform_reg;
    auto out = training::train(m, train, w, base.optim, numkit::splitmix64(seed ^ 0x101'7000));
    if (logs) *logs = std::move(out);
    return m;
}

class ExpertCache {
public:
    struct Slot {
        std::once_flag once;
        std::unique_ptr<Model> model;
        double val_accuracy = 0.0;
        std::exception_ptr error;
    };

    std::shared_ptr<Slot> slot(const std::string& key) {
        std::lock_guard lock(mu_);
        auto& s = slots_[key];
        if (!s) s = std::make_shared<Slot>();
        return s;
    }

private:
    std::mutex mu_;
    std::map<std::string, std::shared_ptr<Slot>> slots_;
};

namespace {

const ExpertCache::Slot& single_expert(const RunSpec& base, std::size_t t, std::uint64_t seed,
                                       const TaskData& task, ExpertCache* cache,
                                       std::shared_ptr<ExpertCache::Slot>& hold) {
    RunSpec norm = base;
    norm.loss = {};
    norm.conflict_pairs = 0;
    const std::string key = to_json(norm).dump() + "|" + std::to_string(seed) + "|" + std::to_string(t);
    hold = cache ? cache->slot(key) : std::make_shared<ExpertCache::Slot>();
    ExpertCache::Slot& s = *hold;
    std::call_once(s.once, [&] {
        try {
            s.model = std::make_unique<Model>(train_single(base, t, seed, task));
            const std::vector<Example> val = relabel(task.val, 0);
            s.val_accuracy = training::evaluate(*s.model, val).mean_accuracy;
        } catch (...) {
            s.error = std::current_exception();
        }
    });
    if (s.error) std::rethrow_exception(s.error);
    return s;
}

}  // namespace

CellResult run_cell(const RunSpec& base, const CellKey& key, std::uint64_t seed, ExpertCache* cache) {
    CellResult res;
    res.key = key;
    res.seed = seed;
    RunSpec spec = base;
    spec.model.attach_mode = key.attach;
    spec.loss.lambda1 = key.lambda1;
    spec.loss.uniform_reg = key.uniform_reg;

    diagnostics::ReportInputs in;
    in.config = {{"run", to_json(spec)}, {"cell", key_json(key)}};
    in.seed = seed;

    const std::vector<TaskData> tasks = gen_tasks(key.n_tasks, spec.data, seed);
    const std::vector<Example> val = concat_val(tasks);

    std::optional<Model> evaluated;
    if (key.composition == Composition::SingleTaskOracle || key.composition == Composition::NaiveAverage) {
        std::vector<std::shared_ptr<ExpertCache::Slot>> holds(key.n_tasks);
        std::vector<const Model*> experts;
        training::EvalResult oracle;
        oracle.accuracy.assign(key.n_tasks, 0.0);
        oracle.count.assign(key.n_tasks, 0);
        for (std::size_t t = 0; t < key.n_tasks; ++t) {
            const auto& s = single_expert(spec, t, seed, tasks[t], cache, holds[t]);
            experts.push_back(s.model.get());
            oracle.accuracy[t] = s.val_accuracy;
            oracle.count[t] = tasks[t].val.size();
            oracle.mean_accuracy += s.val_accuracy / static_cast<double>(key.n_tasks);
        }
        if (key.composition == Composition::SingleTaskOracle) {
            in.eval = oracle;
        } else {
            evaluated = merge_naive(spec, key, seed, experts);
        }
    } else {
        evaluated = train_joint(spec, key, seed, tasks, &in.epochs);
    }

    if (evaluated) {
        in.eval = training::evaluate(*evaluated, val);
        if (spec.spectral_report && key.n_tasks >= 2) {
            const auto banks = banks_of(*evaluated);
            in.spectral = spectral::analyze_banks(banks);
            for (const auto& b : in.spectral->bands) res.band_alignment.push_back(b.alignment);
        }
        if (spec.conflict_pairs > 0 && key.n_tasks >= 2) {
            numkit::Rng rng = numkit::Rng(seed).derive(0xc0f1);
            in.conflict = diagnostics::conflict_score(
                *evaluated, diagnostics::group_by_task(concat_train(tasks), key.n_tasks),
                spec.conflict_pairs, rng);
            res.conflict_score = in.conflict->score;
        }
    }
    res.mean_accuracy = in.eval->mean_accuracy;
    res.mean_entropy = in.eval->mean_entropy;
    const Model& for_report = evaluated ? *evaluated : Model::create(cell_model(spec, key), seed);
    res.report = diagnostics::run_report(for_report, in);
    res.ok = true;
    return res;
}

Json to_json(const CellResult& r) {
    Json j{{"key", key_json(r.key)},
           {"seed", r.seed},
           {"ok", r.ok},
           {"mean_accuracy", r.mean_accuracy},
           {"mean_entropy", r.mean_entropy},
           {"band_alignment", r.band_alignment}};
    if (!r.error.empty()) j["error"] = r.error;
    if (r.conflict_score) j["conflict_score"] = *r.conflict_score;
    if (!r.report.is_null()) j["report"] = r.report;
    return j;
}

CellResult cell_result_from_json(const Json& j) {
    CellResult r;
    try {
        const Json& k = j.at("key");
        r.key.n_tasks = k.at("n_tasks").get<std::size_t>();
        r.key.lambda1 = k.at("lambda1").get<double>();
        r.key.groups = k.at("groups").get<std::size_t>();
        r.key.attach = adapters::parse_attach_mode(k.at("attach_mode").get<std::string>());
        r.key.composition = parse_composition(k.at("composition").get<std::string>());
        r.key.uniform_reg = k.at("uniform_reg").get<bool>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.ok = j.at("ok").get<bool>();
        r.mean_accuracy = j.at("mean_accuracy").get<double>();
        r.mean_entropy = j.at("mean_entropy").get<double>();
        r.band_alignment = j.at("band_alignment").get<Vector>();
        r.error = j.value("error", "");
        if (j.contains("conflict_score")) r.conflict_score = j.at("conflict_score").get<double>();
        if (j.contains("report")) r.report = j.at("report");
    } catch (const Json::exception& e) {
        throw DataError(std::string("run record: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("run record: ") + e.what());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Grids

void ExperimentGrid::validate() const {
    if (n_tasks.empty() || lambda1.empty() || groups.empty() || attach.empty() || composition.empty() ||
        uniform_reg.empty() || seeds.empty()) {
        throw ConfigError("grid: every axis needs at least one value");
    }
    for (double l : lambda1)
        if (!(l >= 0.0)) throw ConfigError("grid: lambda1 values must be non-negative");
    for (std::size_t n : n_tasks)
        if (n == 0) throw ConfigError("grid: n_tasks values must be positive");
    for (std::size_t g : groups)
        if (g == 0) throw ConfigError("grid: groups values must be positive");
}

std::vector<CellKey> ExperimentGrid::cells() const {
    std::vector<CellKey> out;
    for (Composition c : composition)
        for (adapters::AttachMode a : attach)
            for (std::size_t g : groups)
                for (bool u : uniform_reg)
                    for (double l : lambda1)
                        for (std::size_t n : n_tasks) out.push_back({n, l, g, a, c, u});
    return out;
}

GridResult run_grid(const RunSpec& base, const ExperimentGrid& grid, std::size_t workers,
                    const GridLogger& log) {
    grid.validate();
    GridResult result;
    std::vector<std::uint64_t> seeds;
    std::set<std::uint64_t> seen;
    for (std::uint64_t s : grid.seeds) {
        if (seen.insert(s).second) {
            seeds.push_back(s);
        } else {
            result.warnings.push_back("duplicate seed " + std::to_string(s) + " ignored");
        }
    }
    std::mutex log_mu;
    auto say = [&](const std::string& msg) {
        if (!log) return;
        std::lock_guard lock(log_mu);
        log(msg);
    };
    for (const auto& w : result.warnings) say("warning: " + w);

    const std::vector<CellKey> cells = grid.cells();
    std::vector<std::pair<CellKey, std::uint64_t>> jobs;
    for (const CellKey& c : cells)
        for (std::uint64_t s : seeds) jobs.emplace_back(c, s);
    result.runs.resize(jobs.size());

    ExpertCache cache;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const auto& [key, seed] = jobs[i];
            CellResult r;
            try {
                r = run_cell(base, key, seed, &cache);
                say(key.label() + " seed=" + std::to_string(seed) + " acc=" + std::to_string(r.mean_accuracy));
            } catch (const std::exception& e) {
                r.key = key;
                r.seed = seed;
                r.ok = false;
                r.error = e.what();
                say(key.label() + " seed=" + std::to_string(seed) + " FAILED: " + e.what());
            }
            result.runs[i] = std::move(r);
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, jobs.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (const auto& r : result.runs)
        if (!r.ok) ++result.failures;
    return result;
}

namespace {

void mean_std(const Vector& xs, double& mean, double& sd) {
    mean = 0.0;
    sd = 0.0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(sd / static_cast<double>(xs.size() - 1)) : 0.0;
}

bool same_except_lambda(const CellKey& a, const CellKey& b) {
    return a.n_tasks == b.n_tasks && a.groups == b.groups && a.attach == b.attach &&
           a.composition == b.composition && a.uniform_reg == b.uniform_reg;
}

spectral::SpectralReport spectra_of(const Json& report) {
    spectral::SpectralReport rep;
    if (!report.contains("spectral")) return rep;
    for (const auto& e : report.at("spectral").at("experts")) {
        rep.spectra.push_back({e.at("layer").get<std::size_t>(), e.at("site").get<std::string>(),
                               e.at("expert").get<std::size_t>(), e.at("sigmas").get<Vector>()});
    }
    return rep;
}

}  // namespace

std::string aggregate_csv(const GridResult& result) {
    // Cells in first-appearance order.
    std::vector<CellKey> order;
    for (const auto& r : result.runs) {
        const bool known = std::any_of(order.begin(), order.end(), [&](const CellKey& k) {
            return k.label() == r.key.label();
        });
        if (!known) order.push_back(r.key);
    }
    const auto bands = spectral::default_bands();
    std::ostringstream os;
    os.precision(10);
    os << "n_tasks,lambda1,groups,attach_mode,composition,uniform_reg,seeds,failed,"
          "accuracy_mean,accuracy_std,entropy_mean,entropy_std,conflict_mean,conflict_std";
    for (const auto& b : bands) os << ",align_" << b.name << "_mean";
    for (const auto& b : bands) os << ",sigma_delta_" << b.name << "_mean";
    os << '\n';
    for (const CellKey& key : order) {
        Vector acc, ent, conf;
        std::vector<Vector> align(bands.size()), delta(bands.size());
        std::size_t seeds = 0, failed = 0;
        for (const auto& r : result.runs) {
            if (r.key.label() != key.label()) continue;
            ++seeds;
            if (!r.ok) {
                ++failed;
                continue;
            }
            acc.push_back(r.mean_accuracy);
            ent.push_back(r.mean_entropy);
            if (r.conflict_score) conf.push_back(*r.conflict_score);
            for (std::size_t b = 0; b < r.band_alignment.size() && b < bands.size(); ++b) {
                align[b].push_back(r.band_alignment[b]);
            }
            // σ change relative to the λ₁ = 0 run of the same cell and seed.
            if (key.lambda1 > 0.0) {
                for (const auto& ref : result.runs) {
                    if (!ref.ok || ref.seed != r.seed || ref.key.lambda1 != 0.0 ||
                        !same_except_lambda(ref.key, key)) {
                        continue;
                    }
                    const auto before = spectra_of(ref.report);
                    const auto after = spectra_of(r.report);
                    if (before.spectra.empty() || before.spectra.size() != after.spectra.size()) break;
                    const auto sup = spectral::suppression_report(before, after, bands);
                    for (std::size_t b = 0; b < bands.size(); ++b) {
                        delta[b].push_back(sup.bands[b].suppression.value_or(0.0));
                    }
                    break;
                }
            }
        }
        double m = 0.0, s = 0.0;
        os << key.n_tasks << ',' << key.lambda1 << ',' << key.groups << ',' << adapters::to_string(key.attach)
           << ',' << to_string(key.composition) << ',' << (key.uniform_reg ? 1 : 0) << ',' << seeds << ','
           << failed;
        for (const Vector* v : {&acc, &ent, &conf}) {
            if (v->empty()) {
                os << ",,";
                continue;
            }
            mean_std(*v, m, s);
            os << ',' << m << ',' << s;
        }
        for (const auto* group : {&align, &delta}) {
            for (const Vector& v : *group) {
                os << ',';
                if (!v.empty()) {
                    mean_std(v, m, s);
                    os << m;
                }
            }
        }
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Presets

RunSpec preset_spec(std::string_view name) {
    RunSpec s;
    s.model.train_heads = false;
    s.model.train_a = true;
    s.model.groups = 8;
    s.loss.lambda2 = 0.01;
    s.optim.lr = 0.03;
    s.optim.epochs = 40;
    s.optim.batch_size = 16;
    if (name == "attach-level") s.conflict_pairs = 200;
    return s;
}

ExperimentGrid preset_grid(std::string_view name) {
    ExperimentGrid g;
    g.seeds = {1, 2, 3};
    if (name == "collapse") {
        g.n_tasks = {2, 4, 8, 16};
        g.groups = {8};
        g.composition = {Composition::SingleTaskOracle, Composition::NaiveAverage, Composition::FineGrained};
    } else if (name == "lambda-sweep") {
        g.n_tasks = {8};
        g.groups = {8};
        g.lambda1 = {0.0, 0.25, 0.5, 1.0};
        g.uniform_reg = {true, false};
    } else if (name == "granularity") {
        g.n_tasks = {8};
        g.groups = {1, 2, 4, 8, 16, 32};
    } else if (name == "attach-level") {
        g.n_tasks = {8};
        g.groups = {8};
        g.attach = {adapters::AttachMode::BlockAttn, adapters::AttachMode::BlockFfn,
                    adapters::AttachMode::BlockBoth, adapters::AttachMode::ComponentQV};
    } else {
        throw ConfigError("unknown grid preset '" + std::string(name) + "'");
    }
    return g;
}

Json to_json(const ExperimentGrid& g) {
    Json attach = Json::array();
    for (auto a : g.attach) attach.push_back(adapters::to_string(a));
    Json comp = Json::array();
    for (auto c : g.composition) comp.push_back(to_string(c));
    return Json{{"n_tasks", g.n_tasks},         {"lambda1", g.lambda1},   {"groups", g.groups},
                {"attach_mode", attach},       {"composition", comp},    {"uniform_reg", g.uniform_reg},
                {"seeds", g.seeds}};
}

ExperimentGrid grid_from_json(const Json& j) {
    detail::check_keys(j, {"n_tasks", "lambda1", "groups", "attach_mode", "composition", "uniform_reg", "seeds"},
                       "grid");
    ExperimentGrid g;
    try {
        if (j.contains("n_tasks")) g.n_tasks = j.at("n_tasks").get<std::vector<std::size_t>>();
        if (j.contains("lambda1")) g.lambda1 = j.at("lambda1").get<std::vector<double>>();
        if (j.contains("groups")) g.groups = j.at("groups").get<std::vector<std::size_t>>();
        if (j.contains("uniform_reg")) g.uniform_reg = j.at("uniform_reg").get<std::vector<bool>>();
        if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("attach_mode")) {
            g.attach.clear();
            for (const auto& a : j.at("attach_mode")) g.attach.push_back(adapters::parse_attach_mode(a.get<std::string>()));
        }
        if (j.contains("composition")) {
            g.composition.clear();
            for (const auto& c : j.at("composition")) g.composition.push_back(parse_composition(c.get<std::string>()));
        }
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
    g.validate();
    return g;
}

}  // namespace mtlora::bench
