// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json_util.hpp"
#include "mtlora/errors.hpp"

namespace mtlora::io {

// ---------------------------------------------------------------------------
// Run configuration

model::ModelConfig RunConfig::model_config() const {
    model::ModelConfig cfg = spec.model;
    cfg.n_tasks = n_tasks;
    return cfg;
}

void RunConfig::validate() const {
    spec.validate();
    spec.data.validate(n_tasks);
    model_config().validate();
    if (workers == 0) throw ConfigError("workers must be positive");
    if (grid) grid->validate();
    if (!preset.empty()) (void)bench::preset_grid(preset);
}

Json RunConfig::to_json() const {
    Json doc = bench::to_json(spec);
    doc["n_tasks"] = n_tasks;
    doc["seed"] = seed;
    doc["routing"] = model::to_string(routing);
    doc["workers"] = workers;
    Json paths = Json::object();
    if (!data_dir.empty()) paths["data"] = data_dir;
    if (!out_dir.empty()) paths["out"] = out_dir;
    if (!paths.empty()) doc["paths"] = paths;
    if (grid) doc["grid"] = bench::to_json(*grid);
    if (!preset.empty()) doc["preset"] = preset;
    return doc;
}

RunConfig parse_run_config(const Json& doc) {
    detail::check_keys(doc, {"model", "data", "loss", "optim", "conflict_pairs", "spectral_report", "n_tasks",
                             "seed", "routing", "workers", "paths", "grid", "preset"},
                       "config");
    RunConfig rc;
    Json spec_part = Json::object();
    for (const char* k : {"model", "data", "loss", "optim", "conflict_pairs", "spectral_report"}) {
        if (doc.contains(k)) spec_part[k] = doc.at(k);
    }
    rc.spec = bench::run_spec_from_json(spec_part);
    // Data dimensions default to the model's.
    const Json data = doc.value("data", Json::object());
    if (!data.contains("d")) rc.spec.data.d = rc.spec.model.d;
    if (!data.contains("seq_len")) rc.spec.data.seq_len = rc.spec.model.seq_len;
    if (!data.contains("classes")) rc.spec.data.classes = rc.spec.model.classes;

    detail::read(doc, "n_tasks", rc.n_tasks, "config");
    detail::read(doc, "seed", rc.seed, "config");
    detail::read(doc, "workers", rc.workers, "config");
    std::string routing(model::to_string(rc.routing));
    detail::read(doc, "routing", routing, "config");
    rc.routing = model::parse_routing_mode(routing);
    if (doc.contains("paths")) {
        const Json& p = doc.at("paths");
        detail::check_keys(p, {"data", "out"}, "paths");
        detail::read(p, "data", rc.data_dir, "paths");
        detail::read(p, "out", rc.out_dir, "paths");
    }
    if (doc.contains("grid")) rc.grid = bench::grid_from_json(doc.at("grid"));
    detail::read(doc, "preset", rc.preset, "config");
    rc.validate();
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
    Json doc;
    try {
        doc = Json::parse(is);
    } catch (const Json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    return parse_run_config(doc);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'M', 'T', 'L', 'R'};

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    const char* take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint16_t u16() {
        const auto* p = reinterpret_cast<const unsigned char*>(take(2));
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        const auto* p = reinterpret_cast<const unsigned char*>(take(4));
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        return v;
    }
    bool done() const noexcept { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

Json header_of(const model::Model& m, std::size_t epoch, const Json& metrics) {
    const model::ModelConfig& c = m.cfg;
    Json h{{"format", "mtlora-checkpoint"},
           {"model", bench::to_json(c)},
           {"n_tasks", c.n_tasks},
           {"rank", c.rank},
           {"groups", c.groups},
           {"attach_mode", adapters::to_string(c.attach_mode)},
           {"routing", model::to_string(m.routing)},
           {"seed", m.seed},
           {"epoch", epoch}};
    if (!metrics.is_null()) h["metrics"] = metrics;
    return h;
}

}  // namespace

std::string encode_checkpoint(const model::Model& m, std::size_t epoch, const Json& metrics) {
    std::string out(kMagic, 4);
    put_u16(out, kCheckpointVersion);
    const std::string header = header_of(m, epoch, metrics).dump();
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;

    std::string body;
    std::uint32_t count = 0;
    model::visit_tensors(m.params, [&](const model::TensorRef& t) {
        put_u32(body, static_cast<std::uint32_t>(t.name.size()));
        body += t.name;
        put_u32(body, static_cast<std::uint32_t>(t.rows));
        put_u32(body, static_cast<std::uint32_t>(t.cols));
        for (double v : t.data) {
            if (!std::isfinite(v)) throw NumericError("checkpoint: tensor " + t.name + " is not finite");
            put_u32(body, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
        ++count;
    });
    put_u32(out, count);
    out += body;
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(4), kMagic, 4) != 0) throw DataError("not a checkpoint (bad magic)");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t hlen = r.u32();
    const char* hp = r.take(hlen);
    Json h;
    model::ModelConfig cfg;
    Checkpoint ck;
    try {
        h = Json::parse(std::string(hp, hlen));
        cfg = bench::model_config_from_json(h.at("model"));
        cfg.n_tasks = h.at("n_tasks").get<std::size_t>();
        ck.epoch = h.at("epoch").get<std::size_t>();
        ck.model = model::Model::create(cfg, h.at("seed").get<std::uint64_t>());
        ck.model.routing = model::parse_routing_mode(h.at("routing").get<std::string>());
        if (h.contains("metrics")) ck.metrics = h.at("metrics");
    } catch (const Json::exception& e) {
        throw DataError(std::string("checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint header: ") + e.what());
    }
    if (h.at("rank").get<std::size_t>() != cfg.rank || h.at("groups").get<std::size_t>() != cfg.groups ||
        h.at("attach_mode").get<std::string>() != adapters::to_string(cfg.attach_mode)) {
        throw DataError("checkpoint header: summary fields disagree with the model section");
    }

    const std::uint32_t count = r.u32();
    std::uint32_t seen = 0;
    model::visit_tensors(ck.model.params, [&](const model::TensorRef& t) {
        if (seen++ >= count) throw DataError("checkpoint: missing tensor " + t.name);
        const std::uint32_t nlen = r.u32();
        const std::string name(r.take(nlen), nlen);
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        if (name != t.name) throw DataError("checkpoint: expected tensor " + t.name + ", found " + name);
        if (rows != t.rows || cols != t.cols) {
            throw DataError("checkpoint: tensor " + name + " has shape " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", header implies " + std::to_string(t.rows) + "x" +
                            std::to_string(t.cols));
        }
        for (double& v : t.data) v = static_cast<double>(std::bit_cast<float>(r.u32()));
    });
    if (seen != count || !r.done()) throw DataError("checkpoint: unexpected trailing segments");
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const model::Model& m, std::size_t epoch,
                     const Json& metrics) {
    write_file(path, encode_checkpoint(m, epoch, metrics));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint '" + path.string() + "'");
    return decode_checkpoint(read_file(path));
}

void round_to_f32(model::Model& m) {
    model::visit_tensors(m.params, [](const model::TensorRef& t) {
        for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
    });
}

void require_compatible(const model::Model& a, const model::Model& b) {
    const auto& x = a.cfg;
    const auto& y = b.cfg;
    if (x.d != y.d || x.layers != y.layers || x.heads != y.heads || x.seq_len != y.seq_len ||
        x.n_tasks != y.n_tasks || x.classes != y.classes || x.rank != y.rank || x.groups != y.groups ||
        x.attach_mode != y.attach_mode) {
        throw DataError("checkpoints are incompatible (dimensions or attach mode differ)");
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw ConfigError("cannot create directory for '" + path.string() + "': " + ec.message());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open '" + path.string() + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ConfigError("write to '" + path.string() + "' failed");
}

}  // namespace mtlora::io
