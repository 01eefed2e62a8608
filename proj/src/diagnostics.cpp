// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//

#include "mtlora/diagnostics.hpp"

#include <cmath>
#include <sstream>

#include "mtlora/errors.hpp"

namespace mtlora::diagnostics {

TaskExamples group_by_task(std::span<const Example> data, std::size_t n_tasks) {
    TaskExamples out(n_tasks);
    for (const Example& ex : data) {
        if (ex.task >= n_tasks) throw DomainError("group_by_task: task id out of range");
        out[ex.task].push_back(ex);
    }
    return out;
}

void ConflictReport::validate(std::size_t layers) const {
    if (per_layer.size() != layers) {
        throw ShapeError("conflict report: per-layer table has " + std::to_string(per_layer.size()) +
                         " rows, model has " + std::to_string(layers) + " layers");
    }
}

namespace {

/// Per-layer flattened gradients for one datum.
std::vector<Vector> layer_gradients(const Model& model, const Example& ex, GradientScope scope) {
    model::ForwardTrace trace;
    const Vector logits = model::forward(model, ex.tokens, ex.task, &trace);
    const model::CrossEntropy ce = model::cross_entropy(logits, ex.label);
    const model::GradBundle g = model::backward(model, trace, ce.d_logits);

    std::vector<Vector> out(model.cfg.layers);
    model::visit_tensors(g.grads, [&](const model::TensorRef& t) {
        const bool router = t.kind == model::TensorKind::RouterW1 ||
                            t.kind == model::TensorKind::RouterB1 ||
                            t.kind == model::TensorKind::RouterW2 ||
                            t.kind == model::TensorKind::RouterB2;
        if (t.kind == model::TensorKind::B || (router && scope.include_router)) {
            out[t.layer].insert(out[t.layer].end(), t.data.begin(), t.data.end());
        }
    });
    return out;
}

Vector concat(const std::vector<Vector>& parts) {
    Vector out;
    for (const Vector& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

bool is_zero(const Vector& v) {
    for (double x : v)
        if (x != 0.0) return false;
    return true;
}

void mean_std(const Vector& xs, double& mean, double& sd) {
    mean = 0.0;
    sd = 0.0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(xs.size()));
}

void check_tasks(const TaskExamples& data, const Model& model) {
    if (data.size() < 2) throw DomainError("conflict analysis needs at least two tasks");
    if (data.size() > model.cfg.n_tasks) throw DomainError("more task groups than model tasks");
    for (std::size_t t = 0; t < data.size(); ++t) {
        if (data[t].empty()) throw DomainError("task " + std::to_string(t) + " has no data");
    }
}

}  // namespace

Vector datum_gradient(const Model& model, const Example& ex, std::optional<std::size_t> layer,
                      GradientScope scope) {
    std::vector<Vector> parts = layer_gradients(model, ex, scope);
    if (layer) {
        if (*layer >= parts.size()) throw IndexError("datum_gradient: layer out of range");
        return std::move(parts[*layer]);
    }
    return concat(parts);
}

ConflictReport conflict_score(const Model& model, const TaskExamples& data, std::size_t pairs,
                              numkit::Rng& rng, GradientScope scope) {
    check_tasks(data, model);
    if (pairs == 0) throw DomainError("conflict_score: pairs must be positive");
    const std::size_t layers = model.cfg.layers;

    ConflictReport rep;
    rep.attach_mode = std::string(adapters::to_string(model.cfg.attach_mode));
    Vector cosines;
    std::vector<Vector> layer_cos(layers);
    for (std::size_t p = 0; p < pairs; ++p) {
        const std::size_t t1 = rng.index(data.size());
        std::size_t t2 = rng.index(data.size() - 1);
        if (t2 >= t1) ++t2;
        const Example& e1 = data[t1][rng.index(data[t1].size())];
        const Example& e2 = data[t2][rng.index(data[t2].size())];
        const std::vector<Vector> g1 = layer_gradients(model, e1, scope);
        const std::vector<Vector> g2 = layer_gradients(model, e2, scope);
        const Vector f1 = concat(g1);
        const Vector f2 = concat(g2);
        if (is_zero(f1) || is_zero(f2)) ++rep.zero_gradient;
        cosines.push_back(numkit::cosine(f1, f2));
        for (std::size_t l = 0; l < layers; ++l) layer_cos[l].push_back(numkit::cosine(g1[l], g2[l]));
    }
    rep.samples = pairs;
    mean_std(cosines, rep.mean_cos, rep.std_cos);
    rep.score = -rep.mean_cos;
    for (std::size_t l = 0; l < layers; ++l) {
        LayerCosine row{l, 0.0, 0.0};
        mean_std(layer_cos[l], row.mean_cos, row.std_cos);
        rep.per_layer.push_back(row);
    }
    return rep;
}

std::vector<LayerCosine> per_layer_correlation(const Model& model, const TaskExamples& data,
                                               std::size_t samples_per_task, numkit::Rng& rng) {
    check_tasks(data, model);
    if (samples_per_task == 0) throw DomainError("per_layer_correlation: samples must be positive");
    const std::size_t layers = model.cfg.layers;
    std::vector<std::vector<Vector>> task_grad(data.size());  // [task][layer]
    for (std::size_t t = 0; t < data.size(); ++t) {
        for (std::size_t s = 0; s < samples_per_task; ++s) {
            const Example& ex = data[t][rng.index(data[t].size())];
            std::vector<Vector> g = layer_gradients(model, ex, {});
            if (task_grad[t].empty()) {
                task_grad[t] = std::move(g);
                continue;
            }
            for (std::size_t l = 0; l < layers; ++l)
                for (std::size_t i = 0; i < g[l].size(); ++i) task_grad[t][l][i] += g[l][i];
        }
    }
    std::vector<LayerCosine> out;
    for (std::size_t l = 0; l < layers; ++l) {
        Vector cs;
        for (std::size_t i = 0; i < data.size(); ++i)
            for (std::size_t j = 0; j < data.size(); ++j)
                if (i != j) cs.push_back(numkit::cosine(task_grad[i][l], task_grad[j][l]));
        LayerCosine row{l, 0.0, 0.0};
        mean_std(cs, row.mean_cos, row.std_cos);
        out.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

Json bands_json(const std::vector<spectral::BandRow>& rows, bool suppression) {
    Json out = Json::array();
    for (const auto& r : rows) {
        Json row{{"name", r.name}, {"lo", r.lo}, {"hi", r.hi}};
        if (suppression) {
            row["relative_change"] = r.suppression.value_or(0.0);
        } else {
            row["mass"] = r.mass;
            row["alignment"] = r.alignment;
        }
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace

Json run_report(const Model& model, const ReportInputs& in) {
    Json doc;
    doc["report_version"] = kReportVersion;
    doc["config"] = in.config;
    doc["seed"] = in.seed;

    if (in.eval) {
        const training::EvalResult& ev = *in.eval;
        doc["accuracy"] = {{"per_task", ev.accuracy}, {"count", ev.count}, {"mean", ev.mean_accuracy}};
        Json sites = Json::array();
        for (std::size_t l = 0; l < ev.routing.size(); ++l) {
            for (std::size_t k = 0; k < ev.routing[l].size(); ++k) {
                const routing::RoutingStats& st = ev.routing[l][k];
                if (st.samples() == 0) continue;
                sites.push_back({{"layer", l},
                                 {"site", model::to_string(model.params.sites[l][k].site)},
                                 {"mean_usage", st.mean_usage()},
                                 {"mean_entropy", st.mean_entropy()},
                                 {"entropy_histogram", st.entropy_histogram(32)}});
            }
        }
        if (!sites.empty()) {
            doc["routing"] = {{"mode", model::to_string(model.routing)},
                              {"balance_loss_form", "squared-deviation-from-uniform"},
                              {"mean_entropy", ev.mean_entropy},
                              {"sites", std::move(sites)}};
        }
    }
    if (!in.epochs.empty()) {
        Json epochs = Json::array();
        for (const auto& e : in.epochs) {
            epochs.push_back({{"epoch", e.epoch},
                              {"task", e.loss.task},
                              {"spectral", e.loss.spectral},
                              {"balance", e.loss.balance}});
        }
        doc["training"] = std::move(epochs);
    }
    if (in.spectral) {
        Json experts = Json::array();
        for (const auto& s : in.spectral->spectra) {
            experts.push_back({{"layer", s.layer}, {"site", s.site}, {"expert", s.expert}, {"sigmas", s.sigmas}});
        }
        doc["spectral"] = {{"experts", std::move(experts)}, {"bands", bands_json(in.spectral->bands, false)}};
    }
    if (in.suppression) {
        doc["suppression"] = {{"bands", bands_json(in.suppression->bands, true)},
                              {"excluded", in.suppression->excluded}};
    }
    if (in.conflict) {
        const ConflictReport& c = *in.conflict;
        Json layers = Json::array();
        for (const auto& r : c.per_layer) {
            layers.push_back({{"layer", r.layer}, {"mean_cos", r.mean_cos}, {"std_cos", r.std_cos}});
        }
        doc["conflict"] = {{"metric", "expected negative cosine of B-gradients"},
                           {"samples", c.samples},
                           {"mean_cos", c.mean_cos},
                           {"std_cos", c.std_cos},
                           {"score", c.score},
                           {"zero_gradient", c.zero_gradient},
                           {"attach_mode", c.attach_mode},
                           {"per_layer", std::move(layers)}};
    }
    if (in.extra && !in.extra->is_null()) doc["extra"] = *in.extra;
    return doc;
}

std::string dump(const Json& doc) { return doc.dump(2) + "\n"; }

std::string per_layer_csv(const ConflictReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "layer,mode,mean_cos,std\n";
    for (const auto& r : report.per_layer) {
        os << r.layer << ',' << report.attach_mode << ',' << r.mean_cos << ',' << r.std_cos << '\n';
    }
    return os.str();
}

}  // namespace mtlora::diagnostics
