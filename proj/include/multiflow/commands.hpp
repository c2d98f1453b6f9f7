// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Subcommand bodies shared by the CLI and the tests. Each returns normally on
// success and throws ValidationError / FormatError otherwise.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "multiflow/budgeting.hpp"
#include "multiflow/calibration.hpp"
#include "multiflow/errors.hpp"
#include "multiflow/masking.hpp"
#include "multiflow/modelspec.hpp"
#include "multiflow/pipeline.hpp"
#include "multiflow/scoring.hpp"
#include "multiflow/tensorstore.hpp"
#include "multiflow/toybench/experiment.hpp"

namespace multiflow {

namespace fs = std::filesystem;

struct RunConfig {
    fs::path checkpoint;
    fs::path model_spec;
    fs::path stats;
    fs::path mask;
    std::vector<fs::path> masks;  // report inputs
    fs::path out;
    fs::path report;        // prune: sparsity report CSV (default <out>.report.csv)
    fs::path budgets_out;   // prune: optional budget plan JSON
    fs::path json_out;      // report: optional JSON alongside the CSV
    Criterion criterion = Criterion::multiflow;
    BudgetPolicy policy = BudgetPolicy::multimodal_magnitude;
    double sparsity = 0.0;
    bool invert = false;
    std::uint64_t seed = 0;

    // calibrate
    std::size_t batches = 3000;
    std::size_t batch_size = 32;
    std::optional<std::uint64_t> world_seed;

    // toybench
    std::vector<std::string> methods = {"multiflow", "random", "multiflow_invert"};
    std::vector<double> sparsities = {0.75};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::size_t steps = 2000;
    std::size_t pretrain_steps = 2000;
    fs::path out_dir = "toybench_out";
};

namespace detail {

template <class T>
T json_get(const nlohmann::json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("config key '" + key + "' has the wrong type");
    }
}

}  // namespace detail

/// Overrides fields of `cfg` from a JSON object. Keys are flag names with
/// '-' or '_' separators; unknown keys are rejected.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
    using detail::json_get;
    if (!j.is_object()) throw ValidationError("config file must hold a JSON object");
    for (const auto& [raw, v] : j.items()) {
        std::string key = raw;
        std::replace(key.begin(), key.end(), '-', '_');
        if (key == "checkpoint") cfg.checkpoint = json_get<std::string>(v, raw);
        else if (key == "model_spec") cfg.model_spec = json_get<std::string>(v, raw);
        else if (key == "stats") cfg.stats = json_get<std::string>(v, raw);
        else if (key == "mask") cfg.mask = json_get<std::string>(v, raw);
        else if (key == "masks") {
            cfg.masks.clear();
            for (const auto& p : json_get<std::vector<std::string>>(v, raw)) cfg.masks.emplace_back(p);
        } else if (key == "out") cfg.out = json_get<std::string>(v, raw);
        else if (key == "report") cfg.report = json_get<std::string>(v, raw);
        else if (key == "budgets_out") cfg.budgets_out = json_get<std::string>(v, raw);
        else if (key == "json_out") cfg.json_out = json_get<std::string>(v, raw);
        else if (key == "criterion") cfg.criterion = parse_criterion(json_get<std::string>(v, raw));
        else if (key == "policy") cfg.policy = parse_policy(json_get<std::string>(v, raw));
        else if (key == "sparsity") cfg.sparsity = json_get<double>(v, raw);
        else if (key == "invert") cfg.invert = json_get<bool>(v, raw);
        else if (key == "seed") cfg.seed = json_get<std::uint64_t>(v, raw);
        else if (key == "batches") cfg.batches = json_get<std::size_t>(v, raw);
        else if (key == "batch_size") cfg.batch_size = json_get<std::size_t>(v, raw);
        else if (key == "world_seed") cfg.world_seed = json_get<std::uint64_t>(v, raw);
        else if (key == "methods") cfg.methods = json_get<std::vector<std::string>>(v, raw);
        else if (key == "sparsities") cfg.sparsities = json_get<std::vector<double>>(v, raw);
        else if (key == "seeds") cfg.seeds = json_get<std::vector<std::uint64_t>>(v, raw);
        else if (key == "steps") cfg.steps = json_get<std::size_t>(v, raw);
        else if (key == "pretrain_steps") cfg.pretrain_steps = json_get<std::size_t>(v, raw);
        else if (key == "out_dir") cfg.out_dir = json_get<std::string>(v, raw);
        else throw ValidationError("unknown config key '" + raw + "'");
    }
}

inline nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed JSON: " + e.what());
    }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    out.flush();
    if (!out) throw FormatError("cannot write " + path.string());
}

inline void require_path(const fs::path& p, const char* flag) {
    if (p.empty()) throw ValidationError(std::string("missing required option ") + flag);
}

// ---------------------------------------------------------------------------

/// Calibration runs the toy forward engine, so only toy checkpoints qualify.
inline ActivationStats cmd_calibrate(const RunConfig& cfg, std::ostream& log = std::cout) {
    require_path(cfg.checkpoint, "--checkpoint");
    require_path(cfg.model_spec, "--model-spec");
    require_path(cfg.out, "--out");
    if (cfg.batches == 0) throw ValidationError("no calibration data");
    if (cfg.batch_size == 0) throw ValidationError("batch size must be positive");
    const auto checkpoint = read_container(cfg.checkpoint);
    const auto model = load_model_spec(read_json_file(cfg.model_spec), checkpoint);
    const auto toy_model = toy::ToyVLM<float>::from_tensors(checkpoint);

    std::uint64_t world_seed = 0;
    if (cfg.world_seed) {
        world_seed = *cfg.world_seed;
    } else if (auto it = checkpoint.metadata.find("world_seed"); it != checkpoint.metadata.end()) {
        try {
            world_seed = std::stoull(it->second);
        } catch (const std::exception&) {
            throw FormatError("invalid world_seed metadata '" + it->second + "'");
        }
    } else {
        throw ValidationError("checkpoint has no world_seed metadata; pass --world-seed");
    }

    const toy::SyntheticPairSet data(world_seed, toy_model.config.d_in);
    auto rng = detail::seeded_engine({cfg.seed, toy::tags::kCalibration});
    // Stream the batches; 3000 x 32 pairs are never held at once.
    toy::check_toy_layers(model);
    NormAccumulator acc(model);
    for (std::size_t b = 0; b < cfg.batches; ++b) {
        const auto batch = data.sample<float>(rng, cfg.batch_size);
        for (const auto& [name, a] : toy::layer_inputs(toy_model, batch))
            if (model.find(name)) acc.accumulate(name, a.view());
    }
    acc.pool_tied(model);
    auto stats = acc.finalize(toy::toy_stats_digest(world_seed, cfg.seed, cfg.batches, cfg.batch_size));
    write_stats(stats, cfg.out);
    log << "token_count " << stats.token_count << "\n";
    return stats;
}

inline PruneOutcome cmd_prune(const RunConfig& cfg, std::ostream& log = std::cout) {
    require_path(cfg.checkpoint, "--checkpoint");
    require_path(cfg.model_spec, "--model-spec");
    require_path(cfg.out, "--out");
    const auto checkpoint = read_container(cfg.checkpoint);
    const auto model = load_model_spec(read_json_file(cfg.model_spec), checkpoint);
    std::optional<ActivationStats> stats;
    if (!cfg.stats.empty()) stats = read_stats(cfg.stats);
    if (needs_stats(cfg.criterion) && !stats)
        throw ValidationError("criterion " + std::string(to_string(cfg.criterion)) + " needs --stats");

    PruneOptions opt{cfg.criterion, cfg.policy, cfg.sparsity, cfg.invert, cfg.seed};
    auto outcome = prune_in_memory(checkpoint, model, stats ? &*stats : nullptr, opt);
    if (!outcome.violations.empty()) {
        for (const auto& v : outcome.violations) log << "violation: " << v.kind << " " << v.layer << ": " << v.detail << "\n";
        throw ValidationError("mask verification failed (" + std::to_string(outcome.violations.size()) +
                              " violations)");
    }
    write_mask(outcome.mask, cfg.out);
    const auto rep = sparsity_report(outcome.mask, model);
    const fs::path report = cfg.report.empty() ? fs::path(cfg.out.string() + ".report.csv") : cfg.report;
    write_text_file(report, report_csv(rep));
    if (!cfg.budgets_out.empty()) write_text_file(cfg.budgets_out, budget_plan_json(outcome.budgets).dump(2) + "\n");
    log << "global_sparsity " << detail::format_double(rep.global_sparsity) << "\n";
    for (const auto& l : rep.collapsed_layers) log << "warning: layer " << l << " collapsed (no weights kept)\n";
    return outcome;
}

struct ApplySummary {
    std::uint64_t kept = 0;      // mask entries set
    std::uint64_t nonzero = 0;   // nonzero entries of the masked tensors after apply
    std::uint64_t total = 0;     // entries of the masked tensors
};

inline ApplySummary cmd_apply(const RunConfig& cfg, std::ostream& log = std::cout) {
    require_path(cfg.checkpoint, "--checkpoint");
    require_path(cfg.mask, "--mask");
    require_path(cfg.out, "--out");
    const auto mask = read_mask(cfg.mask);
    auto pruned = apply_mask(read_container(cfg.checkpoint), mask);
    ApplySummary s;
    for (const auto& [name, m] : mask.layers) {
        s.kept += m.kept();
        s.total += m.bits.size();
        for (float v : pruned.at(name).f32()) s.nonzero += v != 0.0f;
    }
    write_container(pruned, cfg.out);
    log << "kept " << s.kept << " nonzero " << s.nonzero << " of " << s.total << "\n";
    return s;
}

/// Series name of a mask, from its criterion / policy / inversion tags.
inline std::string method_label(const PruneMask& m) {
    if (m.criterion == Criterion::multiflow) {
        if (m.inverted) return "w/ inversion";
        switch (m.policy) {
            case BudgetPolicy::multimodal_magnitude: return "multiflow";
            case BudgetPolicy::global_score: return "w/o distribution";
            case BudgetPolicy::global_magnitude: return "w/o multimodality";
            case BudgetPolicy::uniform: break;
        }
    }
    if (m.criterion == Criterion::magnitude && m.policy == BudgetPolicy::global_magnitude && !m.inverted) return "omp";
    std::string s = std::string(to_string(m.criterion)) + "/" + std::string(to_string(m.policy));
    return m.inverted ? s + "/inverted" : s;
}

struct CombinedReport {
    std::vector<std::string> series;  // method label per distinct mask, input order
    std::vector<std::pair<std::string, SparsityRow>> rows;
};

inline std::string combined_csv(const CombinedReport& r) {
    std::ostringstream out;
    out << "method,modality,depth_index,layer,size,kept,sparsity\n";
    for (const auto& [method, row] : r.rows)
        out << method << ',' << row.modality << ',' << row.depth_index << ',' << row.layer << ',' << row.size << ','
            << row.kept << ',' << detail::format_double(row.sparsity) << '\n';
    return out.str();
}

inline nlohmann::json combined_json(const CombinedReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [method, row] : r.rows)
        rows.push_back({{"method", method},
                        {"modality", row.modality},
                        {"depth_index", row.depth_index},
                        {"layer", row.layer},
                        {"size", row.size},
                        {"kept", row.kept},
                        {"sparsity", row.sparsity}});
    return {{"series", r.series}, {"rows", std::move(rows)}};
}

/// Per-(method, modality, depth) sparsity of several masks built for the same
/// model spec. The spec comes from the masks' metadata unless `cfg.model_spec` is set.
inline CombinedReport cmd_report(const RunConfig& cfg, std::ostream& log = std::cout) {
    if (cfg.masks.empty()) throw ValidationError("report needs at least one mask file");
    std::vector<fs::path> paths;
    for (const auto& p : cfg.masks) {
        const auto norm = fs::weakly_canonical(p);
        const bool dup = std::any_of(paths.begin(), paths.end(),
                                     [&](const fs::path& q) { return fs::weakly_canonical(q) == norm; });
        if (dup) {
            log << "warning: duplicate mask path " << p.string() << " ignored\n";
            continue;
        }
        paths.push_back(p);
    }

    std::vector<PruneMask> masks;
    for (const auto& p : paths) masks.push_back(read_mask(p));

    nlohmann::json spec;
    if (!cfg.model_spec.empty()) {
        spec = read_json_file(cfg.model_spec);
    } else {
        for (std::size_t i = 0; i < masks.size(); ++i) {
            if (masks[i].model_spec.is_null())
                throw ValidationError(paths[i].string() + " carries no model spec; pass --model-spec");
            if (spec.is_null()) spec = masks[i].model_spec;
            else if (masks[i].model_spec != spec)
                throw ValidationError("incompatible model specs: " + paths[0].string() + " vs " + paths[i].string());
        }
    }

    CombinedReport out;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const auto& mask = masks[i];
        const auto model = load_model_spec(spec, [&](std::string_view name) -> std::optional<Shape> {
            auto it = mask.layers.find(name);
            if (it == mask.layers.end()) return std::nullopt;
            return Shape{it->second.rows, it->second.cols};
        });
        if (mask.layers.size() != model.layers.size())
            throw ValidationError("incompatible model specs: " + paths[i].string() + " has extra layers");
        std::string label = method_label(mask);
        if (std::find(out.series.begin(), out.series.end(), label) != out.series.end())
            label += " [" + paths[i].filename().string() + "]";
        out.series.push_back(label);
        for (const auto& row : sparsity_report(mask, model).rows) out.rows.emplace_back(label, row);
    }

    const std::string csv = combined_csv(out);
    if (cfg.out.empty()) log << csv;
    else write_text_file(cfg.out, csv);
    if (!cfg.json_out.empty()) write_text_file(cfg.json_out, combined_json(out).dump(2) + "\n");
    return out;
}

inline toy::ExperimentResult cmd_toybench(const RunConfig& cfg, std::ostream& log = std::cout) {
    toy::ExperimentConfig ex;
    ex.methods = cfg.methods;
    ex.sparsities = cfg.sparsities;
    ex.seeds = cfg.seeds;
    ex.finetune.steps = cfg.steps;
    ex.pretrain.steps = cfg.pretrain_steps;
    if (cfg.world_seed) ex.world_seed = *cfg.world_seed;
    ex.calib_batch_size = cfg.batch_size;
    ex.out_dir = cfg.out_dir;
    const auto res = toy::run_experiment(ex);
    write_text_file(cfg.out_dir / "results.csv", toy::results_csv(res));
    write_text_file(cfg.out_dir / "results.json", toy::results_json(res, ex).dump(2) + "\n");
    std::vector<std::pair<std::string, double>> seen;
    for (const auto& r : res.runs) {
        if (std::find(seen.begin(), seen.end(), std::pair{r.method, r.sparsity}) != seen.end()) continue;
        seen.emplace_back(r.method, r.sparsity);
        log << r.method << " sparsity " << toy::sparsity_label(r.sparsity) << " median accuracy "
            << detail::format_double(res.median(r.method, r.sparsity)) << "\n";
    }
    return res;
}

}  // namespace multiflow
