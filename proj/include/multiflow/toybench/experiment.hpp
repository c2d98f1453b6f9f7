// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// pretrain -> calibrate -> prune -> fine-tune -> evaluate, for every
// (method, sparsity) pair and seed.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "multiflow/detail/parallel.hpp"
#include "multiflow/masking.hpp"
#include "multiflow/pipeline.hpp"
#include "multiflow/toybench/toy_model.hpp"
#include "multiflow/toybench/train.hpp"

namespace multiflow::toy {

enum class MethodKind { dense, scored, snip, itersnip };

struct MethodSpec {
    std::string name;
    MethodKind kind = MethodKind::scored;
    Criterion criterion = Criterion::multiflow;
    BudgetPolicy policy = BudgetPolicy::multimodal_magnitude;
    bool invert = false;
};

inline const std::vector<MethodSpec>& known_methods() {
    using C = Criterion;
    using P = BudgetPolicy;
    static const std::vector<MethodSpec> methods = {
        {"dense", MethodKind::dense, C::magnitude, P::uniform, false},
        {"multiflow", MethodKind::scored, C::multiflow, P::multimodal_magnitude, false},
        {"multiflow_invert", MethodKind::scored, C::multiflow, P::multimodal_magnitude, true},
        {"wo_distribution", MethodKind::scored, C::multiflow, P::global_score, false},
        {"wo_multimodality", MethodKind::scored, C::multiflow, P::global_magnitude, false},
        {"edge_only", MethodKind::scored, C::multiflow_edge_only, P::multimodal_magnitude, false},
        {"nodes_only", MethodKind::scored, C::multiflow_nodes_only, P::multimodal_magnitude, false},
        {"omp", MethodKind::scored, C::magnitude, P::global_magnitude, false},
        {"lamp", MethodKind::scored, C::lamp, P::global_score, false},
        {"l2norm", MethodKind::scored, C::l2norm, P::global_score, false},
        {"random", MethodKind::scored, C::random, P::global_score, false},
        {"snip", MethodKind::snip, C::snip, P::global_score, false},
        {"itersnip", MethodKind::itersnip, C::snip, P::global_score, false},
    };
    return methods;
}

inline const MethodSpec& parse_method(std::string_view name) {
    for (const auto& m : known_methods())
        if (m.name == name) return m;
    throw ValidationError("unknown method '" + std::string(name) + "'");
}

struct ExperimentConfig {
    std::vector<std::string> methods = {"multiflow", "random", "multiflow_invert"};
    std::vector<double> sparsities = {0.75};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    ToyConfig model;
    std::uint64_t world_seed = 2026;
    std::size_t latent_dim = 16;
    double noise = 0.5;
    TrainConfig pretrain{2000, 32, 0.05, 0.9};
    TrainConfig finetune{2000, 32, 0.05, 0.9};
    std::size_t calib_batches = 256;
    std::size_t calib_batch_size = 32;
    std::size_t itersnip_rounds = 8;
    std::size_t eval_groups = 64;
    std::optional<std::filesystem::path> out_dir;  // checkpoint, stats and masks per seed
};

struct RunRecord {
    std::string method;
    double sparsity = 0.0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;  // 0 for diverged runs
    bool diverged = false;
    double final_loss = 0.0;
    std::vector<std::string> collapsed_layers;
    std::map<std::string, double> modality_sparsity;
};

struct SeedRecord {
    std::uint64_t seed = 0;
    double pretrained_accuracy = 0.0;
    bool pretrain_diverged = false;
};

struct ExperimentResult {
    std::vector<RunRecord> runs;  // ordered by (seed, method, sparsity) as configured
    std::vector<SeedRecord> seeds;

    /// Median accuracy over seeds; even counts average the middle pair.
    double median(std::string_view method, double sparsity) const {
        std::vector<double> acc;
        for (const auto& r : runs)
            if (r.method == method && r.sparsity == sparsity) acc.push_back(r.accuracy);
        if (acc.empty()) throw ValidationError("no runs for " + std::string(method));
        std::sort(acc.begin(), acc.end());
        const std::size_t n = acc.size();
        return n % 2 ? acc[n / 2] : 0.5 * (acc[n / 2 - 1] + acc[n / 2]);
    }

    const RunRecord& find(std::string_view method, double sparsity, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.method == method && r.sparsity == sparsity && r.seed == seed) return r;
        throw ValidationError("no run for " + std::string(method));
    }
};

/// Engine tags keep the streams of one seed apart.
namespace tags {
inline constexpr std::uint64_t kPretrain = 0x9e7a1;
inline constexpr std::uint64_t kFinetune = 0xf17e;
inline constexpr std::uint64_t kCalibration = 0xca1b;
}  // namespace tags

inline std::string sparsity_label(double s) { return multiflow::detail::format_double(s); }

inline PruneMask dense_mask(const ToyVLM<float>& m) {
    const auto model = toy_prunable(m);
    PruneMask mask;
    mask.criterion = Criterion::magnitude;
    mask.policy = BudgetPolicy::uniform;
    mask.model_spec = model_spec_json(model);
    for (const auto& l : model.layers)
        mask.layers[l.name] = LayerMask{l.out_dim, l.in_dim, std::vector<std::uint8_t>(l.size(), 1)};
    return mask;
}

/// Mask for one method on a pretrained model.
inline PruneMask method_mask(const MethodSpec& method, double sparsity, const ToyVLM<float>& pretrained,
                             const ActivationStats& stats, std::span<const PairBatch<float>> calib,
                             std::uint64_t seed, std::size_t itersnip_rounds) {
    const auto model = toy_prunable(pretrained);
    switch (method.kind) {
        case MethodKind::dense: return dense_mask(pretrained);
        case MethodKind::scored: {
            PruneOptions opt{method.criterion, method.policy, sparsity, method.invert, seed};
            auto out = prune_in_memory(pretrained.to_tensors(), model, &stats, opt);
            if (!out.violations.empty())
                throw ValidationError("mask verification failed: " + out.violations.front().kind);
            return std::move(out.mask);
        }
        case MethodKind::snip: {
            const auto scores = snip_scores(pretrained, calib);
            auto mask = build_mask(scores, budgets_global_score(model, scores, keep_ratio_for(sparsity)), false);
            mask.model_spec = model_spec_json(model);
            return mask;
        }
        case MethodKind::itersnip: return itersnip(pretrained, calib, itersnip_rounds, sparsity);
    }
    throw ValidationError("unhandled method kind");
}

inline std::string mask_file_name(std::string_view method, double sparsity) {
    return std::string(method) + "_s" + sparsity_label(sparsity) + ".mask";
}

/// Everything for one seed. Runs are single-threaded and deterministic.
inline std::pair<SeedRecord, std::vector<RunRecord>> run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    const SyntheticPairSet data(cfg.world_seed, cfg.model.d_in, cfg.latent_dim, cfg.noise);
    const auto eval = make_eval_set<float>(data, seed, cfg.eval_groups, 32);

    auto pre = TrainState<float>::start(ToyVLM<float>::init(cfg.model, seed), seed ^ tags::kPretrain);
    const auto pre_result = train(pre, data, cfg.pretrain);
    const ToyVLM<float> pretrained = pre.model;
    SeedRecord seed_rec{seed, pre_result.diverged ? 0.0 : retrieval_accuracy<float>(pretrained, eval),
                        pre_result.diverged};
    if (pre_result.diverged) throw ValidationError("dense pretraining diverged for seed " + std::to_string(seed));

    auto cal_rng = multiflow::detail::seeded_engine({seed, tags::kCalibration});
    const auto calib = sample_batches<float>(data, cal_rng, cfg.calib_batches, cfg.calib_batch_size);
    const auto stats = calibrate_toy(
        pretrained, calib, toy_stats_digest(cfg.world_seed, seed, cfg.calib_batches, cfg.calib_batch_size));
    const auto model = toy_prunable(pretrained);

    std::optional<std::filesystem::path> dir;
    if (cfg.out_dir) {
        dir = *cfg.out_dir / ("seed_" + std::to_string(seed));
        std::filesystem::create_directories(*dir / "masks");
        auto tm = pretrained.to_tensors();
        tm.metadata["world_seed"] = std::to_string(cfg.world_seed);
        tm.metadata["seed"] = std::to_string(seed);
        write_container(tm, *dir / "checkpoint.safetensors");
        write_stats(stats, *dir / "stats.safetensors");
    }

    std::vector<RunRecord> runs;
    for (const auto& name : cfg.methods) {
        const auto& method = parse_method(name);
        const auto levels = method.kind == MethodKind::dense ? std::vector<double>{0.0} : cfg.sparsities;
        for (double s : levels) {
            auto mask = method_mask(method, s, pretrained, stats, calib, seed, cfg.itersnip_rounds);
            if (dir) write_mask(mask, *dir / "masks" / mask_file_name(name, s));

            auto ft = TrainState<float>::start(pretrained, seed ^ tags::kFinetune, toy_mask(mask));
            const auto r = train(ft, data, cfg.finetune);
            const auto rep = sparsity_report(mask, model);
            runs.push_back({name, s, seed, r.diverged ? 0.0 : retrieval_accuracy<float>(ft.model, eval), r.diverged,
                            r.final_loss, rep.collapsed_layers, rep.per_modality});
        }
    }
    return {seed_rec, std::move(runs)};
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    for (const auto& m : cfg.methods) parse_method(m);
    for (double s : cfg.sparsities)
        if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("sparsity must lie in [0, 1]");
    if (cfg.seeds.empty()) throw ValidationError("no seeds given");

    std::vector<std::pair<SeedRecord, std::vector<RunRecord>>> per_seed(cfg.seeds.size());
    multiflow::detail::parallel_for(cfg.seeds.size(), [&](std::size_t i) { per_seed[i] = run_seed(cfg, cfg.seeds[i]); });

    ExperimentResult out;
    for (auto& [seed, runs] : per_seed) {
        out.seeds.push_back(seed);
        for (auto& r : runs) out.runs.push_back(std::move(r));
    }
    return out;
}

inline std::string results_csv(const ExperimentResult& res) {
    std::ostringstream out;
    out << "method,sparsity,seed,accuracy,diverged,collapsed_layers\n";
    for (const auto& r : res.runs) {
        out << r.method << ',' << sparsity_label(r.sparsity) << ',' << r.seed << ','
            << multiflow::detail::format_double(r.accuracy) << ',' << (r.diverged ? "true" : "false") << ',';
        for (std::size_t i = 0; i < r.collapsed_layers.size(); ++i) out << (i ? ";" : "") << r.collapsed_layers[i];
        out << '\n';
    }
    return out.str();
}

inline nlohmann::json results_json(const ExperimentResult& res, const ExperimentConfig& cfg) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : res.runs)
        runs.push_back({{"method", r.method},
                        {"sparsity", r.sparsity},
                        {"seed", r.seed},
                        {"accuracy", r.accuracy},
                        {"diverged", r.diverged},
                        {"final_loss", r.final_loss},
                        {"collapsed_layers", r.collapsed_layers},
                        {"modality_sparsity", r.modality_sparsity}});
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& s : res.seeds)
        seeds.push_back({{"seed", s.seed}, {"pretrained_accuracy", s.pretrained_accuracy}});
    nlohmann::json medians = nlohmann::json::array();
    std::vector<std::pair<std::string, double>> seen;
    for (const auto& r : res.runs) {
        std::pair<std::string, double> key{r.method, r.sparsity};
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
        seen.push_back(key);
        medians.push_back({{"method", r.method}, {"sparsity", r.sparsity}, {"median_accuracy", res.median(r.method, r.sparsity)}});
    }
    return {{"config",
             {{"methods", cfg.methods},
              {"sparsities", cfg.sparsities},
              {"seeds", cfg.seeds},
              {"world_seed", cfg.world_seed},
              {"pretrain_steps", cfg.pretrain.steps},
              {"finetune_steps", cfg.finetune.steps},
              {"calib_batches", cfg.calib_batches},
              {"calib_batch_size", cfg.calib_batch_size},
              {"itersnip_rounds", cfg.itersnip_rounds}}},
            {"seeds", std::move(seeds)},
            {"runs", std::move(runs)},
            {"medians", std::move(medians)}};
}

}  // namespace multiflow::toy
