// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// multiflow: calibrate | prune | apply | report | toybench
// Exit codes: 0 success, 2 validation failure, 3 IO/format error.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "multiflow/commands.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitFormat = 3;

template <class Enum>
std::vector<std::string> enum_names(std::initializer_list<Enum> values) {
    std::vector<std::string> out;
    for (auto v : values) out.emplace_back(multiflow::to_string(v));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace multiflow;
    RunConfig cfg;
    std::string config_path;
    std::string world_seed;
    std::string criterion(to_string(cfg.criterion));
    std::string policy(to_string(cfg.policy));

    CLI::App app{"MultiFlow pruning toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", config_path, "JSON file whose keys override flags")->check(CLI::ExistingFile);

    const auto criteria = enum_names({Criterion::multiflow, Criterion::magnitude, Criterion::lamp, Criterion::l2norm,
                                    Criterion::multiflow_edge_only, Criterion::multiflow_nodes_only,
                                    Criterion::random});
    const auto policies = enum_names({BudgetPolicy::multimodal_magnitude, BudgetPolicy::global_magnitude,
                                    BudgetPolicy::global_score, BudgetPolicy::uniform});

    auto* calibrate = app.add_subcommand("calibrate", "Accumulate input-norm statistics on a toy checkpoint");
    calibrate->add_option("--checkpoint", cfg.checkpoint);
    calibrate->add_option("--model-spec", cfg.model_spec);
    calibrate->add_option("--batches", cfg.batches)->capture_default_str();
    calibrate->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    calibrate->add_option("--seed", cfg.seed)->capture_default_str();
    calibrate->add_option("--world-seed", world_seed, "Overrides the checkpoint's world_seed metadata");
    calibrate->add_option("--out", cfg.out);

    auto* prune = app.add_subcommand("prune", "Score, budget and mask a checkpoint");
    prune->add_option("--checkpoint", cfg.checkpoint);
    prune->add_option("--model-spec", cfg.model_spec);
    prune->add_option("--stats", cfg.stats);
    prune->add_option("--criterion", criterion)->check(CLI::IsMember(criteria))->capture_default_str();
    prune->add_option("--policy", policy)->check(CLI::IsMember(policies))->capture_default_str();
    prune->add_option("--sparsity", cfg.sparsity)->capture_default_str();
    prune->add_flag("--invert", cfg.invert);
    prune->add_option("--seed", cfg.seed)->capture_default_str();
    prune->add_option("--out", cfg.out, "Mask file");
    prune->add_option("--report", cfg.report, "Sparsity CSV (default <out>.report.csv)");
    prune->add_option("--budgets-out", cfg.budgets_out, "Budget plan JSON");

    auto* apply = app.add_subcommand("apply", "Zero the pruned weights of a checkpoint");
    apply->add_option("--checkpoint", cfg.checkpoint);
    apply->add_option("--mask", cfg.mask);
    apply->add_option("--out", cfg.out);

    auto* report = app.add_subcommand("report", "Per-layer sparsity of one or more masks");
    report->add_option("masks", cfg.masks, "Mask files");
    report->add_option("--model-spec", cfg.model_spec, "Used when masks carry no model spec");
    report->add_option("--out", cfg.out, "CSV path (stdout when omitted)");
    report->add_option("--json", cfg.json_out, "JSON path");

    auto* toybench = app.add_subcommand("toybench", "Prune-then-finetune experiments on the toy model");
    toybench->add_option("--methods", cfg.methods)->delimiter(',')->capture_default_str();
    toybench->add_option("--sparsities", cfg.sparsities)->delimiter(',')->capture_default_str();
    toybench->add_option("--seeds", cfg.seeds)->delimiter(',')->capture_default_str();
    toybench->add_option("--steps", cfg.steps, "Fine-tuning steps")->capture_default_str();
    toybench->add_option("--pretrain-steps", cfg.pretrain_steps)->capture_default_str();
    toybench->add_option("--world-seed", world_seed);
    toybench->add_option("--out-dir", cfg.out_dir)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    try {
        if (!world_seed.empty()) {
            try {
                cfg.world_seed = std::stoull(world_seed);
            } catch (const std::exception&) {
                throw ValidationError("invalid --world-seed '" + world_seed + "'");
            }
        }
        cfg.criterion = parse_criterion(criterion);
        cfg.policy = parse_policy(policy);
        if (!config_path.empty()) apply_config_json(cfg, read_json_file(config_path));

        if (calibrate->parsed()) cmd_calibrate(cfg);
        else if (prune->parsed()) cmd_prune(cfg);
        else if (apply->parsed()) cmd_apply(cfg);
        else if (report->parsed()) cmd_report(cfg);
        else if (toybench->parsed()) cmd_toybench(cfg);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    }
    return 0;
}
