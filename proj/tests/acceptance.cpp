// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <fcntl.h>
#include <spawn.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "multiflow/commands.hpp"
#include "test_support.hpp"
#include "toy_oracles.hpp"

extern char** environ;

using namespace multiflow;
namespace fs = std::filesystem;
using testing_support::TempDir;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 3) {
    std::ostringstream o;
    o.precision(prec);
    o << v;
    return o.str();
}

ActivationStats random_stats(std::mt19937_64& rng, const PrunableModel& model) {
    ActivationStats s;
    s.token_count = 100;
    for (const auto& l : model.layers) s.in_norm[l.name] = testing_support::random_vector(rng, l.in_dim, 0.1f, 3.0f);
    return s;
}

struct ChildResult {
    int code = -1;
    double wall_s = 0.0;
    long max_rss_kb = 0;
};

/// Runs the CLI in a child process with stdout/stderr sent to `log`.
ChildResult run_cli(const std::vector<std::string>& args, const fs::path& log) {
    std::vector<std::string> argv_s{MULTIFLOW_CLI_PATH};
    argv_s.insert(argv_s.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_s) argv.push_back(a.data());
    argv.push_back(nullptr);

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);

    ChildResult out;
    const auto t0 = Clock::now();
    pid_t pid = 0;
    const int rc = posix_spawn(&pid, argv[0], &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) return out;
    int status = 0;
    rusage usage{};
    wait4(pid, &status, 0, &usage);
    out.wall_s = seconds_since(t0);
    out.max_rss_kb = usage.ru_maxrss;
    out.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return out;
}

bool run_ok(const std::vector<std::string>& args, const fs::path& log, std::string& why) {
    const auto r = run_cli(args, log);
    if (r.code == 0) return true;
    why = "exit " + std::to_string(r.code) + ": " + testing_support::read_bytes(log);
    return false;
}

// ---------------------------------------------------------------------------------------------

Verdict scoring_oracle() {
    const auto t0 = Clock::now();
    Matrix<float> hand(2, 2);
    hand.data = {1, -2, 3, 4};
    const std::vector<float> n{1, 2};
    const auto s = score_multiflow(hand.view(), n);
    const bool hand_ok = s.values.data == std::vector<float>{5, 30, 33, 132};

    std::mt19937_64 rng(2026);
    std::uniform_int_distribution<std::size_t> dim(1, 64);
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t r = t == 0 ? 64 : dim(rng), c = t == 0 ? 64 : dim(rng);
        const auto m = testing_support::random_matrix(rng, r, c);
        const auto norms = testing_support::random_vector(rng, c, 0.0f, 3.0f);
        const auto fast = score_multiflow(m.view(), norms);
        const auto slow = score_multiflow_bruteforce(m.view(), norms);
        for (std::size_t i = 0; i < fast.values.data.size(); ++i)
            worst = std::max(worst, testing_support::relative_error(fast.values.data[i], slow.values.data[i]));
    }
    const double secs = seconds_since(t0);
    return {hand_ok && worst <= 1e-6 && secs < 5.0,
            "hand case " + std::string(hand_ok ? "exact" : "wrong") + ", max rel err " + fmt(worst) + " over 200 layers, " +
                fmt(secs) + " s"};
}

/// Global magnitude top-k by a plain sort: |w| descending, then layer order, then index.
PruneMask omp_oracle(const testing_support::Fixture& f, double keep_ratio) {
    struct Entry {
        float mag;
        std::size_t layer, index;
    };
    std::vector<Entry> all;
    for (std::size_t li = 0; li < f.model.layers.size(); ++li) {
        const auto w = f.checkpoint.at(f.model.layers[li].name).f32();
        for (std::size_t i = 0; i < w.size(); ++i) all.push_back({std::fabs(w[i]), li, i});
    }
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
        if (a.mag != b.mag) return a.mag > b.mag;
        return std::tie(a.layer, a.index) < std::tie(b.layer, b.index);
    });
    const auto k = static_cast<std::size_t>(std::llround(keep_ratio * static_cast<double>(all.size())));
    PruneMask m;
    for (const auto& l : f.model.layers) m.layers[l.name] = {l.out_dim, l.in_dim, std::vector<std::uint8_t>(l.size(), 0)};
    for (std::size_t i = 0; i < k; ++i) m.layers[f.model.layers[all[i].layer].name].bits[all[i].index] = 1;
    return m;
}

Verdict omp_equivalence() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(31);
    int mismatches = 0, cases = 0;
    for (int t = 0; t < 50; ++t) {
        const auto f = testing_support::random_fixture(rng, 3 + rng() % 6, 32);
        for (double sigma : {0.5, 0.63, 0.75, 0.9}) {
            const auto got = prune_in_memory(f.checkpoint, f.model, nullptr,
                                             {Criterion::magnitude, BudgetPolicy::multimodal_magnitude, sigma, false, 0});
            ++cases;
            if (got.mask.layers != omp_oracle(f, 1.0 - sigma).layers) ++mismatches;
        }
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 10.0,
            std::to_string(cases - mismatches) + "/" + std::to_string(cases) + " masks equal, " + fmt(secs) + " s"};
}

Verdict budget_conservation() {
    std::mt19937_64 rng(32);
    int checks = 0, failures = 0;
    std::string first_failure;
    for (int t = 0; t < 20; ++t) {
        const auto f = testing_support::random_fixture(rng, 4 + rng() % 5, 24, {"vision", "text", "fusion"});
        const auto stats = random_stats(rng, f.model);
        const auto n = unique_param_count(f.model);
        for (auto policy : {BudgetPolicy::multimodal_magnitude, BudgetPolicy::global_magnitude,
                            BudgetPolicy::global_score, BudgetPolicy::uniform})
            for (double sigma : {0.63, 0.75, 0.9}) {
                ++checks;
                const auto out =
                    prune_in_memory(f.checkpoint, f.model, &stats, {Criterion::multiflow, policy, sigma, false, 0});
                std::uint64_t kept = 0;
                for (const auto& [name, m] : out.mask.layers) kept += m.kept();
                bool ok = out.violations.empty() && kept == keep_total(1.0 - sigma, n) &&
                          conserved_total(out.budgets, f.model) == keep_total(1.0 - sigma, n);
                if (policy == BudgetPolicy::multimodal_magnitude) {
                    const auto rep = sparsity_report(out.mask, f.model);
                    for (const auto& g : partition_by_modality(f.model)) {
                        double size = 0;
                        for (const auto& l : g.layers) size += static_cast<double>(l.size());
                        ok = ok && std::fabs(rep.per_modality.at(g.modality) - sigma) * size <= 1.0;
                    }
                }
                if (!ok && failures++ == 0)
                    first_failure = ", first failure " + std::string(to_string(policy)) + " at " + fmt(sigma);
            }
    }
    return {failures == 0, std::to_string(checks - failures) + "/" + std::to_string(checks) + " plans exact" + first_failure};
}

std::vector<ScoreMatrix> model_scores(const testing_support::Fixture& f, const ActivationStats& stats) {
    std::vector<ScoreMatrix> out;
    for (const auto& l : f.model.layers) out.push_back(score_model_layer(f.checkpoint, f.model, &stats, l, Criterion::multiflow, 0));
    return out;
}

Verdict invariance() {
    std::mt19937_64 rng(33);
    int score_scale_fail = 0, norm_scale_fail = 0, disjoint_fail = 0, trials = 0;
    for (int t = 0; t < 20; ++t) {
        const auto f = testing_support::random_fixture(rng, 5, 24, {"vision", "text"});
        const auto stats = random_stats(rng, f.model);
        const auto scores = model_scores(f, stats);
        const auto plan = budgets_multimodal(f.model, f.checkpoint, 0.25);
        const auto base = build_mask(scores, plan, false);
        const auto base_global = build_mask(scores, budgets_global_score(f.model, scores, 0.25), false);
        for (float c : {0.5f, 3.0f, 100.0f, 1024.0f, 1e-3f}) {
            ++trials;
            auto scaled = scores;
            for (auto& s : scaled)
                for (auto& v : s.values.data) v *= c;
            if (build_mask(scaled, plan, false) != base) ++score_scale_fail;
            if (build_mask(scaled, budgets_global_score(f.model, scaled, 0.25), false) != base_global) ++score_scale_fail;
        }
        for (float c : {0.5f, 3.0f, 100.0f}) {
            for (std::size_t li = 0; li < f.model.layers.size(); ++li) {
                const auto& l = f.model.layers[li];
                auto norms = stats.in_norm.at(l.name);
                for (auto& v : norms) v *= c;
                const auto w = f.checkpoint.at(l.name).f32();
                const auto s = score_multiflow(MatrixView<const float>(w, l.out_dim, l.in_dim), norms, l.name);
                if (build_layer_mask(s, plan.keep_count(l.name), false) != base.at(l.name)) ++norm_scale_fail;
            }
        }
    }
    // inversion on single layers with distinct scores
    int disjoint_cases = 0, forced_overlap = 0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t r = 1 + rng() % 32, c = 1 + rng() % 32;
        ScoreMatrix s{"l", Criterion::multiflow, Matrix<float>(r, c), std::nullopt};
        std::iota(s.values.data.begin(), s.values.data.end(), 1.0f);
        std::shuffle(s.values.data.begin(), s.values.data.end(), rng);
        for (double sigma : {0.5, 0.63, 0.75, 0.9}) {
            const auto k = keep_total(1.0 - sigma, r * c);
            if (2 * k > r * c) {  // odd sizes at sigma 0.5 round k up; overlap is forced
                ++forced_overlap;
                continue;
            }
            ++disjoint_cases;
            const auto keep = build_layer_mask(s, k, false), inv = build_layer_mask(s, k, true);
            for (std::size_t i = 0; i < keep.bits.size(); ++i)
                if (keep.bits[i] && inv.bits[i]) {
                    ++disjoint_fail;
                    break;
                }
        }
    }
    return {score_scale_fail + norm_scale_fail + disjoint_fail == 0,
            "score scaling mismatches " + std::to_string(score_scale_fail) + "/" + std::to_string(2 * trials) +
                ", norm scaling mismatches " + std::to_string(norm_scale_fail) + ", inversion overlaps " +
                std::to_string(disjoint_fail) + "/" + std::to_string(disjoint_cases) + " (" + std::to_string(forced_overlap) +
                " cases with 2k > size skipped)"};
}

Verdict lamp_property() {
    std::mt19937_64 rng(34);
    int bad_layers = 0;
    for (int t = 0; t < 200; ++t) {
        const auto m = testing_support::random_matrix(rng, 1 + rng() % 48, 1 + rng() % 48);
        const auto s = score_lamp(m.view());
        const auto ones = std::count(s.values.data.begin(), s.values.data.end(), 1.0f);
        const bool in_range = std::all_of(s.values.data.begin(), s.values.data.end(), [](float v) { return v > 0.0f && v <= 1.0f; });
        if (ones != 1 || !in_range) ++bad_layers;
    }
    Matrix<float> hand(1, 3);
    hand.data = {1, 2, 3};
    const auto s = score_lamp(hand.view());
    const double expect[] = {1.0 / 14.0, 4.0 / 13.0, 1.0};
    double worst = 0.0;
    for (int i = 0; i < 3; ++i) worst = std::max(worst, std::fabs(s.values.data[i] - expect[i]));
    return {bad_layers == 0 && worst <= 1e-7,
            std::to_string(200 - bad_layers) + "/200 layers with a single 1 and scores in (0,1], hand case max abs err " +
                fmt(worst)};
}

PrunableModel one_layer(std::size_t in) {
    TensorMap tm;
    tm.insert(DenseTensor::from_f32("l", {1, in}, std::vector<float>(in, 0.0f)));
    return load_model_spec({{"modalities", {"x"}}, {"layers", {{{"name", "l"}, {"modality", "x"}}}}}, tm);
}

void feed(NormAccumulator& acc, std::size_t rows, std::size_t cols, const std::vector<float>& v) {
    acc.accumulate("l", MatrixView<const float>(std::span<const float>(v), rows, cols));
}

Verdict calibration() {
    std::mt19937_64 rng(35);
    const std::size_t tokens = 1000, width = 32;
    const auto data = testing_support::random_vector(rng, tokens * width, -4, 4);
    auto ref = new_accumulator(one_layer(width));
    feed(ref, tokens, width, data);
    const auto ref_norms = ref.finalize().in_norm.at("l");
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> perm(tokens);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        auto acc = new_accumulator(one_layer(width));
        for (std::size_t t = 0; t < tokens;) {
            const std::size_t n = std::min<std::size_t>(tokens - t, 1 + rng() % 64);
            std::vector<float> batch;
            for (std::size_t i = 0; i < n; ++i)
                batch.insert(batch.end(), data.begin() + perm[t + i] * width, data.begin() + (perm[t + i] + 1) * width);
            feed(acc, n, width, batch);
            t += n;
        }
        const auto norms = acc.finalize().in_norm.at("l");
        for (std::size_t i = 0; i < width; ++i) worst = std::max(worst, testing_support::relative_error(norms[i], ref_norms[i]));
    }

    auto single = new_accumulator(one_layer(8));
    std::vector<NormAccumulator> shards(4, new_accumulator(one_layer(8)));
    for (int b = 0; b < 40; ++b) {
        const auto batch = testing_support::random_vector(rng, 5 * 8, -2, 2);
        feed(single, 5, 8, batch);
        feed(shards[static_cast<std::size_t>(b / 10)], 5, 8, batch);
    }
    for (std::size_t i = 1; i < shards.size(); ++i) shards[0].merge(shards[i]);
    const bool merge_ok = shards[0].finalize() == single.finalize();

    auto hand = new_accumulator(one_layer(2));
    feed(hand, 2, 2, {1, 1, 2, 2});
    const auto h = hand.finalize().in_norm.at("l");
    const float root5 = static_cast<float>(std::sqrt(5.0));
    const bool hand_ok = h == std::vector<float>{root5, root5};
    return {worst <= 1e-6 && merge_ok && hand_ok,
            "order max rel err " + fmt(worst) + ", shard merge " + (merge_ok ? "exact" : "differs") + ", hand case " +
                (hand_ok ? "sqrt(5)" : "wrong")};
}

Verdict gradient_check() {
    const auto primary = testing_support::micro_gradient_check(1);
    std::ostringstream others;
    double worst_other = 0.0;
    std::size_t kinked_other = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        if (seed == 1) continue;
        const auto g = testing_support::micro_gradient_check(seed);
        worst_other = std::max(worst_other, g.max_rel_error);
        kinked_other += g.kinked;
    }
    const bool ok = primary.kinked == 0 && primary.max_rel_error < 1e-4;
    return {ok, "micro-model " + std::to_string(primary.params) + " params, max rel err " + fmt(primary.max_rel_error) +
                    "; seeds 0,2-9 max " + fmt(worst_other) + " with " + std::to_string(kinked_other) +
                    " probes straddling a ReLU kink skipped"};
}

Verdict toy_qualitative(const fs::path& out_dir) {
    toy::ExperimentConfig cfg;
    cfg.methods = {"multiflow", "random", "multiflow_invert", "wo_distribution"};
    cfg.sparsities = {0.75, 0.9};
    cfg.seeds = {0, 1, 2, 3, 4};
    cfg.out_dir = out_dir;
    const auto t0 = Clock::now();
    const auto res = toy::run_experiment(cfg);
    const double secs = seconds_since(t0);

    const double mf = res.median("multiflow", 0.75), rnd = res.median("random", 0.75),
                 inv = res.median("multiflow_invert", 0.75);
    const double wod90 = res.median("wo_distribution", 0.9), rnd90 = res.median("random", 0.9);
    std::size_t collapsed_runs = 0;
    for (const auto& r : res.runs)
        if (r.method == "wo_distribution" && r.sparsity == 0.9 && !r.collapsed_layers.empty()) ++collapsed_runs;
    const bool ordering = mf > rnd && rnd > inv;
    const bool collapse_clause = collapsed_runs > 0 || wod90 <= rnd90;
    return {ordering && collapse_clause && secs < 300.0,
            "sigma 0.75 medians multiflow " + fmt(mf) + " > random " + fmt(rnd) + " > inverted " + fmt(inv) +
                "; sigma 0.9 wo_distribution " + fmt(wod90) + " vs random " + fmt(rnd90) + ", collapsed in " +
                std::to_string(collapsed_runs) + "/5 seeds; " + fmt(secs) + " s"};
}

Verdict fig5_report(const fs::path& toy_dir, const fs::path& work) {
    const auto seed_dir = toy_dir / "seed_0";
    const auto ckpt = seed_dir / "checkpoint.safetensors", stats = seed_dir / "stats.safetensors";
    if (!fs::exists(ckpt) || !fs::exists(stats)) return {false, "toy seed_0 checkpoint missing"};
    const auto spec = work / "toy_spec.json";
    testing_support::write_bytes(spec, toy::toy_model_spec().dump());

    std::string why;
    const auto log = work / "fig5.log";
    const std::vector<std::pair<std::string, std::vector<std::string>>> runs = {
        {"wod.mask", {"--criterion", "multiflow", "--policy", "global_score"}},
        {"wom.mask", {"--criterion", "multiflow", "--policy", "global_magnitude"}},
        {"mf.mask", {"--criterion", "multiflow", "--policy", "multimodal_magnitude"}},
        {"omp.mask", {"--criterion", "magnitude", "--policy", "global_magnitude"}},
    };
    std::vector<std::string> report_args{"report"};
    for (const auto& [file, extra] : runs) {
        std::vector<std::string> args{"prune", "--checkpoint", ckpt, "--model-spec", spec, "--stats", stats,
                                      "--sparsity", "0.75", "--out", work / file};
        args.insert(args.end(), extra.begin(), extra.end());
        if (!run_ok(args, log, why)) return {false, "prune failed, " + why};
        report_args.push_back(work / file);
    }
    report_args.insert(report_args.end(), {"--out", work / "fig5.csv", "--json", work / "fig5.json"});
    if (!run_ok(report_args, log, why)) return {false, "report failed, " + why};

    const auto j = read_json_file(work / "fig5.json");
    std::map<std::string, std::map<std::string, std::uint64_t>> kept;
    for (const auto& row : j.at("rows")) kept[row.at("method").get<std::string>()][row.at("layer").get<std::string>()] = row.at("kept").get<std::uint64_t>();

    const auto tm = read_container(ckpt);
    const auto model = load_model_spec(toy::toy_model_spec(), tm);
    const auto plan = budgets_global_magnitude(model, tm, 0.25);
    std::size_t equal = 0;
    for (const auto& l : model.layers)
        if (kept["w/o multimodality"][l.name] == plan.keep_count(l.name) && kept["omp"][l.name] == plan.keep_count(l.name))
            ++equal;
    const auto csv = testing_support::read_bytes(work / "fig5.csv");
    const bool csv_ok = csv.rfind("method,modality,depth_index,layer,size,kept,sparsity\n", 0) == 0 &&
                        std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * static_cast<long>(model.layers.size());
    return {equal == model.layers.size() && csv_ok && j.at("series").size() == 4,
            std::to_string(equal) + "/" + std::to_string(model.layers.size()) +
                " layers where w/o-multimodality equals the OMP budget and OMP mask, CSV " + (csv_ok ? "ok" : "malformed")};
}

Verdict performance(const fs::path& work) {
    const std::size_t dim = 4096;
    const std::vector<std::string> modalities{"vision", "text"};
    std::uint64_t params = 0;
    {
        TensorMap tm;
        ActivationStats stats;
        nlohmann::json layers = nlohmann::json::array();
        std::mt19937_64 rng(36);
        std::normal_distribution<float> gauss(0.0f, 0.02f);
        for (std::size_t i = 0; i < 6; ++i) {
            const std::string name = modalities[i % 2] + ".layer" + std::to_string(i / 2);
            std::vector<float> w(dim * dim);
            for (auto& v : w) v = gauss(rng);
            tm.insert(DenseTensor::from_f32(name, {dim, dim}, std::move(w)));
            stats.in_norm[name] = testing_support::random_vector(rng, dim, 0.5f, 20.0f);
            layers.push_back({{"name", name}, {"modality", modalities[i % 2]}});
            params += dim * dim;
        }
        stats.token_count = 4096;
        stats.source_digest = "synthetic";
        write_container(tm, work / "big.safetensors");
        write_stats(stats, work / "big.stats");
        testing_support::write_bytes(work / "big_spec.json",
                                     nlohmann::json{{"modalities", modalities}, {"layers", layers}}.dump());
    }
    const auto r = run_cli({"prune", "--checkpoint", work / "big.safetensors", "--model-spec", work / "big_spec.json",
                            "--stats", work / "big.stats", "--criterion", "multiflow", "--policy",
                            "multimodal_magnitude", "--sparsity", "0.75", "--out", work / "big.mask"},
                           work / "big.log");
    const double gb = static_cast<double>(r.max_rss_kb) / (1024.0 * 1024.0);
    std::error_code ec;
    fs::remove(work / "big.safetensors", ec);
    fs::remove(work / "big.mask", ec);
    if (r.code != 0) return {false, "prune exit " + std::to_string(r.code) + ": " + testing_support::read_bytes(work / "big.log")};
    return {r.wall_s < 120.0 && gb < 3.0, std::to_string(params) + " params pruned in " + fmt(r.wall_s) +
                                              " s, peak RSS " + fmt(gb) + " GB, single thread"};
}

Verdict format_golden(const fs::path& work) {
    std::vector<std::string> failures;
    std::mt19937_64 rng(37);

    TensorMap tm;
    tm.insert(DenseTensor::from_f32("b.weight", {7, 5}, testing_support::random_vector(rng, 35, -1, 1)));
    tm.insert(DenseTensor::from_f32("a.weight", {3}, {1.5f, -0.0f, 2e-30f}));
    tm.insert(DenseTensor::from_u8("mask", {2, 2}, {1, 0, 0, 1}));
    tm.metadata = {{"z", "last"}, {"a", "first"}};
    write_container(tm, work / "c1");
    write_container(read_container(work / "c1"), work / "c2");
    if (testing_support::read_bytes(work / "c1") != testing_support::read_bytes(work / "c2")) failures.push_back("container");

    const auto f = testing_support::random_fixture(rng, 4, 16, {"vision", "text"});
    const auto stats = random_stats(rng, f.model);
    const auto out = prune_in_memory(f.checkpoint, f.model, &stats, {Criterion::multiflow, BudgetPolicy::multimodal_magnitude, 0.75, false, 0});
    write_mask(out.mask, work / "m1");
    write_mask(read_mask(work / "m1"), work / "m2");
    if (testing_support::read_bytes(work / "m1") != testing_support::read_bytes(work / "m2")) failures.push_back("mask");
    write_stats(stats, work / "s1");
    write_stats(read_stats(work / "s1"), work / "s2");
    if (testing_support::read_bytes(work / "s1") != testing_support::read_bytes(work / "s2")) failures.push_back("stats");

    // fixed-seed CLI runs, twice each
    auto ckpt = toy::ToyVLM<float>::init({}, 5).to_tensors();
    ckpt.metadata["world_seed"] = "2026";
    write_container(ckpt, work / "g.safetensors");
    testing_support::write_bytes(work / "g_spec.json", toy::toy_model_spec().dump());
    std::size_t compared = 0;
    std::string why;
    for (const char* run : {"r1", "r2"}) {
        const auto dir = work / run;
        fs::create_directories(dir);
        const auto log = dir / "log";
        const bool ok =
            run_ok({"toybench", "--methods", "multiflow,random,wo_distribution", "--sparsities", "0.75", "--seeds", "0",
                    "--steps", "40", "--pretrain-steps", "80", "--out-dir", dir / "tb"},
                   log, why) &&
            run_ok({"calibrate", "--checkpoint", work / "g.safetensors", "--model-spec", work / "g_spec.json",
                    "--batches", "64", "--batch-size", "32", "--seed", "3", "--out", dir / "g.stats"},
                   log, why) &&
            run_ok({"prune", "--checkpoint", work / "g.safetensors", "--model-spec", work / "g_spec.json", "--stats",
                    dir / "g.stats", "--sparsity", "0.75", "--out", dir / "mf.mask", "--budgets-out", dir / "budgets.json"},
                   log, why) &&
            run_ok({"prune", "--checkpoint", work / "g.safetensors", "--model-spec", work / "g_spec.json", "--criterion",
                    "random", "--seed", "11", "--sparsity", "0.9", "--out", dir / "rnd.mask"},
                   log, why);
        if (!ok) return {false, "CLI run failed, " + why};
    }
    for (const auto& entry : fs::recursive_directory_iterator(work / "r1")) {
        if (!entry.is_regular_file() || entry.path().filename() == "log") continue;
        const auto rel = fs::relative(entry.path(), work / "r1");
        ++compared;
        if (testing_support::read_bytes(entry.path()) != testing_support::read_bytes(work / "r2" / rel))
            failures.push_back(rel.string());
    }
    std::string detail = "container, mask and stats round-trips plus " + std::to_string(compared) + " CLI output files";
    if (failures.empty()) return {true, detail + " byte-identical"};
    for (const auto& f : failures) detail += "; differs: " + f;
    return {false, detail};
}

}  // namespace

int main() {
    setenv("MULTIFLOW_THREADS", "1", 1);
    TempDir work;
    fs::create_directories(work / "toy");
    fs::create_directories(work / "fig5");
    fs::create_directories(work / "perf");
    fs::create_directories(work / "golden");

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
        {"scoring oracle", scoring_oracle},
        {"OMP equivalence", omp_equivalence},
        {"budget conservation", budget_conservation},
        {"invariance suite", invariance},
        {"LAMP property", lamp_property},
        {"calibration", calibration},
        {"toy gradient check", gradient_check},
        {"toy qualitative reproduction", [&] { return toy_qualitative(work / "toy"); }},
        {"sparsity report", [&] { return fig5_report(work / "toy", work / "fig5"); }},
        {"performance", [&] { return performance(work / "perf"); }},
        {"format golden", [&] { return format_golden(work / "golden"); }},
    };

    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        if (!v.pass) ++failed;
        std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
    }
    std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - static_cast<std::size_t>(failed) << "/"
              << criteria.size() << std::endl;
    return failed ? 1 : 0;
}
