// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Layer-wise keep counts. All policies keep exactly round(rho * n) parameters,
// where n counts each tied tensor once (tie-group members inherit the
// canonical member's count).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "multiflow/errors.hpp"
#include "multiflow/modelspec.hpp"
#include "multiflow/scoring.hpp"
#include "multiflow/tensorstore.hpp"

namespace multiflow {

enum class BudgetPolicy { multimodal_magnitude, global_magnitude, global_score, uniform };

inline constexpr std::string_view to_string(BudgetPolicy p) {
    switch (p) {
        case BudgetPolicy::multimodal_magnitude: return "multimodal_magnitude";
        case BudgetPolicy::global_magnitude: return "global_magnitude";
        case BudgetPolicy::global_score: return "global_score";
        case BudgetPolicy::uniform: return "uniform";
    }
    return "?";
}

inline BudgetPolicy parse_policy(std::string_view s) {
    for (auto p : {BudgetPolicy::multimodal_magnitude, BudgetPolicy::global_magnitude, BudgetPolicy::global_score,
                   BudgetPolicy::uniform})
        if (to_string(p) == s) return p;
    throw ValidationError("unknown budget policy '" + std::string(s) + "'");
}

struct BudgetPlan {
    BudgetPolicy policy = BudgetPolicy::uniform;
    double keep_ratio = 1.0;
    std::map<std::string, std::uint64_t> per_modality;
    std::vector<std::pair<std::string, std::uint64_t>> per_layer;  // model order, every layer

    std::uint64_t keep_count(std::string_view layer) const {
        for (const auto& [name, k] : per_layer)
            if (name == layer) return k;
        throw ValidationError("budget plan has no layer " + std::string(layer));
    }

    bool operator==(const BudgetPlan&) const = default;
};

/// round(rho * n); rho must lie in [0, 1].
inline std::uint64_t keep_total(double keep_ratio, std::uint64_t n) {
    if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0))
        throw ValidationError("keep ratio must lie in [0, 1], got " + std::to_string(keep_ratio));
    return static_cast<std::uint64_t>(std::llround(keep_ratio * static_cast<double>(n)));
}

/// Parameters counted once per tie group.
inline std::uint64_t unique_param_count(const PrunableModel& model) {
    std::uint64_t n = 0;
    for (const auto& l : canonical_layers(model)) n += l.size();
    return n;
}

/// Largest-remainder apportionment of `total` proportional to `sizes`.
/// Remainder ties go to the earlier entry.
inline std::vector<std::uint64_t> apportion(std::uint64_t total, std::span<const std::uint64_t> sizes) {
    using wide = unsigned __int128;
    const std::uint64_t n = std::accumulate(sizes.begin(), sizes.end(), std::uint64_t{0});
    std::vector<std::uint64_t> out(sizes.size(), 0);
    if (n == 0 || total == 0) return out;
    if (total > n) throw ValidationError("apportion: total exceeds population");
    std::vector<std::uint64_t> rem(sizes.size());
    std::uint64_t assigned = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        const wide q = static_cast<wide>(total) * sizes[i];
        out[i] = static_cast<std::uint64_t>(q / n);
        rem[i] = static_cast<std::uint64_t>(q % n);
        assigned += out[i];
    }
    std::vector<std::size_t> order(sizes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++out[order[i]];
    return out;
}

/// k^m: every modality keeps (as nearly as integers allow) the fraction rho of its parameters.
inline std::map<std::string, std::uint64_t> modality_keep_counts(const PrunableModel& model, double keep_ratio) {
    const auto canon = canonical_layers(model);
    std::vector<std::uint64_t> sizes(model.modalities.size(), 0);
    for (const auto& l : canon) sizes[model.modality_rank(l.modality)] += l.size();
    const auto counts = apportion(keep_total(keep_ratio, unique_param_count(model)), sizes);
    std::map<std::string, std::uint64_t> out;
    for (std::size_t m = 0; m < model.modalities.size(); ++m)
        if (sizes[m] > 0) out[model.modalities[m]] = counts[m];
    return out;
}

namespace detail {

inline std::span<const float> layer_weights(const TensorMap& checkpoint, const LayerSpec& l) {
    const auto& t = checkpoint.at(l.name);
    if (t.shape != Shape{l.out_dim, l.in_dim}) throw ValidationError("shape mismatch for " + l.name);
    const auto w = t.f32();
    for (float v : w)
        if (!std::isfinite(v)) throw ValidationError("non-finite weight in " + l.name);
    return w;
}

/// Fills per_layer for every layer from per-canonical-layer counts, and
/// per_modality with realized sums.
inline void finish_plan(BudgetPlan& plan, const PrunableModel& model, const std::map<std::string, std::uint64_t>& canon_k,
                        bool fill_modalities) {
    for (const auto& l : model.layers) {
        const auto k = canon_k.at(canonical_of(model, l.name));
        plan.per_layer.emplace_back(l.name, k);
    }
    if (!fill_modalities) return;
    for (const auto& l : canonical_layers(model)) plan.per_modality[l.modality] += canon_k.at(l.name);
}

struct AbsKey {
    float operator()(float v) const { return std::fabs(v); }
};

inline std::map<std::string, std::uint64_t> pool_counts(const std::vector<LayerSpec>& pool,
                                                        const std::vector<std::span<const float>>& values,
                                                        std::uint64_t k, bool absolute) {
    const auto counts = absolute ? pool_topk_counts(values, k, Order::descending, AbsKey{})
                                 : pool_topk_counts(values, k, Order::descending);
    std::map<std::string, std::uint64_t> out;
    for (std::size_t i = 0; i < pool.size(); ++i) out[pool[i].name] = counts[i];
    return out;
}

}  // namespace detail

/// Modality-aware magnitude prior: per modality, top-k^m of |theta| over that
/// modality's pooled parameters; a layer's budget is how many winners land in it.
inline BudgetPlan budgets_multimodal(const PrunableModel& model, const TensorMap& checkpoint, double keep_ratio) {
    BudgetPlan plan{BudgetPolicy::multimodal_magnitude, keep_ratio, modality_keep_counts(model, keep_ratio), {}};
    std::map<std::string, std::uint64_t> canon_k;
    const auto canon = canonical_layers(model);
    for (const auto& [modality, k] : plan.per_modality) {
        std::vector<LayerSpec> pool;
        std::vector<std::span<const float>> values;
        for (const auto& l : canon) {
            if (l.modality != modality) continue;
            pool.push_back(l);
            values.push_back(detail::layer_weights(checkpoint, l));
        }
        canon_k.merge(detail::pool_counts(pool, values, k, true));
    }
    detail::finish_plan(plan, model, canon_k, false);
    return plan;
}

/// One magnitude pool over every prunable parameter (one-shot magnitude pruning budgets).
inline BudgetPlan budgets_global_magnitude(const PrunableModel& model, const TensorMap& checkpoint, double keep_ratio) {
    BudgetPlan plan{BudgetPolicy::global_magnitude, keep_ratio, {}, {}};
    const auto canon = canonical_layers(model);
    std::vector<std::span<const float>> values;
    for (const auto& l : canon) values.push_back(detail::layer_weights(checkpoint, l));
    const auto canon_k = detail::pool_counts(canon, values, keep_total(keep_ratio, unique_param_count(model)), true);
    detail::finish_plan(plan, model, canon_k, true);
    return plan;
}

/// One pool over all score values; the mask it implies is the global top-k of scores.
inline BudgetPlan budgets_global_score(const PrunableModel& model, std::span<const ScoreMatrix> scores,
                                       double keep_ratio) {
    BudgetPlan plan{BudgetPolicy::global_score, keep_ratio, {}, {}};
    if (scores.empty() && !model.layers.empty()) throw ValidationError("global_score budgets need scores");
    for (const auto& s : scores)
        if (s.criterion != scores.front().criterion)
            throw ValidationError("criterion mismatch across layers: " + std::string(to_string(s.criterion)) + " vs " +
                                  std::string(to_string(scores.front().criterion)));
    const auto canon = canonical_layers(model);
    std::vector<std::span<const float>> values;
    for (const auto& l : canon) {
        auto it = std::find_if(scores.begin(), scores.end(), [&](const ScoreMatrix& s) { return s.layer == l.name; });
        if (it == scores.end()) throw ValidationError("missing scores for layer " + l.name);
        if (it->values.rows != l.out_dim || it->values.cols != l.in_dim)
            throw ValidationError("score shape mismatch for " + l.name);
        values.emplace_back(it->values.data);
    }
    const auto canon_k = detail::pool_counts(canon, values, keep_total(keep_ratio, unique_param_count(model)), false);
    detail::finish_plan(plan, model, canon_k, true);
    return plan;
}

/// Same keep fraction in every layer (largest remainder over layer sizes).
inline BudgetPlan budgets_uniform(const PrunableModel& model, double keep_ratio) {
    BudgetPlan plan{BudgetPolicy::uniform, keep_ratio, {}, {}};
    const auto canon = canonical_layers(model);
    std::vector<std::uint64_t> sizes;
    for (const auto& l : canon) sizes.push_back(l.size());
    const auto counts = apportion(keep_total(keep_ratio, unique_param_count(model)), sizes);
    std::map<std::string, std::uint64_t> canon_k;
    for (std::size_t i = 0; i < canon.size(); ++i) canon_k[canon[i].name] = counts[i];
    detail::finish_plan(plan, model, canon_k, true);
    return plan;
}

/// Sum of budgets over tie-group representatives; equals keep_total(rho, unique count).
inline std::uint64_t conserved_total(const BudgetPlan& plan, const PrunableModel& model) {
    std::uint64_t total = 0;
    for (const auto& l : canonical_layers(model)) total += plan.keep_count(l.name);
    return total;
}

inline nlohmann::json budget_plan_json(const BudgetPlan& plan) {
    nlohmann::json per_layer = nlohmann::json::object();
    for (const auto& [name, k] : plan.per_layer) per_layer[name] = k;
    return {{"policy", to_string(plan.policy)},
            {"keep_ratio", plan.keep_ratio},
            {"per_modality", plan.per_modality},
            {"per_layer", std::move(per_layer)}};
}

}  // namespace multiflow
