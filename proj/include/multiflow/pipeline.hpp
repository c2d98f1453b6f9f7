// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// score -> budget -> mask, one layer at a time where the policy allows it.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "multiflow/budgeting.hpp"
#include "multiflow/calibration.hpp"
#include "multiflow/errors.hpp"
#include "multiflow/masking.hpp"
#include "multiflow/modelspec.hpp"
#include "multiflow/scoring.hpp"
#include "multiflow/tensorstore.hpp"

namespace multiflow {

struct PruneOptions {
    Criterion criterion = Criterion::multiflow;
    BudgetPolicy policy = BudgetPolicy::multimodal_magnitude;
    double sparsity = 0.0;  // fraction removed; keep ratio is 1 - sparsity
    bool invert = false;
    std::uint64_t seed = 0;
};

struct PruneOutcome {
    PruneMask mask;
    BudgetPlan budgets;
    std::vector<Violation> violations;
};

inline double keep_ratio_for(double sparsity) {
    if (!(sparsity >= 0.0 && sparsity <= 1.0))
        throw ValidationError("sparsity must lie in [0, 1], got " + std::to_string(sparsity));
    return 1.0 - sparsity;
}

/// Seed of the random criterion for the layer at `index` in config order.
inline std::uint64_t layer_seed(std::uint64_t seed, std::size_t index) {
    return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(index);
}

inline ScoreMatrix score_model_layer(const TensorMap& checkpoint, const PrunableModel& model,
                                     const ActivationStats* stats, const LayerSpec& layer, Criterion criterion,
                                     std::uint64_t seed) {
    if (criterion == Criterion::snip) throw ValidationError("snip scores need gradients; use the toy benchmark");
    const auto& t = checkpoint.at(layer.name);
    if (t.shape != Shape{layer.out_dim, layer.in_dim}) throw ValidationError("shape mismatch for " + layer.name);
    const MatrixView<const float> w(t.f32(), layer.out_dim, layer.in_dim);
    std::span<const float> norms;
    if (needs_stats(criterion)) norms = stats->norms(layer.name);
    std::size_t index = 0;
    while (model.layers[index].name != layer.name) ++index;
    return score_layer(criterion, w, norms, layer_seed(seed, index), layer.name);
}

inline PruneOutcome prune_in_memory(const TensorMap& checkpoint, const PrunableModel& model,
                                    const ActivationStats* stats, const PruneOptions& opt) {
    const double keep_ratio = keep_ratio_for(opt.sparsity);
    if (needs_stats(opt.criterion)) {
        if (!stats)
            throw ValidationError("criterion " + std::string(to_string(opt.criterion)) + " needs activation stats");
        validate_stats(*stats, model);
    }
    const auto groups = resolve_tying(model);
    const auto canon = canonical_layers(model);

    PruneOutcome out;
    std::vector<ScoreMatrix> held;  // only for global_score, which ranks all layers jointly
    switch (opt.policy) {
        case BudgetPolicy::multimodal_magnitude:
            out.budgets = budgets_multimodal(model, checkpoint, keep_ratio);
            break;
        case BudgetPolicy::global_magnitude:
            out.budgets = budgets_global_magnitude(model, checkpoint, keep_ratio);
            break;
        case BudgetPolicy::uniform:
            out.budgets = budgets_uniform(model, keep_ratio);
            break;
        case BudgetPolicy::global_score:
            for (const auto& l : canon)
                held.push_back(score_model_layer(checkpoint, model, stats, l, opt.criterion, opt.seed));
            out.budgets = budgets_global_score(model, held, keep_ratio);
            break;
    }

    out.mask.criterion = opt.criterion;
    out.mask.policy = opt.policy;
    out.mask.keep_ratio = keep_ratio;
    out.mask.inverted = opt.invert;
    out.mask.model_spec = model_spec_json(model);
    for (std::size_t i = 0; i < canon.size(); ++i) {
        const auto& l = canon[i];
        const auto k = out.budgets.keep_count(l.name);
        if (held.empty()) {
            const auto scores = score_model_layer(checkpoint, model, stats, l, opt.criterion, opt.seed);
            out.mask.layers[l.name] = build_layer_mask(scores, k, opt.invert);
        } else {
            out.mask.layers[l.name] = build_layer_mask(held[i], k, opt.invert);
            held[i] = {};
        }
    }
    out.mask = propagate_tying(std::move(out.mask), groups);
    out.violations = verify_mask(out.mask, out.budgets, groups);
    return out;
}

}  // namespace multiflow
