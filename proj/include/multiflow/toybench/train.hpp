// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Masked SGD, retrieval evaluation, toy calibration and the gradient-based
// baselines (SNIP, IterSNIP).

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "multiflow/budgeting.hpp"
#include "multiflow/calibration.hpp"
#include "multiflow/errors.hpp"
#include "multiflow/masking.hpp"
#include "multiflow/modelspec.hpp"
#include "multiflow/scoring.hpp"
#include "multiflow/toybench/toy_model.hpp"

namespace multiflow::toy {

/// The toy model as a prunable model (shapes taken from `m`).
template <class T>
PrunableModel toy_prunable(const ToyVLM<T>& m) {
    return load_model_spec(toy_model_spec(), m.to_tensors());
}

using ToyMask = std::array<std::vector<std::uint8_t>, kNumLayers>;

inline ToyMask toy_mask(const PruneMask& mask) {
    ToyMask out;
    for (std::size_t i = 0; i < kNumLayers; ++i) out[i] = mask.at(kLayerNames[i]).bits;
    return out;
}

template <class T>
void apply_toy_mask(ToyParams<T>& p, const ToyMask& mask) {
    for (std::size_t i = 0; i < kNumLayers; ++i) {
        auto& w = p.w[i].data;
        if (mask[i].size() != w.size()) throw ValidationError("mask shape mismatch for " + std::string(kLayerNames[i]));
        for (std::size_t j = 0; j < w.size(); ++j)
            if (!mask[i][j]) w[j] = T(0);
    }
}

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double lr = 0.05;  // peak; cosine decay to zero over `steps`
    double momentum = 0.9;
};

template <class T>
struct TrainState {
    ToyVLM<T> model;
    ToyParams<T> velocity;
    std::size_t step = 0;
    double lr = 0.0;
    std::mt19937_64 rng;
    std::optional<ToyMask> mask;

    static TrainState start(ToyVLM<T> m, std::uint64_t data_seed, std::optional<ToyMask> mask = std::nullopt) {
        TrainState s{std::move(m), {}, 0, 0.0, multiflow::detail::seeded_engine({data_seed, 0x7a1aULL}),
                     std::move(mask)};
        s.velocity = ToyParams<T>::zeros(s.model.config);
        if (s.mask) apply_toy_mask(s.model.params, *s.mask);
        return s;
    }
};

struct TrainResult {
    bool diverged = false;
    std::size_t steps_run = 0;
    double final_loss = 0.0;
};

inline double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
    if (cfg.steps == 0) return cfg.lr;
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(cfg.steps)));
}

/// One momentum step; masked weights (and their velocity) are re-zeroed afterwards.
/// Returns the pre-step loss.
template <class T>
T sgd_step(TrainState<T>& s, const PairBatch<T>& batch, const TrainConfig& cfg) {
    auto grad = ToyParams<T>::zeros(s.model.config);
    const T loss = loss_and_grad(s.model, batch, &grad);
    s.lr = scheduled_lr(cfg, s.step);
    const T lr = static_cast<T>(s.lr), mu = static_cast<T>(cfg.momentum);
    auto& p = s.model.params;
    for (std::size_t i = 0; i < kNumLayers; ++i) {
        auto& w = p.w[i].data;
        auto& v = s.velocity.w[i].data;
        const auto& g = grad.w[i].data;
        for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = mu * v[j] + g[j];
            w[j] -= lr * v[j];
        }
    }
    s.velocity.bias = mu * s.velocity.bias + grad.bias;
    p.bias -= lr * s.velocity.bias;
    if (s.mask) {
        apply_toy_mask(p, *s.mask);
        apply_toy_mask(s.velocity, *s.mask);
    }
    ++s.step;
    return loss;
}

template <class T>
bool params_finite(const ToyParams<T>& p) {
    if (!std::isfinite(p.bias)) return false;
    for (const auto& m : p.w)
        for (T v : m.data)
            if (!std::isfinite(v)) return false;
    return true;
}

template <class T>
TrainResult train(TrainState<T>& s, const SyntheticPairSet& data, const TrainConfig& cfg) {
    TrainResult r;
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        const auto batch = data.sample<T>(s.rng, cfg.batch_size);
        const T loss = sgd_step(s, batch, cfg);
        r.final_loss = static_cast<double>(loss);
        r.steps_run = t + 1;
        if (!std::isfinite(loss) || !params_finite(s.model.params)) {
            r.diverged = true;
            break;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------

/// `groups` held-out batches of `ways` pairs each, drawn from their own stream.
template <class T = float>
std::vector<PairBatch<T>> make_eval_set(const SyntheticPairSet& data, std::uint64_t seed, std::size_t groups = 64,
                                        std::size_t ways = 32) {
    auto rng = multiflow::detail::seeded_engine({seed, 0xe7a1ULL});
    std::vector<PairBatch<T>> out;
    out.reserve(groups);
    for (std::size_t g = 0; g < groups; ++g) out.push_back(data.sample<T>(rng, ways));
    return out;
}

/// Fraction of vision queries whose partner has the highest logit among the
/// group's candidates. A tie for first earns 1/(number tied).
template <class T>
double retrieval_accuracy(const ToyVLM<T>& m, std::span<const PairBatch<T>> eval) {
    double credit = 0.0;
    std::size_t queries = 0;
    for (const auto& batch : eval) {
        const auto z = logits(m, batch);
        for (std::size_t i = 0; i < z.rows; ++i) {
            ++queries;
            const T best = *std::max_element(z.row(i).begin(), z.row(i).end());
            if (!(z(i, i) == best)) continue;
            const auto tied = std::count(z.row(i).begin(), z.row(i).end(), best);
            credit += 1.0 / static_cast<double>(tied);
        }
    }
    return queries == 0 ? 0.0 : credit / static_cast<double>(queries);
}

// ---------------------------------------------------------------------------

template <class T = float>
std::vector<PairBatch<T>> sample_batches(const SyntheticPairSet& data, std::mt19937_64& rng, std::size_t count,
                                         std::size_t size) {
    std::vector<PairBatch<T>> out;
    out.reserve(count);
    for (std::size_t b = 0; b < count; ++b) out.push_back(data.sample<T>(rng, size));
    return out;
}

inline void check_toy_layers(const PrunableModel& model) {
    for (const auto& l : model.layers)
        if (std::find(kLayerNames.begin(), kLayerNames.end(), l.name) == kLayerNames.end())
            throw ValidationError("layer " + l.name + " is not part of the toy architecture");
}

/// Input-norm statistics over `batches` for the layers of `model`, which must
/// name toy layers.
inline ActivationStats calibrate_toy(const ToyVLM<float>& m, const PrunableModel& model,
                                     std::span<const PairBatch<float>> batches, std::string source_digest = {}) {
    if (batches.empty()) throw ValidationError("no calibration data");
    check_toy_layers(model);
    NormAccumulator acc(model);
    for (const auto& b : batches)
        for (const auto& [name, a] : layer_inputs(m, b))
            if (model.find(name)) acc.accumulate(name, a.view());
    acc.pool_tied(model);
    return acc.finalize(std::move(source_digest));
}

inline ActivationStats calibrate_toy(const ToyVLM<float>& m, std::span<const PairBatch<float>> batches,
                                     std::string source_digest = {}) {
    return calibrate_toy(m, toy_prunable(m), batches, std::move(source_digest));
}

/// Provenance string recorded in toy stats files.
inline std::string toy_stats_digest(std::uint64_t world_seed, std::uint64_t seed, std::size_t batches,
                                    std::size_t batch_size) {
    return digest_hex("toy:world=" + std::to_string(world_seed) + ",seed=" + std::to_string(seed) +
                      ",batches=" + std::to_string(batches) + "x" + std::to_string(batch_size));
}

/// SNIP saliency |theta * dL/dtheta|, the gradient summed over `batches`.
template <class T>
std::vector<ScoreMatrix> snip_scores(const ToyVLM<T>& m, std::span<const PairBatch<T>> batches) {
    if (batches.empty()) throw ValidationError("snip needs at least one batch");
    auto grad = ToyParams<T>::zeros(m.config);
    for (const auto& b : batches) loss_and_grad(m, b, &grad);
    std::vector<ScoreMatrix> out;
    for (std::size_t i = 0; i < kNumLayers; ++i) {
        const auto& w = m.params.w[i];
        ScoreMatrix s{std::string(kLayerNames[i]), Criterion::snip, Matrix<float>(w.rows, w.cols), std::nullopt};
        for (std::size_t j = 0; j < w.data.size(); ++j)
            s.values.data[j] = static_cast<float>(std::fabs(w.data[j] * grad.w[i].data[j]));
        out.push_back(std::move(s));
    }
    return out;
}

/// Keep ratio after each of `rounds` rounds: rho_final^(t/T), t = 1..T.
inline std::vector<double> itersnip_schedule(double keep_final, std::size_t rounds) {
    if (rounds == 0) throw ValidationError("itersnip needs at least one round");
    if (!(keep_final >= 0.0 && keep_final <= 1.0)) throw ValidationError("keep ratio must lie in [0, 1]");
    std::vector<double> out;
    for (std::size_t t = 1; t <= rounds; ++t)
        out.push_back(t == rounds ? keep_final
                                  : std::pow(keep_final, static_cast<double>(t) / static_cast<double>(rounds)));
    return out;
}

/// Shard bounds [begin, end) of round t when `count` batches are split into `rounds` contiguous shards.
inline std::pair<std::size_t, std::size_t> shard_bounds(std::size_t count, std::size_t rounds, std::size_t t) {
    return {t * count / rounds, (t + 1) * count / rounds};
}

/// Iterative SNIP with an exponential keep schedule. Each round re-scores the
/// surviving weights of the masked model on its own shard; pruned weights score
/// -1 so they can never return. Budgets are global over scores in every round.
template <class T>
PruneMask itersnip(const ToyVLM<T>& m, std::span<const PairBatch<T>> batches, std::size_t rounds, double sparsity,
                   std::vector<PruneMask>* history = nullptr) {
    if (rounds == 0) throw ValidationError("itersnip needs at least one round");
    if (rounds > batches.size())
        throw ValidationError("itersnip: " + std::to_string(rounds) + " rounds exceed " +
                              std::to_string(batches.size()) + " batches");
    if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ValidationError("sparsity must lie in [0, 1]");
    const auto model = toy_prunable(m);
    const auto schedule = itersnip_schedule(1.0 - sparsity, rounds);

    PruneMask mask;
    ToyVLM<T> current = m;
    for (std::size_t t = 0; t < rounds; ++t) {
        const auto [b, e] = shard_bounds(batches.size(), rounds, t);
        auto scores = snip_scores(current, batches.subspan(b, e - b));
        if (t > 0)
            for (std::size_t i = 0; i < kNumLayers; ++i) {
                const auto& bits = mask.at(kLayerNames[i]).bits;
                for (std::size_t j = 0; j < bits.size(); ++j)
                    if (!bits[j]) scores[i].values.data[j] = -1.0f;
            }
        const auto plan = budgets_global_score(model, scores, schedule[t]);
        mask = build_mask(scores, plan, false);
        mask.model_spec = model_spec_json(model);
        apply_toy_mask(current.params, toy_mask(mask));
        if (history) history->push_back(mask);
    }
    return mask;
}

}  // namespace multiflow::toy
