// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Per-parameter saliency for one weight matrix W (out_dim x in_dim, row r =
// output node, column l = input node). Every criterion yields nonnegative
// scores where larger means keep.
//
// Information-flow score:
//   s_in[l]  = n[l] * mean_r |W[r,l]|          (signal emitted by input l)
//   s_out[r] = mean_l n[l] * |W[r,l]|          (signal received by output r)
//   S[r,l]   = s_in[l] * |W[r,l]| * s_out[r]
// with n the pooled activation L2 norm of each input.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "multiflow/detail/random.hpp"
#include "multiflow/errors.hpp"
#include "multiflow/matrix.hpp"

namespace multiflow {

enum class Criterion {
    multiflow,
    magnitude,
    lamp,
    l2norm,
    multiflow_edge_only,
    multiflow_nodes_only,
    random,
    snip,  // gradient-based; only produced by the toy benchmark
};

inline constexpr std::string_view to_string(Criterion c) {
    switch (c) {
        case Criterion::multiflow: return "multiflow";
        case Criterion::magnitude: return "magnitude";
        case Criterion::lamp: return "lamp";
        case Criterion::l2norm: return "l2norm";
        case Criterion::multiflow_edge_only: return "multiflow_edge_only";
        case Criterion::multiflow_nodes_only: return "multiflow_nodes_only";
        case Criterion::random: return "random";
        case Criterion::snip: return "snip";
    }
    return "?";
}

inline Criterion parse_criterion(std::string_view s) {
    for (auto c : {Criterion::multiflow, Criterion::magnitude, Criterion::lamp, Criterion::l2norm,
                   Criterion::multiflow_edge_only, Criterion::multiflow_nodes_only, Criterion::random, Criterion::snip})
        if (to_string(c) == s) return c;
    throw ValidationError("unknown criterion '" + std::string(s) + "'");
}

/// Criteria that read activation norms.
inline constexpr bool needs_stats(Criterion c) {
    return c == Criterion::multiflow || c == Criterion::multiflow_nodes_only;
}

struct ScoreMatrix {
    std::string layer;
    Criterion criterion = Criterion::magnitude;
    Matrix<float> values;
    std::optional<std::uint64_t> rng_seed;
};

struct NodeSaliencies {
    std::vector<float> s_in;   // length in_dim
    std::vector<float> s_out;  // length out_dim
};

namespace detail {

inline void check_finite(MatrixView<const float> w) {
    for (float v : w.data)
        if (!std::isfinite(v)) throw ValidationError("non-finite weight");
}

inline void check_norms(MatrixView<const float> w, std::span<const float> n) {
    if (n.size() != w.cols)
        throw ValidationError("dimension mismatch: " + std::to_string(n.size()) + " norms for " +
                              std::to_string(w.cols) + " inputs");
    for (float v : n)
        if (!std::isfinite(v) || v < 0.0f) throw ValidationError("activation norms must be finite and >= 0");
}

struct NodeTerms {
    std::vector<double> s_in, s_out;
};

// O(out*in): n[l] is hoisted out of the column mean.
inline NodeTerms node_terms(MatrixView<const float> w, std::span<const float> n) {
    check_finite(w);
    check_norms(w, n);
    NodeTerms t{std::vector<double>(w.cols, 0.0), std::vector<double>(w.rows, 0.0)};
    for (std::size_t r = 0; r < w.rows; ++r) {
        const auto row = w.row(r);
        double recv = 0.0;
        for (std::size_t l = 0; l < w.cols; ++l) {
            const double a = std::fabs(row[l]);
            t.s_in[l] += a;
            recv += static_cast<double>(n[l]) * a;
        }
        t.s_out[r] = recv / static_cast<double>(w.cols);
    }
    for (std::size_t l = 0; l < w.cols; ++l) t.s_in[l] = static_cast<double>(n[l]) * t.s_in[l] / static_cast<double>(w.rows);
    return t;
}

inline ScoreMatrix make_scores(std::string_view layer, Criterion c, std::size_t rows, std::size_t cols) {
    return ScoreMatrix{std::string(layer), c, Matrix<float>(rows, cols), std::nullopt};
}

}  // namespace detail

inline NodeSaliencies node_saliencies(MatrixView<const float> w, std::span<const float> n) {
    const auto t = detail::node_terms(w, n);
    NodeSaliencies s{std::vector<float>(w.cols), std::vector<float>(w.rows)};
    std::transform(t.s_in.begin(), t.s_in.end(), s.s_in.begin(), [](double v) { return static_cast<float>(v); });
    std::transform(t.s_out.begin(), t.s_out.end(), s.s_out.begin(), [](double v) { return static_cast<float>(v); });
    return s;
}

inline ScoreMatrix score_multiflow(MatrixView<const float> w, std::span<const float> n, std::string_view layer = {}) {
    const auto t = detail::node_terms(w, n);
    auto s = detail::make_scores(layer, Criterion::multiflow, w.rows, w.cols);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const auto row = w.row(r);
        auto out = s.values.row(r);
        for (std::size_t l = 0; l < w.cols; ++l)
            out[l] = static_cast<float>(t.s_in[l] * std::fabs(static_cast<double>(row[l])) * t.s_out[r]);
    }
    return s;
}

/// Literal per-edge evaluation; test oracle only.
inline ScoreMatrix score_multiflow_bruteforce(MatrixView<const float> w, std::span<const float> n,
                                              std::string_view layer = {}) {
    if (w.rows * w.cols > 1'000'000) throw ValidationError("bruteforce oracle limited to 10^6 parameters");
    detail::check_finite(w);
    detail::check_norms(w, n);
    auto s = detail::make_scores(layer, Criterion::multiflow, w.rows, w.cols);
    const double out_nodes = static_cast<double>(w.rows);
    const double in_nodes = static_cast<double>(w.cols);
    for (std::size_t r = 0; r < w.rows; ++r) {
        for (std::size_t l = 0; l < w.cols; ++l) {
            double emitted = 0.0;
            for (std::size_t rr = 0; rr < w.rows; ++rr) emitted += static_cast<double>(n[l]) * std::fabs(w(rr, l));
            emitted /= out_nodes;
            double received = 0.0;
            for (std::size_t ll = 0; ll < w.cols; ++ll) received += static_cast<double>(n[ll]) * std::fabs(w(r, ll));
            received /= in_nodes;
            s.values(r, l) = static_cast<float>(emitted * std::fabs(static_cast<double>(w(r, l))) * received);
        }
    }
    return s;
}

inline ScoreMatrix score_magnitude(MatrixView<const float> w, std::string_view layer = {}) {
    detail::check_finite(w);
    auto s = detail::make_scores(layer, Criterion::magnitude, w.rows, w.cols);
    std::transform(w.data.begin(), w.data.end(), s.values.data.begin(), [](float v) { return std::fabs(v); });
    return s;
}

/// Layer-adaptive magnitude: rank entries best-first (|w| desc, index asc);
/// score = w^2 / (sum of w^2 over entries ranked at or above it).
inline ScoreMatrix score_lamp(MatrixView<const float> w, std::string_view layer = {}) {
    detail::check_finite(w);
    if (std::all_of(w.data.begin(), w.data.end(), [](float v) { return v == 0.0f; }))
        throw ValidationError("degenerate layer: LAMP needs at least one nonzero weight");
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(w.data[a]) > std::fabs(w.data[b]); });
    auto s = detail::make_scores(layer, Criterion::lamp, w.rows, w.cols);
    double running = 0.0;
    for (std::size_t idx : order) {
        const double sq = static_cast<double>(w.data[idx]) * static_cast<double>(w.data[idx]);
        running += sq;
        s.values.data[idx] = static_cast<float>(sq / running);
    }
    return s;
}

inline ScoreMatrix score_l2norm(MatrixView<const float> w, std::string_view layer = {}) {
    detail::check_finite(w);
    double sumsq = 0.0;
    for (float v : w.data) sumsq += static_cast<double>(v) * static_cast<double>(v);
    if (sumsq == 0.0) throw ValidationError("degenerate layer: zero Frobenius norm");
    const double frob = std::sqrt(sumsq);
    auto s = detail::make_scores(layer, Criterion::l2norm, w.rows, w.cols);
    std::transform(w.data.begin(), w.data.end(), s.values.data.begin(),
                   [&](float v) { return static_cast<float>(std::fabs(static_cast<double>(v)) / frob); });
    return s;
}

enum class AblationMode { edge_only, nodes_only };

inline ScoreMatrix score_ablation(MatrixView<const float> w, std::span<const float> n, AblationMode mode,
                                  std::string_view layer = {}) {
    if (mode == AblationMode::edge_only) {
        detail::check_norms(w, n);
        auto s = score_magnitude(w, layer);
        s.criterion = Criterion::multiflow_edge_only;
        return s;
    }
    const auto t = detail::node_terms(w, n);
    auto s = detail::make_scores(layer, Criterion::multiflow_nodes_only, w.rows, w.cols);
    for (std::size_t r = 0; r < w.rows; ++r)
        for (std::size_t l = 0; l < w.cols; ++l) s.values(r, l) = static_cast<float>(t.s_in[l] * t.s_out[r]);
    return s;
}

/// i.i.d. uniform [0,1) scores; identical for identical (shape, seed).
inline ScoreMatrix score_random(std::size_t rows, std::size_t cols, std::uint64_t seed, std::string_view layer = {}) {
    auto s = detail::make_scores(layer, Criterion::random, rows, cols);
    auto rng = detail::seeded_engine({seed});
    for (auto& v : s.values.data) v = detail::uniform01(rng);
    s.rng_seed = seed;
    return s;
}

/// Dispatch on criterion. `norms` may be empty for criteria that do not read them.
inline ScoreMatrix score_layer(Criterion c, MatrixView<const float> w, std::span<const float> norms,
                               std::uint64_t seed, std::string_view layer) {
    switch (c) {
        case Criterion::multiflow: return score_multiflow(w, norms, layer);
        case Criterion::magnitude: return score_magnitude(w, layer);
        case Criterion::lamp: return score_lamp(w, layer);
        case Criterion::l2norm: return score_l2norm(w, layer);
        case Criterion::multiflow_edge_only: {
            auto s = score_magnitude(w, layer);
            s.criterion = Criterion::multiflow_edge_only;
            return s;
        }
        case Criterion::multiflow_nodes_only: return score_ablation(w, norms, AblationMode::nodes_only, layer);
        case Criterion::random: return score_random(w.rows, w.cols, seed, layer);
        case Criterion::snip: throw ValidationError("snip scores need gradients; use the toy benchmark");
    }
    throw ValidationError("unhandled criterion");
}

}  // namespace multiflow
