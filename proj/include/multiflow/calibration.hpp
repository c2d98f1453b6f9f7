// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Streaming per-input-neuron activation norms. For every prunable layer we
// keep the running sum of squares of each input coordinate over all observed
// tokens; the finalized norm is sqrt of that pooled sum (no averaging).

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "multiflow/errors.hpp"
#include "multiflow/matrix.hpp"
#include "multiflow/modelspec.hpp"
#include "multiflow/tensorstore.hpp"

namespace multiflow {

struct ActivationStats {
    std::map<std::string, std::vector<float>, std::less<>> in_norm;
    std::uint64_t token_count = 0;
    std::string source_digest;

    std::span<const float> norms(std::string_view layer) const {
        auto it = in_norm.find(layer);
        if (it == in_norm.end()) throw ValidationError("missing stats for layer " + std::string(layer));
        return it->second;
    }

    bool operator==(const ActivationStats&) const = default;
};

class NormAccumulator {
public:
    struct LayerSums {
        std::vector<double> sumsq;
        std::uint64_t tokens = 0;
        bool operator==(const LayerSums&) const = default;
    };

    NormAccumulator() = default;
    explicit NormAccumulator(const PrunableModel& model) {
        for (const auto& l : model.layers) layers_[l.name] = LayerSums{std::vector<double>(l.in_dim, 0.0), 0};
    }

    /// `batch` is tokens x in_dim, row-major.
    void accumulate(std::string_view layer, MatrixView<const float> batch) {
        auto& acc = find(layer);
        if (batch.cols != acc.sumsq.size())
            throw ValidationError("width mismatch for " + std::string(layer) + ": batch has " +
                                  std::to_string(batch.cols) + " columns, layer has " +
                                  std::to_string(acc.sumsq.size()) + " inputs");
        for (float v : batch.data)
            if (!std::isfinite(v)) throw ValidationError("non-finite activation for layer " + std::string(layer));
        for (std::size_t t = 0; t < batch.rows; ++t) {
            const auto row = batch.row(t);
            for (std::size_t i = 0; i < row.size(); ++i) {
                const double x = row[i];
                acc.sumsq[i] += x * x;
            }
        }
        acc.tokens += batch.rows;
    }

    /// Elementwise sum with an accumulator over a disjoint shard of the same stream.
    void merge(const NormAccumulator& other) {
        for (const auto& [name, theirs] : other.layers_) {
            auto& mine = find(name);
            if (mine.sumsq.size() != theirs.sumsq.size())
                throw ValidationError("merge: width mismatch for " + name);
            for (std::size_t i = 0; i < mine.sumsq.size(); ++i) mine.sumsq[i] += theirs.sumsq[i];
            mine.tokens += theirs.tokens;
        }
    }

    /// Tied layers see the union of their call-sites' activations.
    void pool_tied(const PrunableModel& model) {
        for (const auto& group : resolve_tying(model)) {
            if (group.size() < 2) continue;
            LayerSums pooled = find(group.front());
            for (std::size_t m = 1; m < group.size(); ++m) {
                const auto& other = find(group[m]);
                for (std::size_t i = 0; i < pooled.sumsq.size(); ++i) pooled.sumsq[i] += other.sumsq[i];
                pooled.tokens += other.tokens;
            }
            for (const auto& name : group) find(name) = pooled;
        }
    }

    ActivationStats finalize(std::string source_digest = {}) const {
        ActivationStats stats;
        stats.source_digest = std::move(source_digest);
        for (const auto& [name, acc] : layers_) {
            if (acc.tokens == 0) throw ValidationError("no calibration data observed for layer " + name);
            std::vector<float> norms(acc.sumsq.size());
            std::transform(acc.sumsq.begin(), acc.sumsq.end(), norms.begin(),
                           [](double s) { return static_cast<float>(std::sqrt(s)); });
            stats.in_norm.emplace(name, std::move(norms));
            stats.token_count = std::max(stats.token_count, acc.tokens);
        }
        if (layers_.empty() || stats.token_count == 0) throw ValidationError("no calibration data");
        return stats;
    }

    const LayerSums& layer(std::string_view name) const {
        auto it = layers_.find(name);
        if (it == layers_.end()) throw ValidationError("accumulator has no layer " + std::string(name));
        return it->second;
    }
    std::size_t layer_count() const { return layers_.size(); }

    bool operator==(const NormAccumulator&) const = default;

private:
    LayerSums& find(std::string_view name) { return const_cast<LayerSums&>(layer(name)); }

    std::map<std::string, LayerSums, std::less<>> layers_;
};

inline NormAccumulator new_accumulator(const PrunableModel& model) { return NormAccumulator(model); }

/// FNV-1a 64, hex encoded. Identifies the calibration source in stats metadata.
inline std::string digest_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    auto [end, ec] = std::to_chars(buf, buf + 16, h, 16);
    std::string hex(buf, end);
    return std::string(16 - hex.size(), '0') + hex;
}

inline constexpr std::string_view kNormSuffix = ".in_norm";

inline TensorMap stats_to_container(const ActivationStats& stats) {
    if (stats.token_count == 0) throw ValidationError("stats with zero tokens cannot be written");
    TensorMap tm;
    for (const auto& [name, norms] : stats.in_norm)
        tm.insert(DenseTensor::from_f32(name + std::string(kNormSuffix), {norms.size()}, norms));
    tm.metadata["token_count"] = std::to_string(stats.token_count);
    tm.metadata["source_digest"] = stats.source_digest;
    return tm;
}

inline ActivationStats stats_from_container(const TensorMap& tm) {
    ActivationStats stats;
    auto tc = tm.metadata.find("token_count");
    if (tc == tm.metadata.end()) throw FormatError("stats file lacks token_count metadata");
    const auto& s = tc->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), stats.token_count);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw FormatError("invalid token_count '" + s + "'");
    if (stats.token_count == 0) throw FormatError("stats file has token_count 0");
    if (auto sd = tm.metadata.find("source_digest"); sd != tm.metadata.end()) stats.source_digest = sd->second;
    for (const auto& [name, t] : tm.entries) {
        if (!name.ends_with(kNormSuffix)) throw FormatError("unexpected tensor in stats file: " + name);
        if (t.shape.size() != 1) throw FormatError("stats tensor " + name + " must be 1-D");
        const auto values = t.f32();
        for (float v : values)
            if (!std::isfinite(v) || v < 0.0f) throw FormatError("stats tensor " + name + " has invalid norms");
        stats.in_norm.emplace(name.substr(0, name.size() - kNormSuffix.size()),
                              std::vector<float>(values.begin(), values.end()));
    }
    return stats;
}

inline void write_stats(const ActivationStats& stats, const std::filesystem::path& path) {
    write_container(stats_to_container(stats), path);
}

inline ActivationStats read_stats(const std::filesystem::path& path) {
    return stats_from_container(read_container(path));
}

/// Every model layer must have a norm vector of length in_dim.
inline void validate_stats(const ActivationStats& stats, const PrunableModel& model) {
    for (const auto& l : model.layers) {
        const auto norms = stats.norms(l.name);
        if (norms.size() != l.in_dim)
            throw ValidationError("norm-length mismatch for " + l.name + ": " + std::to_string(norms.size()) +
                                  " vs in_dim " + std::to_string(l.in_dim));
    }
}

}  // namespace multiflow
