// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace multiflow::detail {

/// Uniform float in [0, 1) from the top 24 bits of one engine draw.
inline float uniform01(std::mt19937_64& rng) {
    return static_cast<float>(rng() >> 40) * 0x1.0p-24f;
}

/// Engine keyed on several integers (e.g. seed and layer index).
inline std::mt19937_64 seeded_engine(std::initializer_list<std::uint64_t> keys) {
    std::vector<std::uint32_t> words;
    for (auto k : keys) {
        words.push_back(static_cast<std::uint32_t>(k));
        words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

}  // namespace multiflow::detail
