// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "multiflow/budgeting.hpp"
#include "multiflow/errors.hpp"
#include "multiflow/modelspec.hpp"
#include "multiflow/scoring.hpp"
#include "multiflow/tensorstore.hpp"

namespace multiflow {

struct LayerMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> bits;

    std::uint64_t kept() const {
        return static_cast<std::uint64_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
    }
    bool operator==(const LayerMask&) const = default;
};

struct PruneMask {
    std::map<std::string, LayerMask, std::less<>> layers;
    Criterion criterion = Criterion::magnitude;
    BudgetPolicy policy = BudgetPolicy::uniform;
    double keep_ratio = 1.0;
    bool inverted = false;
    nlohmann::json model_spec;  // model-spec config this mask was built for (null if unknown)

    const LayerMask& at(std::string_view layer) const {
        auto it = layers.find(layer);
        if (it == layers.end()) throw ValidationError("mask has no layer " + std::string(layer));
        return it->second;
    }

    bool operator==(const PruneMask&) const = default;
};

/// Keeps the k best scores (or the k worst when `invert`), ties by ascending flat index.
inline LayerMask build_layer_mask(const ScoreMatrix& scores, std::uint64_t k, bool invert) {
    const auto& v = scores.values;
    if (k > v.data.size())
        throw ValidationError("budget " + std::to_string(k) + " exceeds size of layer " + scores.layer);
    for (float s : v.data)
        if (!std::isfinite(s)) throw ValidationError("non-finite score in layer " + scores.layer);
    LayerMask m{v.rows, v.cols, std::vector<std::uint8_t>(v.data.size())};
    select_topk_into(v.data, static_cast<std::size_t>(k), invert ? Order::ascending : Order::descending, m.bits);
    return m;
}

inline PruneMask build_mask(std::span<const ScoreMatrix> scores, const BudgetPlan& budgets, bool invert) {
    if (scores.size() != budgets.per_layer.size())
        throw ValidationError("layer set mismatch between scores and budgets");
    PruneMask mask;
    mask.policy = budgets.policy;
    mask.keep_ratio = budgets.keep_ratio;
    mask.inverted = invert;
    if (!scores.empty()) mask.criterion = scores.front().criterion;
    for (const auto& s : scores) {
        std::uint64_t k;
        try {
            k = budgets.keep_count(s.layer);
        } catch (const ValidationError&) {
            throw ValidationError("layer set mismatch: no budget for " + s.layer);
        }
        mask.layers[s.layer] = build_layer_mask(s, k, invert);
    }
    return mask;
}

/// Copies each group's canonical (first) mask onto the other members.
inline PruneMask propagate_tying(PruneMask mask, const TieGroups& groups) {
    for (const auto& group : groups) {
        if (group.size() < 2) continue;
        const LayerMask canonical = mask.at(group.front());
        for (std::size_t i = 1; i < group.size(); ++i) {
            auto& member = mask.layers[group[i]];
            if (!member.bits.empty() && (member.rows != canonical.rows || member.cols != canonical.cols))
                throw ValidationError("shape mismatch within tie group: " + group.front() + " vs " + group[i]);
            member = canonical;
        }
    }
    return mask;
}

/// Theta (.) m on the masked tensors; every other tensor passes through.
inline TensorMap apply_mask(TensorMap checkpoint, const PruneMask& mask) {
    for (const auto& [name, m] : mask.layers) {
        auto& t = checkpoint.at(name);
        if (t.shape != Shape{m.rows, m.cols}) throw ValidationError("shape mismatch applying mask to " + name);
        auto w = t.f32();
        for (std::size_t i = 0; i < w.size(); ++i)
            if (!m.bits[i]) w[i] = 0.0f;
    }
    return checkpoint;
}

// ---------------------------------------------------------------------------
// Mask files: "<layer>.mask" U8 tensors plus string metadata.

inline constexpr std::string_view kMaskSuffix = ".mask";

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw FormatError("invalid number '" + s + "'");
    return v;
}

inline const std::string& required_meta(const TensorMap& tm, std::string_view key) {
    auto it = tm.metadata.find(key);
    if (it == tm.metadata.end()) throw FormatError("mask file lacks '" + std::string(key) + "' metadata");
    return it->second;
}

}  // namespace detail

inline TensorMap mask_to_container(const PruneMask& mask) {
    TensorMap tm;
    for (const auto& [name, m] : mask.layers)
        tm.insert(DenseTensor::from_u8(name + std::string(kMaskSuffix), {m.rows, m.cols}, m.bits));
    tm.metadata["criterion"] = to_string(mask.criterion);
    tm.metadata["policy"] = to_string(mask.policy);
    tm.metadata["keep_ratio"] = detail::format_double(mask.keep_ratio);
    tm.metadata["inverted"] = mask.inverted ? "true" : "false";
    if (!mask.model_spec.is_null()) tm.metadata["model_spec"] = mask.model_spec.dump();
    return tm;
}

inline PruneMask mask_from_container(const TensorMap& tm) {
    PruneMask mask;
    try {
        mask.criterion = parse_criterion(detail::required_meta(tm, "criterion"));
        mask.policy = parse_policy(detail::required_meta(tm, "policy"));
    } catch (const ValidationError& e) {
        throw FormatError(e.what());
    }
    mask.keep_ratio = detail::parse_double(detail::required_meta(tm, "keep_ratio"));
    const auto& inv = detail::required_meta(tm, "inverted");
    if (inv != "true" && inv != "false") throw FormatError("invalid 'inverted' metadata '" + inv + "'");
    mask.inverted = inv == "true";
    if (auto it = tm.metadata.find("model_spec"); it != tm.metadata.end()) {
        try {
            mask.model_spec = nlohmann::json::parse(it->second);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("invalid model_spec metadata: ") + e.what());
        }
    }
    for (const auto& [name, t] : tm.entries) {
        if (!name.ends_with(kMaskSuffix)) throw FormatError("unexpected tensor in mask file: " + name);
        if (t.shape.size() != 2) throw FormatError("mask tensor " + name + " must be 2-D");
        const auto bits = t.u8();
        mask.layers.emplace(name.substr(0, name.size() - kMaskSuffix.size()),
                            LayerMask{t.shape[0], t.shape[1], {bits.begin(), bits.end()}});
    }
    return mask;
}

inline void write_mask(const PruneMask& mask, const std::filesystem::path& path) {
    write_container(mask_to_container(mask), path);
}

inline PruneMask read_mask(const std::filesystem::path& path) { return mask_from_container(read_container(path)); }

// ---------------------------------------------------------------------------

struct SparsityRow {
    std::string modality;
    std::uint64_t depth_index = 0;
    std::string layer;
    std::uint64_t size = 0;
    std::uint64_t kept = 0;
    double sparsity = 0.0;
    bool operator==(const SparsityRow&) const = default;
};

struct SparsityReport {
    std::vector<SparsityRow> rows;  // by (declared modality order, depth_index)
    std::map<std::string, double> per_modality;
    double global_sparsity = 0.0;
    std::vector<std::string> collapsed_layers;
};

inline SparsityReport sparsity_report(const PruneMask& mask, const PrunableModel& model) {
    SparsityReport rep;
    std::uint64_t total = 0, kept = 0;
    for (const auto& group : partition_by_modality(model)) {
        std::uint64_t m_total = 0, m_kept = 0;
        for (const auto& l : group.layers) {
            const auto k = mask.at(l.name).kept();
            rep.rows.push_back({l.modality, l.depth_index, l.name, l.size(), k,
                                1.0 - static_cast<double>(k) / static_cast<double>(l.size())});
            if (k == 0) rep.collapsed_layers.push_back(l.name);
            m_total += l.size();
            m_kept += k;
        }
        rep.per_modality[group.modality] = 1.0 - static_cast<double>(m_kept) / static_cast<double>(m_total);
        total += m_total;
        kept += m_kept;
    }
    rep.global_sparsity = total == 0 ? 0.0 : 1.0 - static_cast<double>(kept) / static_cast<double>(total);
    return rep;
}

inline std::string report_csv(const SparsityReport& rep) {
    std::ostringstream out;
    out << "modality,depth_index,layer,size,kept,sparsity\n";
    for (const auto& r : rep.rows)
        out << r.modality << ',' << r.depth_index << ',' << r.layer << ',' << r.size << ',' << r.kept << ','
            << detail::format_double(r.sparsity) << '\n';
    return out.str();
}

inline nlohmann::json report_json(const SparsityReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"modality", r.modality},
                        {"depth_index", r.depth_index},
                        {"layer", r.layer},
                        {"size", r.size},
                        {"kept", r.kept},
                        {"sparsity", r.sparsity}});
    return {{"layers", std::move(rows)},
            {"per_modality", rep.per_modality},
            {"global_sparsity", rep.global_sparsity},
            {"collapsed_layers", rep.collapsed_layers}};
}

struct Violation {
    std::string kind;  // "missing layer", "unexpected layer", "non-binary entry", "budget mismatch", "tie violation"
    std::string layer;
    std::string detail;
    bool operator==(const Violation&) const = default;
};

inline std::vector<Violation> verify_mask(const PruneMask& mask, const BudgetPlan& budgets, const TieGroups& groups) {
    std::vector<Violation> out;
    for (const auto& [name, k] : budgets.per_layer) {
        auto it = mask.layers.find(name);
        if (it == mask.layers.end()) {
            out.push_back({"missing layer", name, "no mask for budgeted layer"});
            continue;
        }
        const auto& m = it->second;
        if (std::any_of(m.bits.begin(), m.bits.end(), [](std::uint8_t b) { return b > 1; }))
            out.push_back({"non-binary entry", name, "mask entries must be 0 or 1"});
        if (m.kept() != k)
            out.push_back({"budget mismatch", name,
                           "kept " + std::to_string(m.kept()) + ", budget " + std::to_string(k)});
    }
    for (const auto& [name, m] : mask.layers) {
        const bool budgeted = std::any_of(budgets.per_layer.begin(), budgets.per_layer.end(),
                                          [&](const auto& p) { return p.first == name; });
        if (!budgeted) out.push_back({"unexpected layer", name, "mask layer absent from budget plan"});
    }
    for (const auto& group : groups) {
        if (group.size() < 2) continue;
        auto first = mask.layers.find(group.front());
        if (first == mask.layers.end()) continue;
        for (std::size_t i = 1; i < group.size(); ++i) {
            auto it = mask.layers.find(group[i]);
            if (it != mask.layers.end() && it->second != first->second)
                out.push_back({"tie violation", group[i], "differs from tied layer " + group.front()});
        }
    }
    return out;
}

}  // namespace multiflow
