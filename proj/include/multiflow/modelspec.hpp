// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "multiflow/errors.hpp"
#include "multiflow/tensorstore.hpp"

namespace multiflow {

/// One prunable 2-D weight: a complete bipartite graph from in_dim inputs to out_dim outputs.
struct LayerSpec {
    std::string name;
    std::uint64_t out_dim = 0;
    std::uint64_t in_dim = 0;
    std::string modality;
    std::uint64_t depth_index = 0;
    std::optional<std::string> tie_group;

    std::uint64_t size() const { return out_dim * in_dim; }
    bool operator==(const LayerSpec&) const = default;
};

struct PrunableModel {
    std::vector<LayerSpec> layers;  // config listing order
    std::vector<std::string> modalities;
    std::uint64_t global_param_count = 0;

    const LayerSpec* find(std::string_view name) const {
        auto it = std::find_if(layers.begin(), layers.end(), [&](const LayerSpec& l) { return l.name == name; });
        return it == layers.end() ? nullptr : &*it;
    }
    const LayerSpec& at(std::string_view name) const {
        if (const auto* l = find(name)) return *l;
        throw ValidationError("layer not in model spec: " + std::string(name));
    }
    std::size_t modality_rank(std::string_view m) const {
        return static_cast<std::size_t>(std::find(modalities.begin(), modalities.end(), m) - modalities.begin());
    }

    bool operator==(const PrunableModel&) const = default;
};

/// Returns the shape of a tensor by name, or nullopt when it does not exist.
using ShapeLookup = std::function<std::optional<Shape>(std::string_view)>;

inline PrunableModel load_model_spec(const nlohmann::json& config, const ShapeLookup& shape_of) {
    PrunableModel model;
    try {
        if (!config.is_object()) throw ValidationError("model spec must be a JSON object");
        for (const auto& m : config.at("modalities")) {
            auto name = m.get<std::string>();
            if (std::find(model.modalities.begin(), model.modalities.end(), name) != model.modalities.end())
                throw ValidationError("duplicate modality: " + name);
            model.modalities.push_back(std::move(name));
        }

        std::map<std::string, std::uint64_t> next_depth;
        std::set<std::pair<std::string, std::uint64_t>> seen_depth;
        std::set<std::string> seen_names;
        for (const auto& entry : config.at("layers")) {
            LayerSpec l;
            l.name = entry.at("name").get<std::string>();
            l.modality = entry.at("modality").get<std::string>();
            if (!seen_names.insert(l.name).second) throw ValidationError("duplicate layer: " + l.name);
            if (std::find(model.modalities.begin(), model.modalities.end(), l.modality) == model.modalities.end())
                throw ValidationError("unknown modality '" + l.modality + "' for layer " + l.name);
            l.depth_index = entry.contains("depth_index") ? entry.at("depth_index").get<std::uint64_t>()
                                                          : next_depth[l.modality];
            next_depth[l.modality] = std::max(next_depth[l.modality], l.depth_index + 1);
            if (!seen_depth.emplace(l.modality, l.depth_index).second)
                throw ValidationError("duplicate depth_index " + std::to_string(l.depth_index) + " in modality " +
                                      l.modality);
            if (entry.contains("tie_group") && !entry.at("tie_group").is_null())
                l.tie_group = entry.at("tie_group").get<std::string>();

            const auto shape = shape_of(l.name);
            if (!shape) throw ValidationError("missing tensor: " + l.name);
            if (shape->size() != 2 || (*shape)[0] == 0 || (*shape)[1] == 0)
                throw ValidationError("shape mismatch: prunable tensor " + l.name + " must be a non-empty 2-D matrix");
            l.out_dim = (*shape)[0];
            l.in_dim = (*shape)[1];
            model.global_param_count += l.size();
            model.layers.push_back(std::move(l));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed model spec: ") + e.what());
    }

    std::map<std::string, const LayerSpec*> tie_first;
    for (const auto& l : model.layers) {
        if (!l.tie_group) continue;
        auto [it, inserted] = tie_first.emplace(*l.tie_group, &l);
        if (inserted) continue;
        const LayerSpec& first = *it->second;
        if (first.out_dim != l.out_dim || first.in_dim != l.in_dim)
            throw ValidationError("tie shape conflict in group '" + *l.tie_group + "': " + first.name + " vs " + l.name);
        if (first.modality != l.modality)
            throw ValidationError("tie modality conflict in group '" + *l.tie_group + "': " + first.name + " vs " +
                                  l.name);
    }
    return model;
}

inline PrunableModel load_model_spec(const nlohmann::json& config, const TensorMap& checkpoint) {
    return load_model_spec(config, [&](std::string_view name) -> std::optional<Shape> {
        auto it = checkpoint.entries.find(name);
        if (it == checkpoint.entries.end()) return std::nullopt;
        return it->second.shape;
    });
}

/// Inverse of load_model_spec's config parsing (shapes are not part of the config).
inline nlohmann::json model_spec_json(const PrunableModel& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : model.layers) {
        nlohmann::json e = {{"name", l.name}, {"modality", l.modality}, {"depth_index", l.depth_index}};
        if (l.tie_group) e["tie_group"] = *l.tie_group;
        layers.push_back(std::move(e));
    }
    return {{"modalities", model.modalities}, {"layers", std::move(layers)}};
}

struct ModalityGroup {
    std::string modality;
    std::vector<LayerSpec> layers;  // by depth_index
};

/// Declared modality order; modalities without layers are omitted.
inline std::vector<ModalityGroup> partition_by_modality(const PrunableModel& model) {
    std::vector<ModalityGroup> groups;
    for (const auto& m : model.modalities) {
        ModalityGroup g{m, {}};
        for (const auto& l : model.layers)
            if (l.modality == m) g.layers.push_back(l);
        if (g.layers.empty()) continue;
        std::sort(g.layers.begin(), g.layers.end(),
                  [](const LayerSpec& a, const LayerSpec& b) { return a.depth_index < b.depth_index; });
        groups.push_back(std::move(g));
    }
    return groups;
}

/// Each group lists its members in config order; the first member is canonical.
/// Groups are ordered by the name of their first member.
using TieGroups = std::vector<std::vector<std::string>>;

inline TieGroups resolve_tying(const PrunableModel& model) {
    TieGroups groups;
    std::map<std::string, std::size_t> slot;
    for (const auto& l : model.layers) {
        if (!l.tie_group) {
            groups.push_back({l.name});
            continue;
        }
        auto [it, inserted] = slot.emplace(*l.tie_group, groups.size());
        if (inserted)
            groups.push_back({l.name});
        else
            groups[it->second].push_back(l.name);
    }
    std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return groups;
}

/// Layers that carry their own budget: every untied layer plus the first member of each tie group,
/// in config order.
inline std::vector<LayerSpec> canonical_layers(const PrunableModel& model) {
    std::set<std::string> seen_groups;
    std::vector<LayerSpec> out;
    for (const auto& l : model.layers)
        if (!l.tie_group || seen_groups.insert(*l.tie_group).second) out.push_back(l);
    return out;
}

/// Name of the canonical member of the tie group `layer` belongs to (itself when untied).
inline std::string canonical_of(const PrunableModel& model, std::string_view layer) {
    const auto& l = model.at(layer);
    if (!l.tie_group) return l.name;
    for (const auto& other : model.layers)
        if (other.tie_group == l.tie_group) return other.name;
    return l.name;
}

}  // namespace multiflow
