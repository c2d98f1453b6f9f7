// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file tensor container (8-byte little-endian header length, JSON
// header, raw little-endian payload) and the flat top-k selection used by
// every budget and mask computation.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "multiflow/errors.hpp"

namespace multiflow {

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

enum class DType { F32, U8 };

inline std::string_view to_string(DType d) { return d == DType::F32 ? "F32" : "U8"; }

inline std::size_t element_size(DType d) { return d == DType::F32 ? 4 : 1; }

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
}

struct DenseTensor {
    std::string name;
    Shape shape;
    std::variant<std::vector<float>, std::vector<std::uint8_t>> data;

    static DenseTensor from_f32(std::string name, Shape shape, std::vector<float> values) {
        DenseTensor t{std::move(name), std::move(shape), std::move(values)};
        t.check();
        return t;
    }
    static DenseTensor from_u8(std::string name, Shape shape, std::vector<std::uint8_t> values) {
        DenseTensor t{std::move(name), std::move(shape), std::move(values)};
        t.check();
        return t;
    }

    DType dtype() const { return data.index() == 0 ? DType::F32 : DType::U8; }
    std::uint64_t numel() const { return shape_numel(shape); }
    std::size_t length() const {
        return std::visit([](const auto& v) { return v.size(); }, data);
    }
    std::size_t byte_size() const { return length() * element_size(dtype()); }

    std::span<const float> f32() const { return std::get<0>(checked(DType::F32).data); }
    std::span<float> f32() { return std::get<0>(checked(DType::F32).data); }
    std::span<const std::uint8_t> u8() const { return std::get<1>(checked(DType::U8).data); }
    std::span<std::uint8_t> u8() { return std::get<1>(checked(DType::U8).data); }

    /// product(shape) == length(data)
    void check() const {
        if (numel() != length())
            throw ValidationError("tensor '" + name + "': size mismatch between shape and data");
    }

    bool operator==(const DenseTensor&) const = default;

private:
    const DenseTensor& checked(DType want) const {
        if (dtype() != want)
            throw ValidationError("tensor '" + name + "' has dtype " + std::string(to_string(dtype())) +
                                  ", expected " + std::string(to_string(want)));
        return *this;
    }
    DenseTensor& checked(DType want) {
        std::as_const(*this).checked(want);
        return *this;
    }
};

/// Name-ordered tensor collection plus free-form string metadata.
struct TensorMap {
    std::map<std::string, DenseTensor, std::less<>> entries;
    std::map<std::string, std::string, std::less<>> metadata;

    void insert(DenseTensor t) {
        auto key = t.name;
        entries.insert_or_assign(std::move(key), std::move(t));
    }
    bool contains(std::string_view name) const { return entries.find(name) != entries.end(); }
    const DenseTensor& at(std::string_view name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ValidationError("missing tensor: " + std::string(name));
        return it->second;
    }
    DenseTensor& at(std::string_view name) {
        return const_cast<DenseTensor&>(std::as_const(*this).at(name));
    }

    bool operator==(const TensorMap&) const = default;
};

inline constexpr std::string_view kMetadataKey = "__metadata__";

namespace detail {

inline void check_tensor_name(std::string_view name) {
    if (name.empty()) throw ValidationError("tensor name must not be empty");
    if (name == kMetadataKey) throw ValidationError("tensor name '__metadata__' is reserved");
    for (unsigned char c : name)
        if (c < 0x20 || c == 0x7f)
            throw ValidationError("tensor name contains control characters: " + std::string(name));
}

inline std::string encode_header(const TensorMap& tm) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tm.entries) {
        check_tensor_name(name);
        if (name != t.name) throw ValidationError("tensor key '" + name + "' differs from its name");
        t.check();
        const std::uint64_t end = offset + t.byte_size();
        header[name] = {{"dtype", to_string(t.dtype())},
                        {"shape", t.shape},
                        {"data_offsets", {offset, end}}};
        offset = end;
    }
    if (!tm.metadata.empty()) {
        nlohmann::json meta = nlohmann::json::object();
        for (const auto& [k, v] : tm.metadata) meta[k] = v;
        header[std::string(kMetadataKey)] = std::move(meta);
    }
    std::string text;
    try {
        text = header.dump();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("cannot encode container header: ") + e.what());
    }
    // Payload starts on an 8-byte boundary.
    text.append((8 - text.size() % 8) % 8, ' ');
    return text;
}

}  // namespace detail

/// Canonical serialization: sorted names, contiguous offsets, sorted header keys.
inline void write_container(const TensorMap& tm, std::ostream& out) {
    const std::string header = detail::encode_header(tm);
    const std::uint64_t n = header.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : tm.entries) {
        std::visit(
            [&](const auto& v) {
                out.write(reinterpret_cast<const char*>(v.data()),
                          static_cast<std::streamsize>(v.size() * sizeof(v[0])));
            },
            t.data);
    }
}

inline void write_container(const TensorMap& tm, const std::filesystem::path& path) {
    // Encode first so invalid maps never leave a partial file behind.
    (void)detail::encode_header(tm);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    write_container(tm, out);
    out.flush();
    if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

inline TensorMap read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::error_code ec;
    const std::uint64_t file_size = std::filesystem::file_size(path, ec);
    if (ec) throw FormatError("cannot stat '" + path.string() + "'");
    const auto fail = [&](const std::string& what) {
        return FormatError(path.string() + ": " + what);
    };

    std::uint64_t header_len = 0;
    if (file_size < sizeof header_len) throw fail("truncated file (no header length)");
    in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
    if (header_len > file_size - sizeof header_len) throw fail("truncated file (header)");

    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw fail(std::string("malformed header JSON: ") + e.what());
    }
    if (!header.is_object()) throw fail("malformed header JSON: not an object");

    const std::uint64_t data_begin = sizeof header_len + header_len;
    const std::uint64_t data_len = file_size - data_begin;

    struct Pending {
        std::string name;
        DType dtype;
        Shape shape;
        std::uint64_t begin, end;
    };
    std::vector<Pending> pending;
    TensorMap tm;
    try {
        for (const auto& [key, value] : header.items()) {
            if (key == kMetadataKey) {
                if (!value.is_object()) throw fail("__metadata__ must be an object");
                for (const auto& [mk, mv] : value.items()) {
                    if (!mv.is_string()) throw fail("__metadata__ values must be strings");
                    tm.metadata[mk] = mv.get<std::string>();
                }
                continue;
            }
            if (!value.is_object()) throw fail("entry '" + key + "' is not an object");
            const auto dtype_name = value.at("dtype").get<std::string>();
            DType dtype;
            if (dtype_name == "F32")
                dtype = DType::F32;
            else if (dtype_name == "U8")
                dtype = DType::U8;
            else
                throw fail("unsupported dtype '" + dtype_name + "' for '" + key + "'");
            const auto& shape_json = value.at("shape");
            const auto& offsets = value.at("data_offsets");
            if (!shape_json.is_array()) throw fail("shape of '" + key + "' is not an array");
            if (!offsets.is_array() || offsets.size() != 2)
                throw fail("data_offsets of '" + key + "' must be [begin, end]");
            Shape shape;
            for (const auto& d : shape_json) {
                if (!d.is_number_unsigned()) throw fail("shape of '" + key + "' has a negative or non-integer dim");
                shape.push_back(d.get<std::uint64_t>());
            }
            if (!offsets[0].is_number_unsigned() || !offsets[1].is_number_unsigned())
                throw fail("data_offsets of '" + key + "' must be nonnegative integers");
            const auto b = offsets[0].get<std::uint64_t>();
            const auto e = offsets[1].get<std::uint64_t>();
            if (b > e || e > data_len) throw fail("data_offsets of '" + key + "' out of bounds");
            if (e - b != shape_numel(shape) * element_size(dtype))
                throw fail("size mismatch for '" + key + "': shape needs " +
                           std::to_string(shape_numel(shape) * element_size(dtype)) + " bytes, offsets span " +
                           std::to_string(e - b));
            detail::check_tensor_name(key);
            pending.push_back({key, dtype, std::move(shape), b, e});
        }
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("malformed header JSON: ") + e.what());
    } catch (const ValidationError& e) {
        throw fail(e.what());
    }

    std::vector<const Pending*> by_offset;
    for (const auto& p : pending) by_offset.push_back(&p);
    std::sort(by_offset.begin(), by_offset.end(),
              [](const Pending* a, const Pending* b) { return a->begin < b->begin; });
    for (std::size_t i = 1; i < by_offset.size(); ++i)
        if (by_offset[i]->begin < by_offset[i - 1]->end)
            throw fail("offset overlap between '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "'");

    for (auto& p : pending) {
        DenseTensor t{p.name, std::move(p.shape), {}};
        in.seekg(static_cast<std::streamoff>(data_begin + p.begin));
        const auto bytes = static_cast<std::streamsize>(p.end - p.begin);
        if (p.dtype == DType::F32) {
            std::vector<float> v((p.end - p.begin) / 4);
            in.read(reinterpret_cast<char*>(v.data()), bytes);
            t.data = std::move(v);
        } else {
            std::vector<std::uint8_t> v(p.end - p.begin);
            in.read(reinterpret_cast<char*>(v.data()), bytes);
            t.data = std::move(v);
        }
        if (!in) throw fail("truncated file (tensor '" + p.name + "')");
        tm.entries.emplace(p.name, std::move(t));
    }
    return tm;
}

// ---------------------------------------------------------------------------
// Top-k selection. Order is "better value first, then ascending flat index".

enum class Order { descending, ascending };

struct SelectionResult {
    std::vector<std::size_t> kept_indices;  // ascending
    float threshold_value = 0.0f;
    std::size_t tie_count_at_threshold = 0;  // entries equal to the threshold
};

namespace detail {

inline bool better(float a, float b, Order order) { return order == Order::descending ? a > b : a < b; }

/// k-th best key (1-based k >= 1) under `order`. Consumes its argument.
inline float kth_best(std::vector<float> keys, std::size_t k, Order order) {
    auto nth = keys.begin() + static_cast<std::ptrdiff_t>(k - 1);
    if (order == Order::descending)
        std::nth_element(keys.begin(), nth, keys.end(), std::greater<>());
    else
        std::nth_element(keys.begin(), nth, keys.end());
    return *nth;
}

}  // namespace detail

inline SelectionResult select_topk(std::span<const float> values, std::size_t k,
                                   Order order = Order::descending) {
    if (k > values.size())
        throw ValidationError("select_topk: k=" + std::to_string(k) + " exceeds " +
                              std::to_string(values.size()) + " values");
    SelectionResult r;
    if (k == 0) {
        r.threshold_value = order == Order::descending ? std::numeric_limits<float>::infinity()
                                                       : -std::numeric_limits<float>::infinity();
        return r;
    }
    const float t = detail::kth_best({values.begin(), values.end()}, k, order);
    std::size_t n_better = 0;
    for (float v : values) {
        if (detail::better(v, t, order))
            ++n_better;
        else if (v == t)
            ++r.tie_count_at_threshold;
    }
    std::size_t ties_left = k - n_better;
    r.kept_indices.reserve(k);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (detail::better(values[i], t, order)) {
            r.kept_indices.push_back(i);
        } else if (values[i] == t && ties_left > 0) {
            r.kept_indices.push_back(i);
            --ties_left;
        }
    }
    r.threshold_value = t;
    return r;
}

/// Same selection as select_topk, written as a 0/1 indicator into `out`.
inline void select_topk_into(std::span<const float> values, std::size_t k, Order order,
                             std::span<std::uint8_t> out) {
    if (out.size() != values.size()) throw ValidationError("select_topk_into: output size mismatch");
    if (k > values.size()) throw ValidationError("select_topk_into: k exceeds number of values");
    std::fill(out.begin(), out.end(), std::uint8_t{0});
    if (k == 0) return;
    const float t = detail::kth_best({values.begin(), values.end()}, k, order);
    std::size_t n_better = 0;
    for (float v : values) n_better += detail::better(v, t, order);
    std::size_t ties_left = k - n_better;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (detail::better(values[i], t, order)) {
            out[i] = 1;
        } else if (values[i] == t && ties_left > 0) {
            out[i] = 1;
            --ties_left;
        }
    }
}

/// Top-k over the concatenation of several arrays (pool order, then flat index)
/// after mapping each value through `key`. Returns how many winners land in each array.
template <class Key = std::identity>
std::vector<std::size_t> pool_topk_counts(std::span<const std::span<const float>> pools, std::size_t k,
                                          Order order = Order::descending, Key key = {}) {
    std::size_t total = 0;
    for (const auto& p : pools) total += p.size();
    if (k > total)
        throw ValidationError("pool_topk_counts: k=" + std::to_string(k) + " exceeds pool of " +
                              std::to_string(total));
    std::vector<std::size_t> counts(pools.size(), 0);
    if (k == 0) return counts;

    std::vector<float> keys;
    keys.reserve(total);
    for (const auto& p : pools)
        for (float v : p) keys.push_back(key(v));
    const float t = detail::kth_best(std::move(keys), k, order);

    std::vector<std::size_t> ties(pools.size(), 0);
    std::size_t n_better = 0;
    for (std::size_t i = 0; i < pools.size(); ++i) {
        for (float v : pools[i]) {
            const float kv = key(v);
            if (detail::better(kv, t, order))
                ++counts[i];
            else if (kv == t)
                ++ties[i];
        }
        n_better += counts[i];
    }
    std::size_t ties_left = k - n_better;
    for (std::size_t i = 0; i < pools.size() && ties_left > 0; ++i) {
        const std::size_t grant = std::min(ties[i], ties_left);
        counts[i] += grant;
        ties_left -= grant;
    }
    return counts;
}

}  // namespace multiflow
