// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "multiflow/errors.hpp"

namespace multiflow {

/// Non-owning row-major view.
template <class T>
struct MatrixView {
    std::span<T> data;
    std::size_t rows = 0;
    std::size_t cols = 0;

    MatrixView() = default;
    MatrixView(std::span<T> d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {
        if (d.size() != r * c) throw ValidationError("matrix view: buffer does not match shape");
    }
    template <class U>
    MatrixView(const MatrixView<U>& other) : data(other.data), rows(other.rows), cols(other.cols) {}

    T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<T> row(std::size_t r) const { return data.subspan(r * cols, cols); }
    std::size_t size() const { return data.size(); }
};

/// Owning row-major matrix.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    MatrixView<T> view() { return {data, rows, cols}; }
    MatrixView<const T> view() const { return {std::span<const T>(data), rows, cols}; }

    bool operator==(const Matrix&) const = default;
};

}  // namespace multiflow
