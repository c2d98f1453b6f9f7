// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace multiflow {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File could not be read/written, or its bytes do not follow the expected layout.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Inputs are well-formed but violate a contract (shapes, budgets, enums).
class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace multiflow
