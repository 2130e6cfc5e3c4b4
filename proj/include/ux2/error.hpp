// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ux2 {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension/shape mismatches. Messages name the offending shapes.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Contract violations on values: degenerate inputs, empty reductions,
/// out-of-vocabulary ids, labels outside their set, capacity overruns.
class ValueError : public Error {
public:
  using Error::Error;
};

/// Non-finite values where finiteness is required (losses, gradients).
class NumericError : public Error {
public:
  using Error::Error;
};

/// Bad run configuration: unknown keys, unparsable values, empty task sets.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// File format or filesystem failures.
class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace ux2
