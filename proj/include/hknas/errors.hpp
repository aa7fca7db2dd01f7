#pragma once

#include <stdexcept>
#include <string>

namespace hknas {

/// Bad run configuration, incompatible architecture file or checkpoint topology.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated data files, infeasible splits.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A primitive produced NaN/Inf, or a training loss diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or ranks that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace hknas
