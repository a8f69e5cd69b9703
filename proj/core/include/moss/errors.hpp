#pragma once

#include <stdexcept>
#include <string>

namespace moss {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (window extents, order sets, hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state, e.g. backward before forward.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied input such as an out-of-range label or query.
class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace moss
