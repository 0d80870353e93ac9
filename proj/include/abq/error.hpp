#pragma once

#include <stdexcept>
#include <string>

namespace abq {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a stateful object, e.g. a second backward pass over one graph.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid quantization spec (bit width, granularity, mode).
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration or command-line override.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file, unreadable path.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf reached an op boundary, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Integer accumulator could overflow for the requested geometry.
class CapacityError : public Error {
 public:
  using Error::Error;
};

}  // namespace abq
