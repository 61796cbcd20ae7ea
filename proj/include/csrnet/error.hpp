#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace csrnet {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree with an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Spatial geometry is invalid (zero-sized output, indivisible input, bad ratio).
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Batch norm evaluated before any running statistics were recorded.
class UninitializedStatsError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Configuration or model/checkpoint mismatch.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf encountered.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

}  // namespace csrnet
