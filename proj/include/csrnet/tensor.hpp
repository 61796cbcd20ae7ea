#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csrnet/error.hpp"

namespace csrnet {

/// Extents of a rank-4 (batch, channel, row, col) array.
struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    return detail::concat("(", n, ",", c, ",", h, ",", w, ")");
  }
};

/// Dense (n,c,h,w) row-major array. A default-constructed tensor is empty and
/// is only a placeholder; every constructed tensor has all extents >= 1.
///
/// Per-channel vectors (global descriptors, FC activations, biases) are stored
/// as (n,c,1,1) tensors so that every kernel shares one value type.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T{0}) : shape_(shape) {
    if (!shape.valid()) {
      throw GeometryError("tensor extents must all be >= 1, got " + shape.str());
    }
    data_.assign(shape.size(), fill);
  }

  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{0})
      : Tensor4(Shape4{n, c, h, w}, fill) {}

  Tensor4(Shape4 shape, std::vector<T> values) : Tensor4(shape) {
    if (values.size() != shape.size()) {
      throw DimensionError(detail::concat("tensor ", shape.str(), " needs ", shape.size(),
                                          " values, got ", values.size()));
    }
    data_ = std::move(values);
  }

  /// Channel vector batch of shape (n,c,1,1).
  static Tensor4 vec(std::size_t n, std::size_t c, T fill = T{0}) {
    return Tensor4(Shape4{n, c, 1, 1}, fill);
  }

  const Shape4& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the h*w plane of (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }
  /// Pointer to the c*h*w block of sample n.
  T* sample(std::size_t n) { return data_.data() + n * shape_.c * shape_.plane(); }
  const T* sample(std::size_t n) const { return data_.data() + n * shape_.c * shape_.plane(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape4 shape_{};
  std::vector<T> data_;
};

/// Throws NumericError naming `op` if any element is NaN or Inf.
template <typename T>
void check_finite(const Tensor4<T>& t, std::string_view op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(detail::concat("non-finite value ", t[i], " at flat index ", i,
                                        " of ", t.shape().str(), " in ", op));
    }
  }
}

#ifdef CSRNET_CHECKED
#define CSRNET_CHECK_FINITE(t, op) ::csrnet::check_finite((t), (op))
#else
#define CSRNET_CHECK_FINITE(t, op) ((void)0)
#endif

// 64-bit FNV-1a; stable across platforms, used to derive per-slot seeds.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view tag = {}) {
  return Rng(mix_seed(seed, fnv1a(tag)));
}

template <typename T>
Tensor4<T> random_normal(Shape4 shape, Rng& rng, T stddev = T{1}) {
  Tensor4<T> t(shape);
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor4<T> random_uniform(Shape4 shape, Rng& rng, T lo = T{-1}, T hi = T{1}) {
  Tensor4<T> t(shape);
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace csrnet
