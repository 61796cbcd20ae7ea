#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <vector>

#include "csrnet/tensor.hpp"

namespace csrnet {

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor4<T> grad;  // d(loss)/d(logits)
  std::size_t counted = 0;  // non-ignored pixels
};

/// Mean over non-ignored pixels of -log softmax(logits)[label]. If every pixel
/// is ignored the loss is 0 with a zero gradient and a warning on std::clog.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor4<T>& logits, const std::vector<std::uint8_t>& labels,
                                 std::uint8_t ignore_index = 255) {
  const std::size_t N = logits.n(), K = logits.c(), P = logits.h() * logits.w();
  if (labels.size() != N * P) {
    throw DimensionError(detail::concat("cross_entropy_loss: logits ", logits.shape().str(), " need ", N * P,
                                        " labels, got ", labels.size()));
  }
  LossResult<T> res;
  res.grad = Tensor4<T>(logits.shape());
  for (auto l : labels) {
    if (l == ignore_index) continue;
    if (l >= K) throw DimensionError(detail::concat("cross_entropy_loss: label ", int(l), " >= class count ", K));
    ++res.counted;
  }
  if (res.counted == 0) {
    std::clog << "warning: cross_entropy_loss: every pixel is ignored; loss defined as 0\n";
    return res;
  }
  const T inv = T{1} / static_cast<T>(res.counted);
  std::vector<T> prob(K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = logits.sample(n);
    T* gbase = res.grad.sample(n);
    for (std::size_t i = 0; i < P; ++i) {
      const auto label = labels[n * P + i];
      if (label == ignore_index) continue;
      T m = base[i];
      for (std::size_t k = 1; k < K; ++k) m = std::max(m, base[k * P + i]);
      T z{0};
      for (std::size_t k = 0; k < K; ++k) {
        prob[k] = std::exp(base[k * P + i] - m);
        z += prob[k];
      }
      total += static_cast<double>(std::log(z) + m - base[label * P + i]);
      for (std::size_t k = 0; k < K; ++k) {
        gbase[k * P + i] = (prob[k] / z - (k == label ? T{1} : T{0})) * inv;
      }
    }
  }
  res.loss = total / static_cast<double>(res.counted);
  return res;
}

/// Per-pixel class probabilities (softmax over the class axis).
template <typename T>
Tensor4<T> softmax_classes(const Tensor4<T>& logits) {
  const std::size_t K = logits.c(), P = logits.h() * logits.w();
  Tensor4<T> out(logits.shape());
  for (std::size_t n = 0; n < logits.n(); ++n) {
    const T* base = logits.sample(n);
    T* o = out.sample(n);
    for (std::size_t i = 0; i < P; ++i) {
      T m = base[i];
      for (std::size_t k = 1; k < K; ++k) m = std::max(m, base[k * P + i]);
      T z{0};
      for (std::size_t k = 0; k < K; ++k) z += (o[k * P + i] = std::exp(base[k * P + i] - m));
      for (std::size_t k = 0; k < K; ++k) o[k * P + i] /= z;
    }
  }
  return out;
}

}  // namespace csrnet
