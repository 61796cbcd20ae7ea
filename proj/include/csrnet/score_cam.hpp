#pragma once

#include <algorithm>
#include <vector>

#include "csrnet/loss.hpp"
#include "csrnet/model.hpp"

namespace csrnet {

template <typename T>
struct ScoreCamResult {
  Tensor4<T> cam;              // (1, 1, H/4, W/4), values in [0, 1]
  std::vector<double> weights;  // one score per channel of the tapped map
};

/// Min-max normalizes a plane to [0, 1]; a constant plane becomes all zeros.
template <typename T>
void normalize_plane(const T* src, T* dst, std::size_t count) {
  const auto [lo, hi] = std::minmax_element(src, src + count);
  const T min = *lo, max = *hi;
  if (!(max > min)) {
    std::fill(dst, dst + count, T{0});
    return;
  }
  const T range = max - min;
  for (std::size_t i = 0; i < count; ++i) dst[i] = (src[i] - min) / range;
}

/// Mean over pixels of the softmax probability of `target_class`, per sample.
template <typename T>
std::vector<double> mean_class_probability(const Tensor4<T>& logits, std::size_t target_class) {
  const auto prob = softmax_classes(logits);
  const std::size_t P = logits.h() * logits.w();
  std::vector<double> out(logits.n());
  for (std::size_t n = 0; n < logits.n(); ++n) {
    const T* p = prob.plane(n, target_class);
    double sum = 0.0;
    for (std::size_t i = 0; i < P; ++i) sum += static_cast<double>(p[i]);
    out[n] = sum / static_cast<double>(P);
  }
  return out;
}

/// Score-weighted activation map for one stage tap (1 = low-, 2 = mid-,
/// 3 = high-refined). Each channel of the tapped map is min-max normalized,
/// upsampled to the input size and used to mask the input; the masked input's
/// mean target-class probability is that channel's weight. The map is
/// ReLU(sum_k w_k A_k), min-max normalized. Masked inputs are evaluated
/// `chunk` at a time.
template <typename T>
ScoreCamResult<T> score_cam(CsrNet<T>& model, const Tensor4<T>& x, std::size_t target_class, int stage_tap,
                            std::size_t chunk = 16) {
  if (x.n() != 1) throw DimensionError("score_cam expects a single image, got " + x.shape().str());
  if (target_class >= model.config().num_classes) {
    throw ConfigError(detail::concat("target class ", target_class, " out of range for ", model.config().num_classes,
                                     " classes"));
  }
  if (stage_tap < 1 || stage_tap > 3) throw ConfigError(detail::concat("invalid stage tap ", stage_tap));
  const auto base = model.forward(x, nn::Mode::eval);
  const auto& tap = base.stages.tap(stage_tap);
  if (!tap) {
    throw ConfigError(detail::concat("invalid stage tap ", stage_tap, ": the ", to_string(model.config().variant),
                                     " model with ", model.config().stages, " stage(s) does not produce it"));
  }
  const Tensor4<T> acts = *tap;
  const std::size_t C = acts.c(), P = acts.h() * acts.w();
  const std::size_t factor = x.h() / acts.h();

  Tensor4<T> masks(Shape4{C, 1, acts.h(), acts.w()});
  for (std::size_t k = 0; k < C; ++k) normalize_plane(acts.plane(0, k), masks.plane(k, 0), P);
  const auto up = ops::bilinear_upsample(masks, factor);

  ScoreCamResult<T> res;
  res.weights.resize(C);
  const std::size_t HW = x.h() * x.w();
  chunk = std::max<std::size_t>(1, chunk);
  for (std::size_t start = 0; start < C; start += chunk) {
    const std::size_t m = std::min(chunk, C - start);
    Tensor4<T> masked(Shape4{m, 3, x.h(), x.w()});
    for (std::size_t j = 0; j < m; ++j) {
      const T* mask = up.plane(start + j, 0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const T* src = x.plane(0, ch);
        T* dst = masked.plane(j, ch);
        for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] * mask[i];
      }
    }
    const auto scores = mean_class_probability(model.forward(masked, nn::Mode::eval).logits, target_class);
    std::copy(scores.begin(), scores.end(), res.weights.begin() + static_cast<std::ptrdiff_t>(start));
  }

  Tensor4<T> raw(Shape4{1, 1, acts.h(), acts.w()});
  for (std::size_t k = 0; k < C; ++k) {
    const T w = static_cast<T>(res.weights[k]);
    const T* a = acts.plane(0, k);
    for (std::size_t i = 0; i < P; ++i) raw[i] += w * a[i];
  }
  for (auto& v : raw.values()) v = std::max(v, T{0});
  res.cam = Tensor4<T>(raw.shape());
  normalize_plane(raw.data(), res.cam.data(), P);
  return res;
}

}  // namespace csrnet
