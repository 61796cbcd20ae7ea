#pragma once

#include <algorithm>
#include <chrono>
#include <numeric>
#include <vector>

#include "csrnet/metrics.hpp"
#include "csrnet/model.hpp"

namespace csrnet {

/// Runs one train-mode forward on random input so that batch-norm running
/// statistics exist; needed before eval-mode use of an untrained model.
template <typename T>
void calibrate_batch_norm(CsrNet<T>& model, Shape4 input, std::uint64_t seed = 0) {
  auto rng = make_rng(seed, "calibrate");
  model.forward(random_uniform<T>(input, rng, T{0}, T{1}), nn::Mode::train);
}

/// Wall-clock latency of eval-mode forwards on a fixed random input. The
/// first `warmup` runs are discarded. Runs on the calling thread only.
template <typename T>
LatencyStats bench_latency(CsrNet<T>& model, Shape4 input, std::size_t warmup, std::size_t iters,
                           std::uint64_t seed = 0) {
  if (iters == 0) throw ConfigError("bench_latency needs iters >= 1");
  auto rng = make_rng(seed, "bench");
  const auto x = random_uniform<T>(input, rng, T{0}, T{1});
  for (std::size_t i = 0; i < warmup; ++i) model.forward(x, nn::Mode::eval);
  std::vector<double> ms(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(x, nn::Mode::eval);
    const auto t1 = std::chrono::steady_clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  LatencyStats s;
  s.iters = iters;
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(iters);
  std::sort(ms.begin(), ms.end());
  s.median_ms = iters % 2 ? ms[iters / 2] : 0.5 * (ms[iters / 2 - 1] + ms[iters / 2]);
  s.fps = 1000.0 / s.mean_ms;
  return s;
}

}  // namespace csrnet
