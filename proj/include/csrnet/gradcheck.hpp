#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "csrnet/tensor.hpp"

namespace csrnet {

/// A differentiable computation exposed to the gradient checker.
///
/// `forward` evaluates the computation from the current contents of the
/// tensors in `points`. `backward` must be called right after a forward and
/// returns the gradient of <dy, forward()> with respect to every tensor in
/// `points`, in the same order.
struct GradCheckTarget {
  std::string name;
  std::vector<Tensor4<double>*> points;
  std::vector<std::string> point_names;
  std::function<Tensor4<double>()> forward;
  std::function<std::vector<Tensor4<double>>(const Tensor4<double>& dy)> backward;
};

struct GradCheckOptions {
  double eps = 1e-5;
  std::uint64_t seed = 0;
  // Coordinates are checked exhaustively up to this count...
  std::size_t exhaustive_limit = 10000;
  // ...and by a seeded random subsample of this size above it.
  std::size_t subsample = 1500;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "point[flat index]" of the worst coordinate
  std::size_t checked = 0;
};

namespace detail {

// Sum_j ((yp_j - ym_j) / h) * r_j, differencing elementwise before projecting.
inline double projected_difference(const Tensor4<double>& yp, const Tensor4<double>& ym,
                                   const Tensor4<double>& r, double h) {
  long double acc = 0.0L;
  for (std::size_t j = 0; j < r.size(); ++j) {
    const double d = yp[j] - ym[j];
    if (d != 0.0) acc += static_cast<long double>(d / h) * r[j];
  }
  return static_cast<double>(acc);
}

}  // namespace detail

/// Compares the reverse-mode gradient of a random projection <r, f(x)> against
/// central finite differences.
///
/// Per-coordinate error is |a - n| / max(|a|, |n|, floor), where the floor is
/// 1e-3 of the largest numeric gradient magnitude among the checked
/// coordinates, so that coordinates whose true gradient is (near) zero are
/// compared on the scale of the whole gradient instead of their own.
inline GradCheckResult grad_check(const GradCheckTarget& target, const GradCheckOptions& opt = {}) {
  auto rng = make_rng(opt.seed, target.name);
  const Tensor4<double> y0 = target.forward();
  check_finite(y0, target.name + " forward");
  const Tensor4<double> r = random_normal<double>(y0.shape(), rng);
  const std::vector<Tensor4<double>> analytic = target.backward(r);
  if (analytic.size() != target.points.size()) {
    throw DimensionError(csrnet::detail::concat("grad_check(", target.name, "): backward returned ",
                                                analytic.size(), " gradients for ", target.points.size(),
                                                " points"));
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < target.points.size(); ++p) {
    if (!(analytic[p].shape() == target.points[p]->shape())) {
      throw DimensionError(csrnet::detail::concat("grad_check(", target.name, "): gradient of point ", p, " has shape ",
                                                  analytic[p].shape().str(), ", expected ",
                                                  target.points[p]->shape().str()));
    }
    check_finite(analytic[p], target.name + " backward");
    for (std::size_t i = 0; i < target.points[p]->size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > opt.exhaustive_limit) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.subsample);
    std::sort(coords.begin(), coords.end());
  }

  std::vector<double> numeric(coords.size());
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto [p, i] = coords[k];
    double& v = (*target.points[p])[i];
    const double saved = v;
    v = saved + opt.eps;
    const auto yp = target.forward();
    v = saved - opt.eps;
    const auto ym = target.forward();
    v = saved;
    check_finite(yp, target.name + " forward");
    check_finite(ym, target.name + " forward");
    // The realized step (saved + eps) - (saved - eps) replaces 2 * eps.
    const double h = (saved + opt.eps) - (saved - opt.eps);
    numeric[k] = detail::projected_difference(yp, ym, r, h);
  }

  double scale = 0.0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  const double floor = std::max(1e-3 * scale, 1e-300);

  GradCheckResult res;
  res.checked = coords.size();
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto [p, i] = coords[k];
    const double a = analytic[p][i];
    const double n = numeric[k];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    const double err = std::abs(a - n) / denom;
    if (err > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      const std::string label = p < target.point_names.size() ? target.point_names[p] : std::to_string(p);
      res.worst = label + "[" + std::to_string(i) + "]";
    }
  }
  return res;
}

}  // namespace csrnet
