#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "csrnet/layers.hpp"

namespace csrnet {

/// lr_min + (lr_init - lr_min) * (1 + cos(pi * epoch / (total - 1))) / 2, so the
/// last epoch runs at lr_min. Fewer than two epochs keep lr_init.
inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr_init, double lr_min) {
  if (total_epochs < 2) return lr_init;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // added to the gradient as an L2 term
};

/// Bias-corrected Adam over the trainable slots of a registry. Slots with
/// trainable == false (batch-norm running statistics) are never touched.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  void step(nn::ParamMap<T>& params, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T wd = static_cast<T>(opt_.weight_decay), eps = static_cast<T>(opt_.eps);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    for (auto& [name, p] : params) {
      if (!p->trainable) continue;
      auto [it, fresh] = moments_.try_emplace(name);
      if (fresh) {
        it->second.first = Tensor4<T>(p->value.shape());
        it->second.second = Tensor4<T>(p->value.shape());
      }
      auto& m = it->second.first;
      auto& v = it->second.second;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const T g = p->grad[i] + wd * p->value[i];
        m[i] = b1 * m[i] + (T{1} - b1) * g;
        v[i] = b2 * v[i] + (T{1} - b2) * g * g;
        p->value[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  std::uint64_t steps() const { return steps_; }

  /// Moments as checkpoint entries under "optim.adam.".
  nn::TensorMap<T> state() const {
    nn::TensorMap<T> out;
    for (const auto& [name, mv] : moments_) {
      out.emplace("optim.adam.m." + name, mv.first);
      out.emplace("optim.adam.v." + name, mv.second);
    }
    out.emplace("optim.adam.step", Tensor4<T>(Shape4{1, 1, 1, 1}, static_cast<T>(steps_)));
    return out;
  }

  void load_state(const nn::TensorMap<T>& entries) {
    moments_.clear();
    steps_ = 0;
    const std::string m_prefix = "optim.adam.m.", v_prefix = "optim.adam.v.";
    for (const auto& [name, t] : entries) {
      if (name == "optim.adam.step") {
        steps_ = static_cast<std::uint64_t>(t[0]);
      } else if (name.rfind(m_prefix, 0) == 0) {
        moments_[name.substr(m_prefix.size())].first = t;
      } else if (name.rfind(v_prefix, 0) == 0) {
        moments_[name.substr(v_prefix.size())].second = t;
      }
    }
  }

 private:
  AdamOptions opt_;
  std::uint64_t steps_ = 0;
  std::map<std::string, std::pair<Tensor4<T>, Tensor4<T>>> moments_;
};

}  // namespace csrnet
