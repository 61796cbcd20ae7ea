#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "csrnet/ops.hpp"
#include "csrnet/tensor.hpp"
#include "csrnet/tensor_io.hpp"

namespace csrnet::nn {

using ops::Mode;

enum class InitScheme { kaiming_fan_out, zeros, ones };

/// One named parameter slot with its gradient accumulator.
template <typename T>
struct Param {
  Tensor4<T> value;
  Tensor4<T> grad;
  InitScheme scheme = InitScheme::zeros;
  bool trainable = true;

  Param() = default;
  Param(Shape4 shape, InitScheme s, bool train = true)
      : value(shape), grad(shape), scheme(s), trainable(train) {}

  void zero_grad() { grad.fill(T{0}); }
  void accumulate(const Tensor4<T>& g) { ops::add_inplace(grad, g); }
};

/// Registry of parameter slots keyed by dotted path; std::map gives the
/// lexicographic iteration order the optimizer relies on.
template <typename T>
using ParamMap = std::map<std::string, Param<T>*>;

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
void register_param(ParamMap<T>& out, const std::string& path, Param<T>& p) {
  if (!out.emplace(path, &p).second) {
    throw ConfigError("duplicate parameter path '" + path + "'");
  }
}

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, ParamMap<T>& out) = 0;

  ParamMap<T> params() {
    ParamMap<T> m;
    collect("", m);
    return m;
  }
};

/// Draws a tensor for the given scheme. Kaiming fan-out uses
/// std = sqrt(2 / (c_out * k * k)) where c_out is the leading extent.
template <typename T>
Tensor4<T> init_tensor(Shape4 shape, InitScheme scheme, Rng& rng) {
  switch (scheme) {
    case InitScheme::zeros:
      return Tensor4<T>(shape, T{0});
    case InitScheme::ones:
      return Tensor4<T>(shape, T{1});
    case InitScheme::kaiming_fan_out: {
      const double fan_out = static_cast<double>(shape.n * shape.h * shape.w);
      return random_normal<T>(shape, rng, static_cast<T>(std::sqrt(2.0 / fan_out)));
    }
  }
  return Tensor4<T>(shape);
}

/// Initializes every slot from its scheme. Each slot draws from an RNG seeded
/// by (seed, path), so the result does not depend on construction order.
template <typename T>
void init_params(ParamMap<T>& params, std::uint64_t seed) {
  for (auto& [path, p] : params) {
    auto rng = make_rng(seed, path);
    p->value = init_tensor<T>(p->value.shape(), p->scheme, rng);
    p->zero_grad();
  }
}

template <typename T>
void zero_grads(ParamMap<T>& params) {
  for (auto& [_, p] : params) p->zero_grad();
}

template <typename T>
std::size_t count_trainable(const ParamMap<T>& params) {
  std::size_t total = 0;
  for (const auto& [_, p] : params)
    if (p->trainable) total += p->value.size();
  return total;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, bool bias)
      : weight_(Shape4{c_out, c_in, k, k}, InitScheme::kaiming_fan_out), stride_(stride), pad_(k / 2) {
    if (bias) bias_ = std::make_unique<Param<T>>(Shape4{1, c_out, 1, 1}, InitScheme::zeros);
  }

  Tensor4<T> forward(const Tensor4<T>& x) {
    input_ = x;
    return ops::conv2d(x, weight_.value, bias_ ? &bias_->value : nullptr, stride_, pad_);
  }

  Tensor4<T> backward(const Tensor4<T>& dy, bool need_dx = true) {
    auto g = ops::conv2d_backward(input_, weight_.value, dy, stride_, pad_, bias_ != nullptr, need_dx);
    weight_.accumulate(g.dweight);
    if (bias_) bias_->accumulate(g.dbias);
    return std::move(g.dx);
  }

  void collect(const std::string& prefix, ParamMap<T>& out) override {
    register_param(out, join_path(prefix, "weight"), weight_);
    if (bias_) register_param(out, join_path(prefix, "bias"), *bias_);
  }

  Param<T>& weight() { return weight_; }
  Param<T>* bias() { return bias_.get(); }
  std::size_t out_channels() const { return weight_.value.n(); }

 private:
  Param<T> weight_;
  std::unique_ptr<Param<T>> bias_;
  std::size_t stride_;
  std::size_t pad_;
  Tensor4<T> input_;
};

template <typename T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(std::size_t c)
      : gamma_(Shape4{1, c, 1, 1}, InitScheme::ones),
        beta_(Shape4{1, c, 1, 1}, InitScheme::zeros),
        running_mean_(Shape4{1, c, 1, 1}, InitScheme::zeros, false),
        running_var_(Shape4{1, c, 1, 1}, InitScheme::ones, false),
        tracked_(Shape4{1, 1, 1, 1}, InitScheme::zeros, false) {
    running_var_.value.fill(T{1});
    gamma_.value.fill(T{1});
  }

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode) {
    return ops::batch_norm(x, gamma_.value, beta_.value,
                           ops::RunningStats<T>{running_mean_.value, running_var_.value, tracked_.value}, mode,
                           T(ops::kBatchNormEps), T(ops::kBatchNormMomentum), &cache_);
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    auto g = ops::batch_norm_backward(cache_, gamma_.value, dy);
    gamma_.accumulate(g.dgamma);
    beta_.accumulate(g.dbeta);
    return std::move(g.dx);
  }

  void collect(const std::string& prefix, ParamMap<T>& out) override {
    register_param(out, join_path(prefix, "gamma"), gamma_);
    register_param(out, join_path(prefix, "beta"), beta_);
    register_param(out, join_path(prefix, "running_mean"), running_mean_);
    register_param(out, join_path(prefix, "running_var"), running_var_);
    register_param(out, join_path(prefix, "num_batches_tracked"), tracked_);
  }

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  Param<T>& running_mean() { return running_mean_; }
  Param<T>& running_var() { return running_var_; }
  Param<T>& tracked() { return tracked_; }

 private:
  Param<T> gamma_, beta_, running_mean_, running_var_, tracked_;
  ops::BatchNormCache<T> cache_;
};

/// conv (no bias) -> batch norm -> ReLU. Stride-1 instances preserve (h, w).
template <typename T>
class ConvBNReLU : public Module<T> {
 public:
  ConvBNReLU(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride = 1)
      : conv_(c_in, c_out, k, stride, false), bn_(c_out) {}

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode) {
    out_ = ops::relu(bn_.forward(conv_.forward(x), mode));
    return out_;
  }

  Tensor4<T> backward(const Tensor4<T>& dy, bool need_dx = true) {
    return conv_.backward(bn_.backward(ops::relu_backward(out_, dy)), need_dx);
  }

  void collect(const std::string& prefix, ParamMap<T>& out) override {
    conv_.collect(join_path(prefix, "conv"), out);
    bn_.collect(join_path(prefix, "bn"), out);
  }

  Conv2d<T>& conv() { return conv_; }
  BatchNorm<T>& bn() { return bn_; }
  std::size_t out_channels() const { return conv_.out_channels(); }

 private:
  Conv2d<T> conv_;
  BatchNorm<T> bn_;
  Tensor4<T> out_;
};

/// Affine map on (n, c, 1, 1) channel vectors.
template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t c_in, std::size_t c_out, bool bias)
      : weight_(Shape4{c_out, c_in, 1, 1}, InitScheme::kaiming_fan_out) {
    if (bias) bias_ = std::make_unique<Param<T>>(Shape4{1, c_out, 1, 1}, InitScheme::zeros);
  }

  Tensor4<T> forward(const Tensor4<T>& x) {
    input_ = x;
    return ops::linear(x, weight_.value, bias_ ? &bias_->value : nullptr);
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    auto g = ops::linear_backward(input_, weight_.value, dy, bias_ != nullptr);
    weight_.accumulate(g.dweight);
    if (bias_) bias_->accumulate(g.dbias);
    return std::move(g.dx);
  }

  void collect(const std::string& prefix, ParamMap<T>& out) override {
    register_param(out, join_path(prefix, "weight"), weight_);
    if (bias_) register_param(out, join_path(prefix, "bias"), *bias_);
  }

  Param<T>& weight() { return weight_; }
  Param<T>* bias() { return bias_.get(); }

 private:
  Param<T> weight_;
  std::unique_ptr<Param<T>> bias_;
  Tensor4<T> input_;
};

/// Fully connected layer -> batch norm over the batch of vectors -> ReLU.
template <typename T>
class FcBNReLU : public Module<T> {
 public:
  FcBNReLU(std::size_t c_in, std::size_t c_out) : fc_(c_in, c_out, false), bn_(c_out) {}

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode) {
    out_ = ops::relu(bn_.forward(fc_.forward(x), mode));
    return out_;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) { return fc_.backward(bn_.backward(ops::relu_backward(out_, dy))); }

  void collect(const std::string& prefix, ParamMap<T>& out) override {
    fc_.collect(join_path(prefix, "fc"), out);
    bn_.collect(join_path(prefix, "bn"), out);
  }

  Linear<T>& fc() { return fc_; }
  BatchNorm<T>& bn() { return bn_; }

 private:
  Linear<T> fc_;
  BatchNorm<T> bn_;
  Tensor4<T> out_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a flat sequence of (u32 name length, utf-8 name, CSRT record).

template <typename T>
using TensorMap = std::map<std::string, Tensor4<T>>;

template <typename T>
void save_checkpoint(const std::string& path, const TensorMap<T>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint '" + path + "' for writing");
  for (const auto& [name, t] : entries) {
    io::write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_tensor(os, t);
  }
  if (!os) throw FormatError("failed writing checkpoint '" + path + "'");
}

template <typename T>
TensorMap<T> snapshot(const ParamMap<T>& params) {
  TensorMap<T> out;
  for (const auto& [name, p] : params) out.emplace(name, p->value);
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamMap<T>& params) {
  save_checkpoint(path, snapshot(params));
}

template <typename T>
TensorMap<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  io::BinaryReader in(is, "checkpoint '" + path + "'");
  TensorMap<T> out;
  while (!in.at_end()) {
    const auto len = in.read_pod<std::uint32_t>("slot name length");
    std::string name(len, '\0');
    in.read_bytes(name.data(), len, "slot name");
    auto t = io::read_tensor<T>(in);
    if (!out.emplace(name, std::move(t)).second) {
      throw FormatError("checkpoint '" + path + "' repeats slot '" + name + "'");
    }
  }
  return out;
}

/// Copies checkpoint entries into a model's slots. In strict mode every model
/// slot must be present and every entry must name a model slot. Entries under
/// `skip_prefix` (optimizer state) are ignored.
template <typename T>
void assign_params(ParamMap<T>& params, const TensorMap<T>& entries, bool strict = true,
                   const std::string& skip_prefix = "optim.") {
  for (const auto& [name, t] : entries) {
    if (!skip_prefix.empty() && name.rfind(skip_prefix, 0) == 0) continue;
    auto it = params.find(name);
    if (it == params.end()) {
      if (strict) throw ConfigError("checkpoint slot '" + name + "' does not exist in the model");
      continue;
    }
    if (!(it->second->value.shape() == t.shape())) {
      throw ConfigError("checkpoint slot '" + name + "' has shape " + t.shape().str() + " but the model expects " +
                        it->second->value.shape().str());
    }
  }
  if (strict) {
    for (const auto& [name, _] : params) {
      if (!entries.count(name)) throw ConfigError("model slot '" + name + "' is missing from the checkpoint");
    }
  }
  for (const auto& [name, t] : entries) {
    auto it = params.find(name);
    if (it != params.end()) it->second->value = t;
  }
}

}  // namespace csrnet::nn
