#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "csrnet/layers.hpp"

namespace csrnet {

struct BackboneConfig {
  double width = 1.0;  // multiplier in (0, 1]
  std::size_t blocks_per_stage = 2;

  static constexpr std::array<std::size_t, 4> kBaseChannels{64, 128, 256, 512};

  /// Channel counts of the four stages: max(4, round(width * base)).
  std::array<std::size_t, 4> channels() const {
    std::array<std::size_t, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) {
      const auto scaled = static_cast<std::size_t>(std::lround(width * static_cast<double>(kBaseChannels[i])));
      out[i] = std::max<std::size_t>(4, scaled);
    }
    return out;
  }
};

/// Backbone outputs. Path p (1..4) holds the map downsampled by 2^(p+1).
template <typename T>
struct FeaturePyramid {
  std::array<Tensor4<T>, 4> paths;

  Tensor4<T>& at(int path) { return paths.at(static_cast<std::size_t>(path - 1)); }
  const Tensor4<T>& at(int path) const { return paths.at(static_cast<std::size_t>(path - 1)); }
  const Tensor4<T>& f4() const { return paths[0]; }
  const Tensor4<T>& f8() const { return paths[1]; }
  const Tensor4<T>& f16() const { return paths[2]; }
  const Tensor4<T>& f32() const { return paths[3]; }
};

/// Residual block: conv3x3-BN-ReLU, conv3x3-BN, plus identity or a 1x1
/// strided projection, then ReLU.
template <typename T>
class ResidualBlock : public nn::Module<T> {
 public:
  ResidualBlock(std::size_t c_in, std::size_t c_out, std::size_t stride)
      : conv1_(c_in, c_out, 3, stride), conv2_(c_out, c_out, 3, 1, false), bn2_(c_out) {
    if (stride != 1 || c_in != c_out) {
      proj_conv_ = std::make_unique<nn::Conv2d<T>>(c_in, c_out, 1, stride, false);
      proj_bn_ = std::make_unique<nn::BatchNorm<T>>(c_out);
    }
  }

  Tensor4<T> forward(const Tensor4<T>& x, nn::Mode mode) {
    auto branch = bn2_.forward(conv2_.forward(conv1_.forward(x, mode)), mode);
    auto skip = proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x), mode) : x;
    out_ = ops::relu(ops::add(branch, skip));
    return out_;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    const auto d = ops::relu_backward(out_, dy);
    auto dx = conv1_.backward(conv2_.backward(bn2_.backward(d)));
    if (proj_conv_) {
      ops::add_inplace(dx, proj_conv_->backward(proj_bn_->backward(d)));
    } else {
      ops::add_inplace(dx, d);
    }
    return dx;
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& out) override {
    conv1_.collect(nn::join_path(prefix, "conv1"), out);
    conv2_.collect(nn::join_path(prefix, "conv2"), out);
    bn2_.collect(nn::join_path(prefix, "bn2"), out);
    if (proj_conv_) {
      proj_conv_->collect(nn::join_path(prefix, "proj.conv"), out);
      proj_bn_->collect(nn::join_path(prefix, "proj.bn"), out);
    }
  }

  bool has_projection() const { return proj_conv_ != nullptr; }

 private:
  nn::ConvBNReLU<T> conv1_;
  nn::Conv2d<T> conv2_;
  nn::BatchNorm<T> bn2_;
  std::unique_ptr<nn::Conv2d<T>> proj_conv_;
  std::unique_ptr<nn::BatchNorm<T>> proj_bn_;
  Tensor4<T> out_;
};

/// Residual encoder producing the 4x/8x/16x/32x pyramid. The stem is two
/// stride-2 3x3 ConvBNReLU layers (4x reduction) ahead of RB-1.
template <typename T>
class Backbone : public nn::Module<T> {
 public:
  explicit Backbone(BackboneConfig cfg) : cfg_(cfg), channels_(cfg.channels()) {
    if (!(cfg.width > 0.0 && cfg.width <= 1.0)) {
      throw ConfigError(detail::concat("backbone width multiplier must be in (0, 1], got ", cfg.width));
    }
    if (cfg.blocks_per_stage == 0) throw ConfigError("backbone needs at least one block per stage");
    stem1_ = std::make_unique<nn::ConvBNReLU<T>>(3, channels_[0], 3, 2);
    stem2_ = std::make_unique<nn::ConvBNReLU<T>>(channels_[0], channels_[0], 3, 2);
    std::size_t c_in = channels_[0];
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        stages_[s].push_back(std::make_unique<ResidualBlock<T>>(c_in, channels_[s], stride));
        c_in = channels_[s];
      }
    }
  }

  static void check_input(const Shape4& s) {
    if (s.c != 3) {
      throw DimensionError(detail::concat("backbone expects 3 input channels, got input ", s.str()));
    }
    if (s.h % 32 != 0 || s.w % 32 != 0) {
      throw GeometryError(detail::concat("input spatial size ", s.h, "x", s.w, " must be divisible by 32"));
    }
  }

  FeaturePyramid<T> forward(const Tensor4<T>& x, nn::Mode mode) {
    check_input(x.shape());
    FeaturePyramid<T> out;
    auto h = stem2_->forward(stem1_->forward(x, mode), mode);
    for (std::size_t s = 0; s < 4; ++s) {
      for (auto& block : stages_[s]) h = block->forward(h, mode);
      out.paths[s] = h;
    }
    return out;
  }

  /// `grads` holds the gradient for each pyramid level; empty entries count as
  /// zero. Returns the input gradient when `need_dx` is set.
  Tensor4<T> backward(const FeaturePyramid<T>& grads, bool need_dx = false) {
    Tensor4<T> g;
    for (int s = 3; s >= 0; --s) {
      const auto& level = grads.paths[static_cast<std::size_t>(s)];
      if (!level.empty()) {
        if (g.empty()) {
          g = level;
        } else {
          ops::add_inplace(g, level);
        }
      }
      if (g.empty()) continue;
      auto& blocks = stages_[static_cast<std::size_t>(s)];
      for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) g = (*it)->backward(g);
    }
    if (g.empty()) return g;
    return stem1_->backward(stem2_->backward(g), need_dx);
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& out) override {
    stem1_->collect(nn::join_path(prefix, "stem1"), out);
    stem2_->collect(nn::join_path(prefix, "stem2"), out);
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b]->collect(nn::join_path(prefix, "rb" + std::to_string(s + 1) + "." + std::to_string(b)), out);
      }
    }
  }

  const std::array<std::size_t, 4>& channels() const { return channels_; }
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  std::array<std::size_t, 4> channels_;
  std::unique_ptr<nn::ConvBNReLU<T>> stem1_, stem2_;
  std::array<std::vector<std::unique_ptr<ResidualBlock<T>>>, 4> stages_;
};

}  // namespace csrnet
