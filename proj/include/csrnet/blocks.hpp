#pragma once

// Context aggregation (pyramid fusion) and selective-resolution fusion blocks.

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "csrnet/layers.hpp"

namespace csrnet {

inline constexpr std::array<std::size_t, 3> kPyramidGrids{2, 4, 8};

/// Shorted pyramid fusion: a 1x1 entry conv to c channels, three pooled
/// branches on 2x2 / 4x4 / 8x8 grids (1x1 conv to floor(c/3) channels and
/// bilinear resize back), concatenation with the entry map, and a 1x1 exit
/// conv back to c channels. Spatial size is preserved.
template <typename T>
class Spfm : public nn::Module<T> {
 public:
  Spfm(std::size_t c_in, std::size_t c) : entry_(c_in, c, 1), c_(c), c_branch_(c / 3) {
    if (c_branch_ == 0) {
      throw ConfigError(detail::concat("pyramid fusion needs at least 3 internal channels, got c=", c));
    }
    for (std::size_t i = 0; i < kPyramidGrids.size(); ++i) {
      branches_[i] = std::make_unique<nn::ConvBNReLU<T>>(c, c_branch_, 1);
    }
    exit_ = std::make_unique<nn::ConvBNReLU<T>>(concat_width(), c, 1);
  }

  std::size_t concat_width() const { return c_ + kPyramidGrids.size() * c_branch_; }
  std::size_t branch_width() const { return c_branch_; }

  Tensor4<T> forward(const Tensor4<T>& x, nn::Mode mode) {
    entry_out_ = entry_.forward(x, mode);
    std::vector<Tensor4<T>> parts{entry_out_};
    for (std::size_t i = 0; i < kPyramidGrids.size(); ++i) {
      auto pooled = ops::adaptive_avg_pool(entry_out_, kPyramidGrids[i]);
      branch_out_[i] = branches_[i]->forward(pooled, mode);
      parts.push_back(ops::resize_bilinear(branch_out_[i], x.h(), x.w()));
    }
    return exit_->forward(ops::concat_channels(parts), mode);
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    auto parts = ops::split_channels(exit_->backward(dy), {c_, c_branch_, c_branch_, c_branch_});
    Tensor4<T> d_entry = std::move(parts[0]);
    for (std::size_t i = 0; i < kPyramidGrids.size(); ++i) {
      auto d_branch = ops::resize_bilinear_backward(branch_out_[i].shape(), parts[i + 1]);
      auto d_pooled = branches_[i]->backward(d_branch);
      ops::add_inplace(d_entry, ops::adaptive_avg_pool_backward(entry_out_.shape(), d_pooled));
    }
    return entry_.backward(d_entry);
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& out) override {
    entry_.collect(nn::join_path(prefix, "entry"), out);
    for (std::size_t i = 0; i < kPyramidGrids.size(); ++i) {
      branches_[i]->collect(nn::join_path(prefix, "branch" + std::to_string(kPyramidGrids[i])), out);
    }
    exit_->collect(nn::join_path(prefix, "exit"), out);
  }

 private:
  nn::ConvBNReLU<T> entry_;
  std::size_t c_;
  std::size_t c_branch_;
  std::array<std::unique_ptr<nn::ConvBNReLU<T>>, 3> branches_;
  std::unique_ptr<nn::ConvBNReLU<T>> exit_;
  Tensor4<T> entry_out_;
  std::array<Tensor4<T>, 3> branch_out_;
};

/// Per-stage context block: the pyramid fusion module, or (ablation) a single
/// 1x1 ConvBNReLU with the same input/output widths.
template <typename T>
class ContextBlock : public nn::Module<T> {
 public:
  ContextBlock(std::size_t c_in, std::size_t c, bool pyramid) {
    if (pyramid) {
      spfm_ = std::make_unique<Spfm<T>>(c_in, c);
    } else {
      plain_ = std::make_unique<nn::ConvBNReLU<T>>(c_in, c, 1);
    }
  }

  Tensor4<T> forward(const Tensor4<T>& x, nn::Mode mode) {
    return spfm_ ? spfm_->forward(x, mode) : plain_->forward(x, mode);
  }
  Tensor4<T> backward(const Tensor4<T>& dy) { return spfm_ ? spfm_->backward(dy) : plain_->backward(dy); }

  void collect(const std::string& prefix, nn::ParamMap<T>& out) override {
    if (spfm_) {
      spfm_->collect(nn::join_path(prefix, "spfm"), out);
    } else {
      plain_->collect(nn::join_path(prefix, "conv"), out);
    }
  }

  bool is_pyramid() const { return spfm_ != nullptr; }

 private:
  std::unique_ptr<Spfm<T>> spfm_;
  std::unique_ptr<nn::ConvBNReLU<T>> plain_;
};

struct SrmOptions {
  bool attention = true;
  bool fuse_conv1x1 = true;
};

/// Selective resolution fusion of a high-resolution map H (n,c,2h,2w) and a
/// low-resolution map L (n,c,h,w):
///
///   Lup = up2(L),  U = H + Lup,  g = gap(U),  s = ReLU(BN(W1 g)),
///   h = W2 s + b2,  l = W3 s + b3,  (a_h, a_l) = softmax over the pair,
///   out = CBR3x3(CBR1x1(a_h * H + a_l * Lup)).
///
/// The attention weights scale the upsampled L, since the sum needs equal
/// spatial sizes. Without attention the fused map is H + Lup.
template <typename T>
class Srm : public nn::Module<T> {
 public:
  Srm(std::size_t c, SrmOptions opt) : c_(c), opt_(opt), fuse3_(c, c, 3) {
    if (opt.attention) {
      fc_ = std::make_unique<nn::FcBNReLU<T>>(c, c);
      to_high_ = std::make_unique<nn::Linear<T>>(c, c, true);
      to_low_ = std::make_unique<nn::Linear<T>>(c, c, true);
    }
    if (opt.fuse_conv1x1) fuse1_ = std::make_unique<nn::ConvBNReLU<T>>(c, c, 1);
  }

  static void check_inputs(const Shape4& high, const Shape4& low) {
    if (high.c != low.c || high.n != low.n) {
      throw DimensionError(detail::concat("srm: high ", high.str(), " and low ", low.str(),
                                          " must share batch and channel counts"));
    }
    if (high.h != 2 * low.h || high.w != 2 * low.w) {
      throw GeometryError(detail::concat("srm: low-resolution input ", low.str(),
                                         " must be exactly half the size of high-resolution input ", high.str()));
    }
  }

  Tensor4<T> forward(const Tensor4<T>& high, const Tensor4<T>& low, nn::Mode mode) {
    check_inputs(high.shape(), low.shape());
    if (high.c() != c_) {
      throw DimensionError(detail::concat("srm: configured for ", c_, " channels, got ", high.shape().str()));
    }
    low_shape_ = low.shape();
    Tensor4<T> merged;
    if (opt_.attention) {
      high_ = high;
      lup_ = ops::bilinear_upsample(low, 2);
      const auto sum = ops::add(high_, lup_);
      sum_shape_ = sum.shape();
      const auto s = fc_->forward(ops::global_avg_pool(sum), mode);
      attention_ = ops::softmax_pair(to_high_->forward(s), to_low_->forward(s));
      merged = ops::add(ops::scale_channels(high_, attention_.first), ops::scale_channels(lup_, attention_.second));
    } else {
      merged = ops::add(high, ops::bilinear_upsample(low, 2));
    }
    return fuse3_.forward(fuse1_ ? fuse1_->forward(merged, mode) : merged, mode);
  }

  /// Returns (d_high, d_low).
  std::pair<Tensor4<T>, Tensor4<T>> backward(const Tensor4<T>& dy) {
    auto d_merged = fuse3_.backward(dy);
    if (fuse1_) d_merged = fuse1_->backward(d_merged);
    if (!opt_.attention) {
      return {d_merged, ops::bilinear_upsample_backward(low_shape_, d_merged)};
    }
    auto [d_high, d_ah] = ops::scale_channels_backward(high_, attention_.first, d_merged);
    auto [d_lup, d_al] = ops::scale_channels_backward(lup_, attention_.second, d_merged);
    const auto d_logits = ops::softmax_pair_backward(attention_, d_ah, d_al);
    auto d_s = to_high_->backward(d_logits.first);
    ops::add_inplace(d_s, to_low_->backward(d_logits.second));
    const auto d_sum = ops::global_avg_pool_backward(sum_shape_, fc_->backward(d_s));
    ops::add_inplace(d_high, d_sum);
    ops::add_inplace(d_lup, d_sum);
    return {std::move(d_high), ops::bilinear_upsample_backward(low_shape_, d_lup)};
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& out) override {
    if (opt_.attention) {
      fc_->collect(nn::join_path(prefix, "attention.fc"), out);
      to_high_->collect(nn::join_path(prefix, "attention.high"), out);
      to_low_->collect(nn::join_path(prefix, "attention.low"), out);
    }
    if (fuse1_) fuse1_->collect(nn::join_path(prefix, "fuse1"), out);
    fuse3_.collect(nn::join_path(prefix, "fuse3"), out);
  }

  /// Attention weights (a_h, a_l) of the last forward; empty without attention.
  const ops::Pair<T>& attention() const { return attention_; }
  const SrmOptions& options() const { return opt_; }

  nn::FcBNReLU<T>* fc() { return fc_.get(); }
  nn::Linear<T>* to_high() { return to_high_.get(); }
  nn::Linear<T>* to_low() { return to_low_.get(); }
  nn::ConvBNReLU<T>* fuse1() { return fuse1_.get(); }
  nn::ConvBNReLU<T>& fuse3() { return fuse3_; }

 private:
  std::size_t c_;
  SrmOptions opt_;
  std::unique_ptr<nn::FcBNReLU<T>> fc_;
  std::unique_ptr<nn::Linear<T>> to_high_, to_low_;
  std::unique_ptr<nn::ConvBNReLU<T>> fuse1_;
  nn::ConvBNReLU<T> fuse3_;

  Tensor4<T> high_, lup_;
  Shape4 low_shape_{}, sum_shape_{};
  ops::Pair<T> attention_;
};

}  // namespace csrnet
