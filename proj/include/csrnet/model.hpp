#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csrnet/backbone.hpp"
#include "csrnet/blocks.hpp"

namespace csrnet {

enum class Variant { heavy, medium, light };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::heavy: return "heavy";
    case Variant::medium: return "medium";
    case Variant::light: return "light";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "heavy") return Variant::heavy;
  if (s == "medium") return Variant::medium;
  if (s == "light") return Variant::light;
  throw ConfigError("unknown variant '" + s + "' (expected heavy, medium or light)");
}

struct ModelConfig {
  Variant variant = Variant::heavy;
  int stages = 3;
  std::size_t c = 128;
  double mu = 1.0;
  std::size_t num_classes = 19;
  bool spfm_enabled = true;
  bool attention_enabled = true;
  bool fuse_conv1x1_enabled = true;

  void validate() const {
    if (stages < 1 || stages > 3) throw ConfigError(detail::concat("stages must be 1, 2 or 3, got ", stages));
    if (stages != 3 && variant != Variant::heavy) {
      throw ConfigError(detail::concat("stage truncation (stages=", stages, ") is only defined for the heavy variant, not ",
                                       to_string(variant)));
    }
    if (c < 3) throw ConfigError(detail::concat("internal channel count c must be >= 3, got ", c));
    if (!(mu > 0.0 && mu <= 1.0)) throw ConfigError(detail::concat("mu must be in (0, 1], got ", mu));
    if (num_classes < 2 || num_classes > 255) {
      throw ConfigError(detail::concat("num_classes must be in [2, 255], got ", num_classes));
    }
  }
};

/// One refinement stage: a context block on `context_path`, then selective
/// resolution fusion downward through every path to `end_path`.
struct StagePlan {
  int context_path;
  int end_path;
};

/// Paths are numbered 1..4 for the 4x/8x/16x/32x maps. Medium drops the
/// path-1 fusion of stages 1 and 2; light additionally drops the path-2 fusion
/// of stage 1.
inline std::vector<StagePlan> stage_plan(Variant v) {
  switch (v) {
    case Variant::heavy: return {{4, 1}, {3, 1}, {2, 1}};
    case Variant::medium: return {{4, 2}, {3, 2}, {2, 1}};
    case Variant::light: return {{4, 3}, {3, 2}, {2, 1}};
  }
  return {};
}

/// Refined path-1 maps (n, c, H/4, W/4) produced by stages 1..3, when the
/// stage ends on path 1.
template <typename T>
struct StageOutputs {
  std::optional<Tensor4<T>> low_refined;
  std::optional<Tensor4<T>> mid_refined;
  std::optional<Tensor4<T>> high_refined;

  const std::optional<Tensor4<T>>& tap(int stage) const {
    switch (stage) {
      case 1: return low_refined;
      case 2: return mid_refined;
      case 3: return high_refined;
      default: throw ConfigError(detail::concat("invalid stage tap ", stage, " (expected 1, 2 or 3)"));
    }
  }
};

template <typename T>
struct ForwardResult {
  Tensor4<T> logits;  // (n, num_classes, H, W)
  StageOutputs<T> stages;
};

template <typename T>
class CsrNet : public nn::Module<T> {
 public:
  explicit CsrNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    backbone_ = std::make_unique<Backbone<T>>(BackboneConfig{cfg.mu, 2});
    const auto& bch = backbone_->channels();
    plan_ = stage_plan(cfg.variant);
    plan_.resize(static_cast<std::size_t>(cfg.stages));

    std::array<bool, 5> produced{};
    for (std::size_t k = 0; k < plan_.size(); ++k) {
      const auto& sp = plan_[k];
      const std::size_t c_in = k == 0 ? bch[3] : cfg.c;
      context_[k] = std::make_unique<ContextBlock<T>>(c_in, cfg.c, cfg.spfm_enabled);
      for (int p = sp.context_path - 1; p >= sp.end_path; --p) {
        if (!produced[static_cast<std::size_t>(p)] && !prune_[static_cast<std::size_t>(p)]) {
          prune_[static_cast<std::size_t>(p)] =
              std::make_unique<nn::ConvBNReLU<T>>(bch[static_cast<std::size_t>(p - 1)], cfg.c, 1);
        }
        srm_[k][static_cast<std::size_t>(p)] =
            std::make_unique<Srm<T>>(cfg.c, SrmOptions{cfg.attention_enabled, cfg.fuse_conv1x1_enabled});
      }
      for (int p = sp.context_path - 1; p >= sp.end_path; --p) produced[static_cast<std::size_t>(p)] = true;
    }
    if (plan_.back().end_path != 1) throw ConfigError("the last stage must end on path 1");
    head_ = std::make_unique<nn::Conv2d<T>>(cfg.c, cfg.num_classes, 1, 1, true);
  }

  ForwardResult<T> forward(const Tensor4<T>& x, nn::Mode mode) {
    input_shape_ = x.shape();
    const auto pyr = backbone_->forward(x, mode);
    for (auto& row : out_)
      for (auto& t : row) t = Tensor4<T>();
    for (std::size_t p = 1; p < 4; ++p) {
      pruned_[p] = prune_[p] ? prune_[p]->forward(pyr.at(static_cast<int>(p)), mode) : Tensor4<T>();
    }
    for (std::size_t k = 0; k < plan_.size(); ++k) {
      const auto& sp = plan_[k];
      const auto& ctx_in = k == 0 ? pyr.f32() : out_[k - 1][static_cast<std::size_t>(sp.context_path)];
      Tensor4<T> cur = context_[k]->forward(ctx_in, mode);
      for (int p = sp.context_path - 1; p >= sp.end_path; --p) {
        cur = srm_[k][static_cast<std::size_t>(p)]->forward(high_input(k, p), cur, mode);
        out_[k][static_cast<std::size_t>(p)] = cur;
      }
    }
    ForwardResult<T> res;
    const auto& final_map = out_[plan_.size() - 1][1];
    res.logits = ops::bilinear_upsample(head_->forward(final_map), 4);
    logits4_shape_ = final_map.shape();
    logits4_shape_.c = cfg_.num_classes;
    std::array<std::optional<Tensor4<T>>*, 3> taps{&res.stages.low_refined, &res.stages.mid_refined,
                                                   &res.stages.high_refined};
    for (std::size_t k = 0; k < plan_.size(); ++k) {
      if (!out_[k][1].empty()) *taps[k] = out_[k][1];
    }
    return res;
  }

  /// Back-propagates d(loss)/d(logits), accumulating parameter gradients.
  /// Returns the input gradient when `need_dx` is set.
  Tensor4<T> backward(const Tensor4<T>& d_logits, bool need_dx = false) {
    std::array<std::array<Tensor4<T>, 5>, 3> d_out;
    std::array<Tensor4<T>, 5> d_pruned;
    FeaturePyramid<T> d_pyr;

    auto accumulate = [](Tensor4<T>& slot, Tensor4<T>&& g) {
      if (slot.empty()) {
        slot = std::move(g);
      } else {
        ops::add_inplace(slot, g);
      }
    };

    const std::size_t last = plan_.size() - 1;
    d_out[last][1] = head_->backward(ops::bilinear_upsample_backward(logits4_shape_, d_logits));
    for (std::size_t kk = plan_.size(); kk-- > 0;) {
      const auto& sp = plan_[kk];
      Tensor4<T> d_cur;
      for (int p = sp.end_path; p <= sp.context_path - 1; ++p) {
        auto& pending = d_out[kk][static_cast<std::size_t>(p)];
        if (!pending.empty()) accumulate(d_cur, std::move(pending));
        if (d_cur.empty()) continue;
        auto [d_high, d_low] = srm_[kk][static_cast<std::size_t>(p)]->backward(d_cur);
        if (auto src = latest_before(kk, p)) {
          accumulate(d_out[*src][static_cast<std::size_t>(p)], std::move(d_high));
        } else {
          accumulate(d_pruned[static_cast<std::size_t>(p)], std::move(d_high));
        }
        d_cur = std::move(d_low);
      }
      if (d_cur.empty()) continue;
      auto d_ctx = context_[kk]->backward(d_cur);
      if (kk == 0) {
        d_pyr.at(4) = std::move(d_ctx);
      } else {
        accumulate(d_out[kk - 1][static_cast<std::size_t>(sp.context_path)], std::move(d_ctx));
      }
    }
    for (std::size_t p = 1; p < 4; ++p) {
      if (prune_[p] && !d_pruned[p].empty()) d_pyr.at(static_cast<int>(p)) = prune_[p]->backward(d_pruned[p]);
    }
    return backbone_->backward(d_pyr, need_dx);
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& out) override {
    backbone_->collect(nn::join_path(prefix, "backbone"), out);
    for (std::size_t p = 1; p < 4; ++p) {
      if (prune_[p]) prune_[p]->collect(nn::join_path(prefix, "prune.p" + std::to_string(p)), out);
    }
    for (std::size_t k = 0; k < plan_.size(); ++k) {
      const std::string stage = nn::join_path(prefix, "stage" + std::to_string(k + 1));
      context_[k]->collect(nn::join_path(stage, "context"), out);
      for (std::size_t p = 1; p < 4; ++p) {
        if (srm_[k][p]) srm_[k][p]->collect(nn::join_path(stage, "srm.p" + std::to_string(p)), out);
      }
    }
    head_->collect(nn::join_path(prefix, "head"), out);
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<StagePlan>& plan() const { return plan_; }
  Backbone<T>& backbone() { return *backbone_; }

  std::size_t srm_count() const {
    std::size_t n = 0;
    for (const auto& row : srm_)
      for (const auto& s : row) n += s ? 1 : 0;
    return n;
  }
  std::size_t context_count() const { return plan_.size(); }
  std::size_t pyramid_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < plan_.size(); ++k) n += context_[k]->is_pyramid() ? 1 : 0;
    return n;
  }
  /// Path whose map feeds the context block of `stage` (1-based).
  int context_path(int stage) const { return plan_.at(static_cast<std::size_t>(stage - 1)).context_path; }
  Srm<T>* srm(int stage, int path) {
    return srm_.at(static_cast<std::size_t>(stage - 1)).at(static_cast<std::size_t>(path)).get();
  }
  bool has_pruning(int path) const { return prune_.at(static_cast<std::size_t>(path)) != nullptr; }

 private:
  // Stage (0-based, before `stage`) whose output at `path` is the latest one.
  std::optional<std::size_t> latest_before(std::size_t stage, int path) const {
    for (std::size_t k = stage; k-- > 0;) {
      if (!out_[k][static_cast<std::size_t>(path)].empty()) return k;
    }
    return std::nullopt;
  }

  // High-resolution SRM input: the latest earlier-stage output at `path`, else
  // the pruned backbone map.
  const Tensor4<T>& high_input(std::size_t stage, int path) const {
    if (auto k = latest_before(stage, path)) return out_[*k][static_cast<std::size_t>(path)];
    return pruned_[static_cast<std::size_t>(path)];
  }

  ModelConfig cfg_;
  std::vector<StagePlan> plan_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::array<std::unique_ptr<nn::ConvBNReLU<T>>, 4> prune_;
  std::array<std::unique_ptr<ContextBlock<T>>, 3> context_;
  std::array<std::array<std::unique_ptr<Srm<T>>, 4>, 3> srm_;
  std::unique_ptr<nn::Conv2d<T>> head_;

  Shape4 input_shape_{}, logits4_shape_{};
  std::array<Tensor4<T>, 4> pruned_;
  std::array<std::array<Tensor4<T>, 5>, 3> out_;
};

}  // namespace csrnet
