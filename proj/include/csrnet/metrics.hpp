#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csrnet/data.hpp"
#include "csrnet/model.hpp"

namespace csrnet {

/// Integer pixel counts indexed [truth][prediction].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 0) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

  void add(std::uint8_t truth, std::uint8_t pred) { ++counts_.at(static_cast<std::size_t>(truth) * k_ + pred); }

  void add(const std::vector<std::uint8_t>& truth, const std::vector<std::uint8_t>& pred,
           std::uint8_t ignore_index = data::kIgnore) {
    if (truth.size() != pred.size()) {
      throw DimensionError(detail::concat("confusion: ", truth.size(), " labels vs ", pred.size(), " predictions"));
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != ignore_index) add(truth[i], pred[i]);
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw DimensionError("confusion: merging matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  std::size_t num_classes() const { return k_; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct LatencyStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double fps = 0.0;
  std::size_t iters = 0;
};

struct MetricsReport {
  ConfusionMatrix confusion;
  std::vector<double> iou;       // NaN for classes absent from truth and prediction
  std::vector<bool> present;
  double miou = 0.0;
  std::optional<LatencyStats> latency;

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "num_classes = " << confusion.num_classes() << "\n";
    os << "pixels = " << confusion.total() << "\n";
    os << "miou = " << miou << "\n";
    for (std::size_t k = 0; k < iou.size(); ++k) {
      os << "iou." << k << " = ";
      if (present[k]) {
        os << iou[k];
      } else {
        os << "absent";
      }
      os << "\n";
    }
    for (std::size_t t = 0; t < confusion.num_classes(); ++t) {
      os << "confusion." << t << " =";
      for (std::size_t p = 0; p < confusion.num_classes(); ++p) os << " " << confusion.at(t, p);
      os << "\n";
    }
    if (latency) {
      os << "latency.mean_ms = " << latency->mean_ms << "\n";
      os << "latency.median_ms = " << latency->median_ms << "\n";
      os << "latency.fps = " << latency->fps << "\n";
      os << "latency.iters = " << latency->iters << "\n";
    }
    return os.str();
  }
};

/// IoU_k = TP / (TP + FP + FN); mIoU averages classes present in truth or prediction.
inline MetricsReport make_report(const ConfusionMatrix& cm) {
  MetricsReport r{cm, {}, {}, 0.0, std::nullopt};
  const std::size_t K = cm.num_classes();
  r.iou.assign(K, std::nan(""));
  r.present.assign(K, false);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (std::size_t j = 0; j < K; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.present[k] = true;
    r.iou[k] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.iou[k];
    ++counted;
  }
  r.miou = counted ? sum / static_cast<double>(counted) : 0.0;
  return r;
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
template <typename T>
std::vector<std::uint8_t> argmax_classes(const Tensor4<T>& logits) {
  const std::size_t K = logits.c(), P = logits.h() * logits.w();
  std::vector<std::uint8_t> out(logits.n() * P);
  for (std::size_t n = 0; n < logits.n(); ++n) {
    const T* base = logits.sample(n);
    for (std::size_t i = 0; i < P; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (base[k * P + i] > base[best * P + i]) best = k;
      out[n * P + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

/// Eval-mode segmentation of the dataset, accumulated into an integer
/// confusion matrix. Consecutive samples of equal size are batched.
template <typename T>
MetricsReport evaluate(CsrNet<T>& model, const data::Dataset& ds, std::size_t batch_size = 8) {
  const std::size_t K = model.config().num_classes;
  if (ds.num_classes != K) {
    throw ConfigError(detail::concat("model has num_classes=", K, " but dataset has num_classes=", ds.num_classes));
  }
  ConfusionMatrix cm(K);
  std::size_t i = 0;
  std::vector<const data::SegSample*> batch;
  while (i < ds.samples.size()) {
    batch.clear();
    const auto& first = ds.samples[i];
    while (i < ds.samples.size() && batch.size() < batch_size && ds.samples[i].height() == first.height() &&
           ds.samples[i].width() == first.width()) {
      batch.push_back(&ds.samples[i++]);
    }
    auto [x, labels] = data::make_batch<T>(batch);
    const auto out = model.forward(x, nn::Mode::eval);
    cm.add(labels, argmax_classes(out.logits));
  }
  return make_report(cm);
}

}  // namespace csrnet
