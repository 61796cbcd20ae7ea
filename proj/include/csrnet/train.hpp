#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csrnet/data.hpp"
#include "csrnet/loss.hpp"
#include "csrnet/metrics.hpp"
#include "csrnet/model.hpp"
#include "csrnet/optim.hpp"

namespace csrnet {

struct TrainConfig {
  double lr_init = 4e-4;
  double lr_min = 1e-6;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  std::size_t crop = 64;
  bool augment = true;
  bool shuffle = true;

  void validate() const {
    if (lr_init < 0 || lr_min < 0 || weight_decay < 0) throw ConfigError("learning rates and weight decay must be >= 0");
    if (lr_min > lr_init) throw ConfigError(detail::concat("lr_min ", lr_min, " exceeds lr_init ", lr_init));
    if (batch_size == 0 || epochs == 0) throw ConfigError("batch_size and epochs must be positive");
    if (crop == 0 || crop % 32 != 0) throw ConfigError(detail::concat("crop ", crop, " must be a positive multiple of 32"));
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_miou = 0.0;
};

inline std::string format_log_line(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.17g\t%.17g", e.epoch, e.lr, e.train_loss, e.val_miou);
  return buf;
}

template <typename T>
struct TrainResult {
  std::vector<EpochLog> log;
  double best_miou = -1.0;
  std::size_t best_epoch = 0;
  nn::TensorMap<T> best_state;  // parameters plus optimizer moments
};

struct TrainOutputs {
  std::optional<std::string> log_path;         // append-only epoch log
  std::optional<std::string> checkpoint_path;  // best-val-mIoU checkpoint
};

namespace detail {

template <typename T>
std::string first_nonfinite_slot(const nn::ParamMap<T>& params) {
  for (const auto& [name, p] : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i)
      if (!std::isfinite(p->value[i])) return name + " (value)";
    for (std::size_t i = 0; i < p->grad.size(); ++i)
      if (!std::isfinite(p->grad[i])) return name + " (gradient)";
  }
  return "logits";
}

}  // namespace detail

/// Initializes the model from cfg.seed and trains it with Adam on a cosine
/// schedule, evaluating mIoU on `val` after every epoch. Deterministic given
/// the seed: initialization, data order and augmentation all derive from it.
template <typename T>
TrainResult<T> train(CsrNet<T>& model, const data::Dataset& train_set, const data::Dataset& val_set,
                     const TrainConfig& cfg, const TrainOutputs& outputs = {}) {
  cfg.validate();
  if (train_set.num_classes != model.config().num_classes) {
    throw ConfigError(detail::concat("model has num_classes=", model.config().num_classes,
                                     " but training set has num_classes=", train_set.num_classes));
  }
  auto params = model.params();
  nn::init_params(params, cfg.seed);
  Adam<T> adam(AdamOptions{0.9, 0.999, 1e-8, cfg.weight_decay});
  std::optional<std::ofstream> log_file;
  if (outputs.log_path) {
    log_file.emplace(*outputs.log_path, std::ios::app);
    if (!*log_file) throw FormatError("cannot open training log '" + *outputs.log_path + "'");
  }

  TrainResult<T> result;
  std::vector<data::SegSample> batch_samples;
  std::vector<const data::SegSample*> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
    const auto order = data::epoch_order(train_set.samples.size(), cfg.shuffle, cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch_samples.clear();
      for (std::size_t j = start; j < end; ++j) {
        const auto& s = train_set.samples[order[j]];
        if (cfg.augment) {
          batch_samples.push_back(data::augment(s, mix_seed(cfg.seed, epoch * 1000003ULL + j), cfg.crop, cfg.crop));
        } else {
          batch_samples.push_back(data::augment_with(s, {}, cfg.crop, cfg.crop));
        }
      }
      batch.clear();
      for (const auto& s : batch_samples) batch.push_back(&s);
      auto [x, labels] = data::make_batch<T>(batch);

      nn::zero_grads(params);
      const auto out = model.forward(x, nn::Mode::train);
      auto loss = cross_entropy_loss(out.logits, labels);
      if (!std::isfinite(loss.loss)) {
        throw NumericError(detail::concat("non-finite training loss at epoch ", epoch, ", batch ", batches,
                                          "; first offending slot: ", detail::first_nonfinite_slot(params)));
      }
      model.backward(loss.grad);
      adam.step(params, lr);
      loss_sum += loss.loss;
      ++batches;
    }

    EpochLog entry{epoch, lr, loss_sum / static_cast<double>(std::max<std::size_t>(1, batches)), 0.0};
    entry.val_miou = evaluate(model, val_set, cfg.batch_size).miou;
    result.log.push_back(entry);
    if (log_file) *log_file << format_log_line(entry) << "\n" << std::flush;

    if (entry.val_miou > result.best_miou) {
      result.best_miou = entry.val_miou;
      result.best_epoch = epoch;
      result.best_state = nn::snapshot(params);
      for (auto& [name, t] : adam.state()) result.best_state.insert_or_assign(name, t);
      if (outputs.checkpoint_path) nn::save_checkpoint(*outputs.checkpoint_path, result.best_state);
    }
  }
  return result;
}

}  // namespace csrnet
