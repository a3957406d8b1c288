#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sigrl/alignment.hpp"
#include "sigrl/eval.hpp"
#include "sigrl/feature_io.hpp"
#include "sigrl/model.hpp"
#include "sigrl/optim.hpp"

namespace sigrl {

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  AdamWConfig optim;
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  // Train H as a parameter instead of using the dataset embeddings frozen.
  bool train_label_embeddings = false;

  void validate() const {
    loss.validate();
    optim.validate();
    if (batch_size < 1) throw ValueError("batch_size must be >= 1");
    if (epochs < 1) throw ValueError("epochs must be >= 1");
    if (model.k < 1) throw ValueError("k must be >= 1");
  }
};

struct EpochLog {
  std::size_t epoch = 0;          // 1-based
  double loss = 0.0;              // mean objective per training sample
  std::optional<double> val_map;  // GZSL mAP on the val split, if it has samples
  double lr = 0.0;                // learning rate of the epoch's first step
};

struct FitResult {
  std::vector<EpochLog> epochs;
  std::vector<double> batch_losses;
  std::vector<double> lr_trace;  // one entry per optimizer step
  ModelParams final_params;
  ModelParams best_params;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_map;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline std::size_t steps_per_epoch(std::size_t num_train, std::size_t batch_size) {
  return (num_train + batch_size - 1) / batch_size;
}

/// One forward/backward pass over a batch of sample indices. Returns the
/// batch objective; gradients are left on the tape-bound variables.
inline double batch_objective(const ModelParams& params, const Dataset& ds, std::span<const std::size_t> batch,
                              const TrainConfig& cfg, bool pseudo_labels, ModelParams* grads) {
  Tape tape;
  const ModelVars vars = bind(tape, params, true);
  const LabelContext ctx = label_context(tape, vars, ds.label_space, cfg.model);
  std::vector<LossInput> inputs;
  inputs.reserve(batch.size());
  for (std::size_t idx : batch) {
    const Sample& s = ds.samples[idx];
    const SampleForward fw = forward_on_tape(vars, ctx, s, cfg.model);
    inputs.push_back({fw.scores, fw.f_class, tape.constant(s.teacher_class), s.labels});
  }
  const Var loss = total_loss(inputs, cfg.loss, pseudo_labels);
  const double value = loss.value().item();
  if (grads) {
    tape.backward(loss);
    *grads = gradients(vars);
  }
  return value;
}

/// Shuffled mini-batch AdamW training with a cosine schedule over all steps.
/// Keeps the parameters of the epoch with the best val GZSL mAP.
inline FitResult fit(const Dataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  ds.validate();
  const auto train = ds.indices(Split::train);
  if (train.empty()) throw ValueError("dataset has no training samples");
  if (cfg.loss.mode != LossMode::ranking_distill) {
    for (std::size_t i : train) {
      try {
        check_single_positive(ds.samples[i].labels);
      } catch (const ValueError& e) {
        throw ValueError("sample " + ds.samples[i].image_id + ": " + e.what() +
                         " (apply the single-positive mask first)");
      }
    }
  }
  const bool has_val = !ds.indices(Split::val).empty();

  std::mt19937_64 rng(cfg.seed);
  ModelParams params = init_params({ds.num_classes(), ds.dim(), ds.raw_dim}, rng());
  if (cfg.train_label_embeddings) params.label_embeddings = ds.label_space.embeddings;
  check_compatible(params, ds, cfg.model);

  const std::size_t per_epoch = steps_per_epoch(train.size(), cfg.batch_size);
  const std::size_t total_steps = per_epoch * cfg.epochs;
  const std::size_t last_step = total_steps - 1;

  FitResult result;
  OptimState state;
  std::vector<std::size_t> order = train;
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const bool pseudo = cfg.loss.mode == LossMode::em_apl && epoch >= cfg.loss.apl_warmup_epochs;
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr_schedule(t, last_step, cfg.optim.lr, cfg.optim.min_lr);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + lo, hi - lo);
      ModelParams grads;
      const double loss = batch_objective(params, ds, batch, cfg, pseudo, &grads);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(b + 1));
      }
      const double lr = lr_schedule(t, last_step, cfg.optim.lr, cfg.optim.min_lr);
      adamw_step(params, grads, state, cfg.optim, lr);
      result.batch_losses.push_back(loss);
      result.lr_trace.push_back(lr);
      epoch_sum += cfg.loss.reduction == Reduction::mean ? loss * static_cast<double>(batch.size()) : loss;
      ++t;
    }
    log.loss = epoch_sum / static_cast<double>(train.size());
    if (has_val) {
      log.val_map = evaluate(params, cfg.model, ds, Protocol::gzsl, Split::val).map;
      if (!result.best_val_map || *log.val_map > *result.best_val_map) {
        result.best_val_map = log.val_map;
        result.best_params = params;
        result.best_epoch = log.epoch;
      }
    }
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.final_params = params;
  if (!has_val) {
    result.best_params = params;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

}  // namespace sigrl
