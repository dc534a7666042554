#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "seammil/core/error.hpp"
#include "seammil/core/params.hpp"
#include "seammil/core/random.hpp"
#include "seammil/data_pipeline.hpp"
#include "seammil/equivariance.hpp"
#include "seammil/objective.hpp"
#include "seammil/siamese.hpp"

namespace seammil {

struct TrainConfig {
  double base_lr = 0.001;
  double lr_multiplier_new_params = 10.0;
  double decay_power = 0.9;
  double weight_decay = 0.0005;
  double momentum = 0.0;
  double clip_grad_norm = 0.0;  // global L2 clip on the batch gradient; 0 disables
  int batch_size = 3;
  int epochs = 100;
  AffineSpec affine = AffineSpec::rescale(0.4);
  std::uint64_t seed = 0;
  LossWeights loss_weights = kUnitLossWeights;
  bool augment = true;
  AugmentConfig augmentation;

  void validate() const {
    if (!(base_lr > 0) || !(lr_multiplier_new_params > 0) || !(decay_power > 0) || weight_decay < 0) {
      throw ConfigError("learning rates and decay power must be > 0, weight decay >= 0");
    }
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
    if (clip_grad_norm < 0) throw ConfigError("clip_grad_norm must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    affine.validate();
  }
};

// base_lr * (1 - step / total_steps)^decay_power, for the backbone group.
inline double lr_schedule(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw ScheduleError("total_steps must be >= 1");
  if (step < 0) throw ScheduleError("negative step");
  if (step > total_steps) {
    throw ScheduleError("step " + std::to_string(step) + " beyond schedule of " + std::to_string(total_steps));
  }
  const double remaining = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.base_lr * std::pow(remaining, cfg.decay_power);
}

inline double group_lr(double lr, ParamGroup group, const TrainConfig& cfg) {
  return group == ParamGroup::head ? lr * cfg.lr_multiplier_new_params : lr;
}

template <typename T>
struct TrainState {
  SiameseModel<T> model;
  Gradients<T> velocity;
  long step = 0;
  long total_steps = 1;
  Rng rng;
  std::string last_checkpoint;  // reported when a step diverges
};

template <typename T>
TrainState<T> make_train_state(const ModelConfig& model_cfg, const TrainConfig& cfg, long total_steps) {
  cfg.validate();
  TrainState<T> s;
  s.model = SiameseModel<T>(model_cfg, cfg.seed);
  s.velocity = s.model.parameters().zeros_like();
  s.total_steps = total_steps;
  s.rng = Rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  return s;
}

// One batch item as the trainer consumes it.
template <typename T>
struct TrainItem {
  Grid<T> image;
  bool is_rdr = false;
};

// SGD step over one batch. Losses and gradients are batch means.
template <typename T>
LossBreakdown<T> training_step(const std::vector<TrainItem<T>>& batch, TrainState<T>& state, const TrainConfig& cfg) {
  if (batch.empty()) throw ConfigError("training_step on an empty batch");
  auto& params = state.model.parameters();
  Gradients<T> grads = params.zeros_like();
  LossBreakdown<T> mean;
  const T scale = T(1) / static_cast<T>(batch.size());
  const std::string last_good =
      "last good checkpoint: " + (state.last_checkpoint.empty() ? std::string("<none>") : state.last_checkpoint);
  for (const auto& item : batch) {
    SiameseOutputs<T> out;
    try {
      out = state.model.forward(item.image, cfg.affine);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step) + "; " + last_good);
    }
    const LossBreakdown<T> parts = state.model.losses(out, item.is_rdr, cfg.loss_weights);
    if (!std::isfinite(parts.total)) {
      throw NumericError("non-finite loss at step " + std::to_string(state.step) + "; " + last_good);
    }
    mean += parts;
    state.model.backward(out, item.is_rdr, cfg.loss_weights, scale, grads);
  }
  mean /= static_cast<T>(batch.size());

  if (cfg.clip_grad_norm > 0) {
    T sq = T(0);
    for (const auto& g : grads)
      for (T v : g) sq += v * v;
    const T norm = std::sqrt(sq);
    if (norm > static_cast<T>(cfg.clip_grad_norm)) {
      const T shrink = static_cast<T>(cfg.clip_grad_norm) / norm;
      for (auto& g : grads)
        for (T& v : g) v *= shrink;
    }
  }

  const double lr = lr_schedule(state.step, state.total_steps, cfg);
  auto& all = params.all();
  for (std::size_t p = 0; p < all.size(); ++p) {
    auto& param = all[p];
    const T rate = static_cast<T>(group_lr(lr, param.group, cfg));
    const T decay = param.decay ? static_cast<T>(cfg.weight_decay) : T(0);
    const T mom = static_cast<T>(cfg.momentum);
    auto& v = state.velocity[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < param.value.size(); ++i) {
      const T step_dir = g[i] + decay * param.value[i];
      v[i] = mom * v[i] + step_dir;
      param.value[i] -= rate * v[i];
    }
  }
  ++state.step;
  return mean;
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown<double> losses;
};

template <typename T>
struct FitCallbacks {
  std::function<void(const StepRecord&)> on_step;
  // Called after every epoch with the 1-based epoch number.
  std::function<void(int, TrainState<T>&)> on_epoch;
};

inline long steps_per_epoch(std::size_t n, int batch_size) {
  return static_cast<long>((n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

// epochs x ceil(N / batch) SGD steps over a shuffled, optionally augmented
// dataset. Batch order and augmentation are driven by the state's seeded RNG.
template <typename T>
TrainState<T> fit(const Dataset& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const FitCallbacks<T>& callbacks = {}) {
  if (data.empty()) throw ConfigError("fit: empty dataset");
  cfg.validate();
  const long spe = steps_per_epoch(data.size(), cfg.batch_size);
  TrainState<T> state = make_train_state<T>(model_cfg, cfg, spe * cfg.epochs);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    state.rng.shuffle(order.begin(), order.end());
    for (long b = 0; b < spe; ++b) {
      std::vector<TrainItem<T>> batch;
      const auto begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg.batch_size);
      const auto end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t i = begin; i < end; ++i) {
        const Sample& s = data[order[i]];
        Image img = cfg.augment ? augment(s.image, state.rng, cfg.augmentation) : s.image;
        batch.push_back({img.template cast<T>(), s.is_rdr});
      }
      const double lr = lr_schedule(state.step, state.total_steps, cfg);
      const LossBreakdown<T> losses = training_step(batch, state, cfg);
      if (callbacks.on_step) {
        callbacks.on_step(StepRecord{state.step, epoch, lr,
                                     LossBreakdown<double>{static_cast<double>(losses.multi_class),
                                                           static_cast<double>(losses.er),
                                                           static_cast<double>(losses.ecr),
                                                           static_cast<double>(losses.cross_entropy),
                                                           static_cast<double>(losses.total)}});
      }
    }
    if (callbacks.on_epoch) callbacks.on_epoch(epoch, state);
  }
  return state;
}

}  // namespace seammil
