#ifndef CARPET_ATTACK_FORGE_HPP
#define CARPET_ATTACK_FORGE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/core/image.hpp"
#include "carpet/loss/feature_cache.hpp"
#include "carpet/loss/feature_loss.hpp"
#include "carpet/loss/task_loss.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

enum class OptimizerKind { sgd_momentum, adam };
enum class PatchInit { zeros, uniform_random };

/// Schedule of the universal patch optimizer. One step is
/// `iterations_per_step` gradient updates, grouped into minibatches that
/// each receive `updates_per_image` consecutive updates; images come from
/// a seeded shuffle of the stream, reshuffled after each full pass.
struct CraftConfig {
  std::size_t steps = 100;
  std::size_t iterations_per_step = 1000;
  std::size_t updates_per_image = 10;
  std::size_t minibatch = 1;
  double momentum = 0.9;
  double learning_rate = 0.01;
  OptimizerKind optimizer_kind = OptimizerKind::sgd_momentum;
  double adam_lr = 0.5;
  PatchInit init = PatchInit::zeros;
  std::uint64_t seed = 0;

  std::size_t minibatches_per_step() const { return iterations_per_step / updates_per_image; }

  void validate() const {
    if (steps < 1) throw ValidationError("CraftConfig: steps must be >= 1");
    if (updates_per_image < 1) throw ValidationError("CraftConfig: updates_per_image must be >= 1");
    if (iterations_per_step < 1 || iterations_per_step % updates_per_image != 0) {
      throw ValidationError("CraftConfig: iterations_per_step must be a positive multiple of updates_per_image");
    }
    if (minibatch < 1) throw ValidationError("CraftConfig: minibatch must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("CraftConfig: momentum must be in [0,1)");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ValidationError("CraftConfig: learning_rate must be >= 0");
    }
    if (!(adam_lr >= 0.0) || !std::isfinite(adam_lr)) throw ValidationError("CraftConfig: adam_lr must be >= 0");
  }
};

/// TMIFGSM schedule: each step makes one update per stream image (or per
/// `images_per_step` images when non-zero, cycling the stream in order).
struct NoiseCraftConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 0.0;  // 0 means epsilon / 10
  std::size_t steps = 100;
  double momentum_decay = 1.0;
  std::size_t images_per_step = 0;
  /// Start from uniform noise in the epsilon ball. The feature distance has
  /// zero gradient at delta = 0, so a zero start never moves.
  bool random_start = true;
  std::uint64_t seed = 0;

  double effective_step() const { return step_size > 0.0 ? step_size : epsilon / 10.0; }

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ValidationError("NoiseCraftConfig: epsilon must be > 0");
    const double a = effective_step();
    if (!(a > 0.0 && a <= epsilon)) throw ValidationError("NoiseCraftConfig: need 0 < step_size <= epsilon");
    if (!(momentum_decay >= 0.0)) throw ValidationError("NoiseCraftConfig: momentum_decay must be >= 0");
  }
};

struct StepLoss {
  std::size_t step = 0;
  double mean_loss = 0.0;
};

inline nlohmann::json trace_to_json(const std::vector<StepLoss>& trace) {
  auto j = nlohmann::json::array();
  for (const auto& s : trace) j.push_back({{"step", s.step}, {"mean_loss", s.mean_loss}});
  return j;
}

struct PatchResult {
  Patch patch;
  std::vector<StepLoss> trace;
};

struct NoiseResult {
  Noise noise;
  std::vector<StepLoss> trace;
};

/// Optional observers for tests and progress reporting.
struct CraftHooks {
  /// Called after every update with the current iterate (already clipped).
  std::function<void(std::size_t step, const Tensor3& iterate)> on_update;
  /// Called with each finished step's mean loss.
  std::function<void(const StepLoss&)> on_step;
  /// Clean-feature cache shared across images; optional.
  FeatureCache* cache = nullptr;
};

/// Builds the ascent objective for stream image `index` (already fetched).
using ObjectiveFactory = std::function<Objective(std::size_t index, const Image& image)>;

namespace detail {

class PatchOptimizer {
 public:
  PatchOptimizer(const CraftConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  /// Ascent step on `values` with gradient `grad`, then clip to [0,1].
  void ascend(std::span<double> values, std::span<const double> grad) {
    if (cfg_.optimizer_kind == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < values.size(); ++i) {
        m_[i] = cfg_.momentum * m_[i] + grad[i];
        values[i] += cfg_.learning_rate * m_[i];
      }
    } else {
      ++t_;
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (std::size_t i = 0; i < values.size(); ++i) {
        m_[i] = b1 * m_[i] + (1 - b1) * grad[i];
        v_[i] = b2 * v_[i] + (1 - b2) * grad[i] * grad[i];
        values[i] += cfg_.adam_lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
      }
    }
    clip_unit_inplace(values);
  }

 private:
  const CraftConfig& cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

/// Seeded shuffled cycle over [0, n).
class ImageCycle {
 public:
  ImageCycle(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

inline void require_stream(std::span<const Image> stream) {
  if (stream.empty()) throw ValidationError("attack: empty training stream");
  for (const auto& x : stream) {
    if (x.shape() != stream.front().shape()) throw ShapeError("attack: stream images differ in shape");
  }
}

}  // namespace detail

/// Universal patch by gradient ascent of an arbitrary per-image objective
/// on the composited image; only patch pixels are optimized.
inline PatchResult craft_patch(const Model& model, std::span<const Image> stream, const Placement& placement,
                               const CraftConfig& cfg, const ObjectiveFactory& make_objective,
                               const CraftHooks& hooks = {}) {
  cfg.validate();
  detail::require_stream(stream);
  const Rect rect = placement.resolve(stream.front().shape());

  std::mt19937_64 rng(cfg.seed);
  Tensor3 delta(3, rect.height, rect.width, 0.0);
  if (cfg.init == PatchInit::uniform_random) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : delta.values()) v = u(rng);
  }
  detail::PatchOptimizer opt(cfg, delta.size());
  detail::ImageCycle cycle(stream.size(), rng());

  std::vector<StepLoss> trace;
  Tensor3 grad(3, rect.height, rect.width);
  std::vector<std::size_t> batch(cfg.minibatch);
  std::vector<Objective> objectives(cfg.minibatch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t mb = 0; mb < cfg.minibatches_per_step(); ++mb) {
      for (std::size_t b = 0; b < cfg.minibatch; ++b) {
        batch[b] = cycle.next();
        objectives[b] = make_objective(batch[b], stream[batch[b]]);
      }
      for (std::size_t u = 0; u < cfg.updates_per_image; ++u) {
        grad.fill(0.0);
        double loss = 0.0;
        const Patch current(delta);
        for (std::size_t b = 0; b < cfg.minibatch; ++b) {
          const Image& x = stream[batch[b]];
          const LossGradient lg = model.input_gradient(apply_patch(x, current, placement), objectives[b]);
          if (!std::isfinite(lg.loss)) {
            throw RuntimeFailure("craft_patch: non-finite loss at step " + std::to_string(step) + " on image '" +
                                 x.id() + "'");
          }
          loss += lg.loss;
          for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < rect.height; ++y) {
              for (std::size_t xx = 0; xx < rect.width; ++xx) {
                grad(c, y, xx) += lg.grad(c, rect.row + y, rect.col + xx) / static_cast<double>(cfg.minibatch);
              }
            }
          }
        }
        loss_sum += loss / static_cast<double>(cfg.minibatch);
        ++loss_count;
        opt.ascend(delta.values(), grad.values());
        if (hooks.on_update) hooks.on_update(step, delta);
      }
    }
    trace.push_back({step, loss_sum / static_cast<double>(loss_count)});
    if (hooks.on_step) hooks.on_step(trace.back());
  }
  return {Patch(std::move(delta)), std::move(trace)};
}

namespace detail {

inline FeatureMapSet clean_features(const Model& model, const Image& x, const std::vector<LayerId>& layers,
                                    FeatureCache* cache) {
  return cache ? cache->get(model, x, layers) : model.extract_features(x, layers);
}

}  // namespace detail

/// Feature-only universal patch: maximizes the masked feature disruption,
/// no labels and no task head involved.
inline PatchResult craft_carpet_patch(const Model& model, std::span<const Image> stream, const Placement& placement,
                                      const FeatureTargetSpec& spec, const CraftConfig& cfg,
                                      const CraftHooks& hooks = {}) {
  detail::require_stream(stream);
  const Shape2 shape = stream.front().shape();
  spec.validate(model, shape);
  const FeatureMaskSet masks = make_feature_masks(model, spec, shape, placement);
  const auto layers = spec.layers();
  return craft_patch(
      model, stream, placement, cfg,
      [&](std::size_t, const Image& x) {
        auto clean = std::make_shared<const FeatureMapSet>(detail::clean_features(model, x, layers, hooks.cache));
        return feature_objective(std::move(clean), spec, masks);
      },
      hooks);
}

/// Task-loss universal patch (ascent on the model's own loss).
inline PatchResult craft_task_patch(const Model& model, std::span<const Image> stream, std::span<const TaskLabel> labels,
                                    const Placement& placement, const CraftConfig& cfg, const CraftHooks& hooks = {}) {
  if (model.task_kind() == TaskKind::none) throw ValidationError("craft_task_patch: model has no task head");
  if (labels.size() != stream.size()) throw ValidationError("craft_task_patch: labels not aligned with stream");
  return craft_patch(
      model, stream, placement, cfg, [&](std::size_t i, const Image&) { return task_objective(model, labels[i]); },
      hooks);
}

/// Universal max-norm noise by momentum iterative sign-gradient ascent of the
/// feature disruption (all-ones masks). The noise is projected onto the
/// epsilon ball after every update; composited images are clipped to [0,1].
inline NoiseResult craft_feature_noise_tmifgsm(const Model& model, std::span<const Image> stream,
                                               const FeatureTargetSpec& spec, const NoiseCraftConfig& ncfg,
                                               const CraftHooks& hooks = {}) {
  ncfg.validate();
  detail::require_stream(stream);
  const Shape2 shape = stream.front().shape();
  spec.validate(model, shape);
  const FeatureMaskSet masks = make_feature_masks(model, spec, shape, std::nullopt);
  const auto layers = spec.layers();
  const NoiseBudget budget(ncfg.epsilon);
  const double alpha = ncfg.effective_step();

  Tensor3 delta(3, shape.height, shape.width, 0.0);
  if (ncfg.random_start && ncfg.steps > 0) {
    std::mt19937_64 rng(ncfg.seed);
    std::uniform_real_distribution<double> u(-ncfg.epsilon, ncfg.epsilon);
    for (double& v : delta.values()) v = u(rng);
  }
  Tensor3 g(3, shape.height, shape.width, 0.0);
  std::vector<StepLoss> trace;
  const std::size_t per_step = ncfg.images_per_step == 0 ? stream.size() : ncfg.images_per_step;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < ncfg.steps; ++step) {
    double loss_sum = 0.0;
    for (std::size_t k = 0; k < per_step; ++k) {
      const Image& x = stream[cursor];
      cursor = (cursor + 1) % stream.size();
      auto clean = std::make_shared<const FeatureMapSet>(detail::clean_features(model, x, layers, hooks.cache));
      const Image x_adv = apply_noise(x, Noise(delta, budget));
      const LossGradient lg = model.input_gradient(x_adv, feature_objective(std::move(clean), spec, masks));
      if (!std::isfinite(lg.loss)) {
        throw RuntimeFailure("craft_feature_noise_tmifgsm: non-finite loss at step " + std::to_string(step));
      }
      loss_sum += lg.loss;
      double l1 = 0.0;
      for (double v : lg.grad.values()) l1 += std::abs(v);
      const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
      auto gv = g.values();
      auto dv = delta.values();
      const auto grad = lg.grad.values();
      for (std::size_t i = 0; i < gv.size(); ++i) {
        gv[i] = ncfg.momentum_decay * gv[i] + grad[i] * inv;
        const double s = gv[i] > 0.0 ? 1.0 : (gv[i] < 0.0 ? -1.0 : 0.0);
        dv[i] = std::clamp(dv[i] + alpha * s, -ncfg.epsilon, ncfg.epsilon);
      }
      if (hooks.on_update) hooks.on_update(step, delta);
    }
    trace.push_back({step, loss_sum / static_cast<double>(per_step)});
    if (hooks.on_step) hooks.on_step(trace.back());
  }
  return {Noise(std::move(delta), budget), std::move(trace)};
}

namespace detail {

inline void require_explicit_channels(const FeatureTargetSpec& spec) {
  for (const auto& t : spec.targets) {
    if (!t.channels.all && t.channels.indices.empty()) {
      throw ValidationError("craft_forced: empty channel set for layer '" + t.layer.name + "'");
    }
  }
}

}  // namespace detail

/// Channel-restricted ("mimetic") patch: same loop, loss restricted to the
/// spec's channel sets.
inline PatchResult craft_forced_patch(const Model& model, std::span<const Image> stream, const Placement& placement,
                                      const FeatureTargetSpec& spec, const CraftConfig& cfg,
                                      const CraftHooks& hooks = {}) {
  detail::require_explicit_channels(spec);
  return craft_carpet_patch(model, stream, placement, spec, cfg, hooks);
}

inline NoiseResult craft_forced_noise(const Model& model, std::span<const Image> stream, const FeatureTargetSpec& spec,
                                      const NoiseCraftConfig& ncfg, const CraftHooks& hooks = {}) {
  detail::require_explicit_channels(spec);
  return craft_feature_noise_tmifgsm(model, stream, spec, ncfg, hooks);
}

}  // namespace carpet

#endif  // CARPET_ATTACK_FORGE_HPP
