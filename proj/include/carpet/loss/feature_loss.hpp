#ifndef CARPET_LOSS_FEATURE_LOSS_HPP
#define CARPET_LOSS_FEATURE_LOSS_HPP

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "carpet/core/image.hpp"
#include "carpet/loss/task_loss.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

/// Either every channel of a layer or an explicit index set.
struct ChannelSet {
  bool all = true;
  std::vector<std::size_t> indices;

  static ChannelSet All() { return {}; }
  static ChannelSet Of(std::vector<std::size_t> idx) { return {false, std::move(idx)}; }

  std::vector<std::size_t> resolve(std::size_t channels) const {
    if (all) {
      std::vector<std::size_t> v(channels);
      for (std::size_t i = 0; i < channels; ++i) v[i] = i;
      return v;
    }
    return indices;
  }
};

struct LayerTarget {
  LayerId layer;
  ChannelSet channels = ChannelSet::All();
  double weight = 1.0;
};

/// Which layers and channels the disruption objective attacks.
struct FeatureTargetSpec {
  std::vector<LayerTarget> targets;
  /// Sum squared per-channel norms instead of plain Euclidean norms.
  bool squared = false;

  static FeatureTargetSpec single(LayerId layer, ChannelSet channels = ChannelSet::All()) {
    return {{LayerTarget{std::move(layer), std::move(channels), 1.0}}, false};
  }

  std::vector<LayerId> layers() const {
    std::vector<LayerId> v;
    for (const auto& t : targets) v.push_back(t.layer);
    return v;
  }

  /// Checks the spec against a model for images of the given shape.
  void validate(const Model& model, Shape2 image) const {
    if (targets.empty()) throw ValidationError("FeatureTargetSpec: needs at least one layer");
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto& t = targets[i];
      model.require_layer(t.layer);
      for (std::size_t j = 0; j < i; ++j) {
        if (targets[j].layer == t.layer) throw ValidationError("FeatureTargetSpec: layer '" + t.layer.name + "' repeated");
      }
      if (!(t.weight >= 0.0) || !std::isfinite(t.weight)) {
        throw ValidationError("FeatureTargetSpec: weight of layer '" + t.layer.name + "' must be >= 0");
      }
      const std::size_t C = model.layer_shape(t.layer, image).channels;
      if (!t.channels.all) {
        if (t.channels.indices.empty()) {
          throw ValidationError("FeatureTargetSpec: empty channel set for layer '" + t.layer.name + "'");
        }
        for (std::size_t k : t.channels.indices) {
          if (k >= C) {
            throw ValidationError("FeatureTargetSpec: channel " + std::to_string(k) + " out of range for layer '" +
                                  t.layer.name + "' with " + std::to_string(C) + " channels");
          }
        }
      }
    }
  }
};

/// Per-layer feature masks keyed by layer name.
using FeatureMaskSet = std::map<std::string, FeatureMask>;

/// Masks for every target layer: derived from the patch placement, or all
/// ones when there is no patch (noise attacks).
inline FeatureMaskSet make_feature_masks(const Model& model, const FeatureTargetSpec& spec, Shape2 image,
                                         const std::optional<Placement>& placement) {
  FeatureMaskSet masks;
  std::optional<PixelMask> pm;
  if (placement) pm = make_pixel_mask(image, *placement);
  for (const auto& t : spec.targets) {
    const LayerShape ls = model.layer_shape(t.layer, image);
    masks[t.layer.name] = pm ? derive_feature_mask(*pm, ls.spatial(), t.layer.name)
                             : all_ones_feature_mask(ls.spatial(), t.layer.name);
  }
  return masks;
}

/// Sum over target layers l and channels k of w_l * ||(adv_lk - clean_lk) * m_l||_2.
/// Writes d/d(adv) into `seeds` when given (zero subgradient where the norm is zero).
inline double feature_distance(const FeatureMapSet& clean, const FeatureMapSet& adv, const FeatureTargetSpec& spec,
                               const FeatureMaskSet& masks, FeatureMapSet* seeds = nullptr) {
  double loss = 0.0;
  for (const auto& t : spec.targets) {
    const auto ci = clean.find(t.layer.name);
    const auto ai = adv.find(t.layer.name);
    const auto mi = masks.find(t.layer.name);
    if (ci == clean.end() || ai == adv.end()) throw ValidationError("feature_loss: missing features for '" + t.layer.name + "'");
    if (mi == masks.end()) throw ValidationError("feature_loss: missing mask for '" + t.layer.name + "'");
    const Tensor3& c = ci->second;
    const Tensor3& a = ai->second;
    const FeatureMask& m = mi->second;
    require_same_shape(c, a, "feature_loss");
    if (m.height != c.height() || m.width != c.width()) {
      throw ShapeError("feature_loss: mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                       " does not match layer '" + t.layer.name + "' " + c.shape_string());
    }
    Tensor3* g = nullptr;
    if (seeds) {
      g = &(*seeds)[t.layer.name];
      if (!g->same_shape(c)) *g = Tensor3(c.channels(), c.height(), c.width());
    }
    const std::size_t P = c.plane();
    for (std::size_t k : t.channels.resolve(c.channels())) {
      if (k >= c.channels()) throw ValidationError("feature_loss: channel index out of range");
      const auto cc = c.channel(k);
      const auto ac = a.channel(k);
      double sq = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        if (m.data[p]) sq += (ac[p] - cc[p]) * (ac[p] - cc[p]);
      }
      const double norm = std::sqrt(sq);
      loss += t.weight * (spec.squared ? sq : norm);
      if (g) {
        auto gc = g->channel(k);
        const double scale = spec.squared ? 2.0 * t.weight : (norm > 0.0 ? t.weight / norm : 0.0);
        for (std::size_t p = 0; p < P; ++p) {
          if (m.data[p]) gc[p] += scale * (ac[p] - cc[p]);
        }
      }
    }
  }
  return loss;
}

/// Differentiable feature-disruption objective against fixed clean features.
inline Objective feature_objective(std::shared_ptr<const FeatureMapSet> clean, FeatureTargetSpec spec,
                                   FeatureMaskSet masks) {
  Objective obj;
  obj.layers = spec.layers();
  obj.evaluate = [clean = std::move(clean), spec = std::move(spec), masks = std::move(masks)](
                     const ObjectiveInputs& in, ObjectiveSeeds& seeds) {
    return feature_distance(*clean, in.features, spec, masks, &seeds.features);
  };
  return obj;
}

/// Masked feature disruption between x and x_adv. Clean features are
/// computed here, outside any gradient path.
inline double feature_loss(const Model& model, const Image& x, const Image& x_adv, const FeatureTargetSpec& spec,
                           const FeatureMaskSet& masks) {
  if (x.shape() != x_adv.shape()) throw ShapeError("feature_loss: x and x_adv differ in shape");
  spec.validate(model, x.shape());
  const auto layers = spec.layers();
  return feature_distance(model.extract_features(x, layers), model.extract_features(x_adv, layers), spec, masks);
}

enum class TaskLossKind { cross_entropy, detector_objective, none };

struct CombinedLossConfig {
  double eta = 1.0;
  TaskLossKind task_loss_kind = TaskLossKind::cross_entropy;

  void validate(const Model& model) const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ValidationError("CombinedLossConfig: eta must be >= 0");
    const TaskKind k = model.task_kind();
    if (task_loss_kind == TaskLossKind::cross_entropy && k != TaskKind::classification &&
        k != TaskKind::segmentation) {
      throw ValidationError("CombinedLossConfig: cross_entropy needs a classification or segmentation model");
    }
    if (task_loss_kind == TaskLossKind::detector_objective && k != TaskKind::detection) {
      throw ValidationError("CombinedLossConfig: detector_objective needs a detection model");
    }
  }
};

/// task_loss + eta * feature_loss.
inline double combined_loss(const Model& model, const Image& x, const TaskLabel& y, const Image& x_adv,
                            const FeatureTargetSpec& spec, const FeatureMaskSet& masks, const CombinedLossConfig& cfg) {
  cfg.validate(model);
  const double task = cfg.task_loss_kind == TaskLossKind::none ? 0.0 : task_loss(model, x_adv, y);
  if (cfg.eta == 0.0) return task;
  return task + cfg.eta * feature_loss(model, x, x_adv, spec, masks);
}

/// Differentiable version of combined_loss.
inline Objective combined_objective(const Model& model, std::shared_ptr<const FeatureMapSet> clean, TaskLabel y,
                                    FeatureTargetSpec spec, FeatureMaskSet masks, CombinedLossConfig cfg) {
  cfg.validate(model);
  Objective obj;
  obj.layers = spec.layers();
  obj.uses_head = cfg.task_loss_kind != TaskLossKind::none;
  obj.evaluate = [kind = model.task_kind(), clean = std::move(clean), y = std::move(y), spec = std::move(spec),
                  masks = std::move(masks), cfg](const ObjectiveInputs& in, ObjectiveSeeds& seeds) {
    double task = 0.0;
    if (cfg.task_loss_kind != TaskLossKind::none) task = detail::head_loss(kind, *in.head, y, &seeds.head);
    FeatureMapSet fg;
    const double feat = feature_distance(*clean, in.features, spec, masks, &fg);
    for (auto& [name, g] : fg) {
      Tensor3& dst = seeds.features[name];
      for (std::size_t i = 0; i < g.size(); ++i) dst.values()[i] += cfg.eta * g.values()[i];
    }
    return task + cfg.eta * feat;
  };
  return obj;
}

}  // namespace carpet

#endif  // CARPET_LOSS_FEATURE_LOSS_HPP
