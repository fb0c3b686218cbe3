#ifndef CARPET_MODEL_MODEL_HPP
#define CARPET_MODEL_MODEL_HPP

#include <array>
#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "carpet/core/box.hpp"
#include "carpet/core/image.hpp"
#include "carpet/core/tensor.hpp"
#include "carpet/error.hpp"

namespace carpet {

enum class TaskKind { classification, detection, segmentation, none };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::classification: return "classification";
    case TaskKind::detection: return "detection";
    case TaskKind::segmentation: return "segmentation";
    case TaskKind::none: return "none";
  }
  return "none";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "detection") return TaskKind::detection;
  if (s == "segmentation") return TaskKind::segmentation;
  if (s == "none") return TaskKind::none;
  throw ValidationError("unknown task kind '" + s + "'");
}

/// Names one activation site of a backbone.
struct LayerId {
  std::string name;

  LayerId() = default;
  LayerId(std::string n) : name(std::move(n)) {}  // NOLINT(google-explicit-constructor)
  LayerId(const char* n) : name(n) {}             // NOLINT(google-explicit-constructor)
  auto operator<=>(const LayerId&) const = default;
};

/// (channels, height, width) of one layer's activation.
struct LayerShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Shape2 spatial() const noexcept { return {height, width}; }
  bool operator==(const LayerShape&) const = default;
};

/// Feature maps keyed by layer name.
using FeatureMapSet = std::map<std::string, Tensor3>;

/// Output of a task head. `raw` is the differentiable head output:
/// classification (classes, 1, 1) logits; segmentation (classes, H, W)
/// logits; detection (5 + classes, h, w) grid predictions.
struct TaskOutput {
  TaskKind kind = TaskKind::none;
  Tensor3 raw;
  std::vector<double> scores;  // classification logits
  std::vector<Box> detections;  // all decoded grid boxes, unfiltered
  std::vector<int> class_map;  // segmentation argmax, row-major H x W
  std::size_t height = 0, width = 0;

  int argmax() const {
    if (scores.empty()) throw ValidationError("TaskOutput: no class scores");
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (scores[i] > scores[best]) best = i;
    }
    return static_cast<int>(best);
  }
};

/// What a differentiable objective sees after a forward pass.
struct ObjectiveInputs {
  const FeatureMapSet& features;
  const TaskOutput* head = nullptr;
};

/// dLoss/d(outputs), pre-sized to match the forward outputs and zeroed.
struct ObjectiveSeeds {
  FeatureMapSet features;
  Tensor3 head;
};

/// A scalar function of named-layer features and/or the task head output.
/// `evaluate` returns the loss and writes its gradient w.r.t. each output
/// into the seeds.
struct Objective {
  std::vector<LayerId> layers;
  bool uses_head = false;
  std::function<double(const ObjectiveInputs&, ObjectiveSeeds&)> evaluate;
};

struct LossGradient {
  double loss = 0.0;
  Tensor3 grad;  // dLoss/dx, shape (3, H, W), pixel space
};

/// Uniform view over a backbone and (optionally) one task head. All methods
/// are const and re-entrant: a handle may be shared across threads.
/// Compositing happens in [0,1] pixel space; any input normalization is the
/// adapter's business and happens inside these calls.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string backbone_id() const = 0;
  virtual TaskKind task_kind() const = 0;
  virtual std::vector<LayerId> layers() const = 0;
  virtual std::string preprocessing() const = 0;
  virtual bool trainable() const = 0;
  virtual std::size_t num_classes() const = 0;
  /// Content hash of the parameters.
  virtual std::string digest() const = 0;

  virtual LayerShape layer_shape(const LayerId& layer, Shape2 input) const = 0;
  virtual FeatureMapSet extract_features(const Image& x, std::span<const LayerId> layers) const = 0;
  virtual TaskOutput task_forward(const Image& x) const = 0;
  virtual LossGradient input_gradient(const Image& x, const Objective& objective) const = 0;

  /// Throws a ValidationError listing the available layers when `layer` is unknown.
  void require_layer(const LayerId& layer) const {
    const auto all = layers();
    for (const auto& l : all) {
      if (l == layer) return;
    }
    std::string msg = "unknown layer '" + layer.name + "'; available:";
    for (const auto& l : all) msg += " " + l.name;
    throw ValidationError(msg);
  }
};

using ModelHandle = std::shared_ptr<const Model>;

}  // namespace carpet

#endif  // CARPET_MODEL_MODEL_HPP
