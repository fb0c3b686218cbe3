#ifndef CARPET_LOSS_TASK_LOSS_HPP
#define CARPET_LOSS_TASK_LOSS_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "carpet/core/box.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

/// Ground truth for one image: class index, per-pixel class map, or boxes.
using TaskLabel = std::variant<int, std::vector<int>, std::vector<Box>>;

/// -log softmax(logits)[label]. Writes d/dlogits into `grad` when given.
inline double cross_entropy(std::span<const double> logits, int label, std::span<double> grad = {}) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ValidationError("cross_entropy: label " + std::to_string(label) + " out of range");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  if (!grad.empty()) {
    for (std::size_t k = 0; k < logits.size(); ++k) {
      grad[k] = std::exp(logits[k] - lse) - (static_cast<int>(k) == label ? 1.0 : 0.0);
    }
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

/// Mean per-pixel cross-entropy of (classes, H, W) logits against a class map.
inline double segmentation_cross_entropy(const Tensor3& logits, const std::vector<int>& labels, Tensor3* grad = nullptr) {
  const std::size_t P = logits.plane(), C = logits.channels();
  if (labels.size() != P) throw ShapeError("segmentation_cross_entropy: label map size mismatch");
  std::vector<double> col(C), g(C);
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t k = 0; k < C; ++k) col[k] = logits.channel(k)[p];
    total += cross_entropy(col, labels[p], grad ? std::span<double>(g) : std::span<double>{});
    if (grad) {
      for (std::size_t k = 0; k < C; ++k) grad->channel(k)[p] = g[k] / static_cast<double>(P);
    }
  }
  return total / static_cast<double>(P);
}

inline double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

/// Grid cell responsible for a box: the one containing its centre.
inline std::pair<std::size_t, std::size_t> responsible_cell(const Box& b, std::size_t grid_h, std::size_t grid_w,
                                                            Shape2 input) {
  const double cy = 0.5 * (b.ymin + b.ymax), cx = 0.5 * (b.xmin + b.xmax);
  const double sy = static_cast<double>(input.height) / static_cast<double>(grid_h);
  const double sx = static_cast<double>(input.width) / static_cast<double>(grid_w);
  const auto i = static_cast<std::size_t>(std::clamp(std::floor(cy / sy), 0.0, static_cast<double>(grid_h - 1)));
  const auto j = static_cast<std::size_t>(std::clamp(std::floor(cx / sx), 0.0, static_cast<double>(grid_w - 1)));
  return {i, j};
}

/// Detector objective on a (5 + classes, h, w) grid: objectness binary
/// cross-entropy summed over every cell (target 1 on cells responsible for
/// a ground-truth box, 0 elsewhere) plus class cross-entropy on the
/// responsible cells. Box regression is not part of it.
inline double detector_objective(const Tensor3& grid, const std::vector<Box>& gts, Shape2 input, Tensor3* grad = nullptr) {
  if (grid.channels() < 6) throw ShapeError("detector_objective: grid needs 5 + classes channels");
  const std::size_t h = grid.height(), w = grid.width(), nc = grid.channels() - 5;
  std::vector<int> target(h * w, -1);
  for (const auto& b : gts) {
    require_valid(b);
    if (b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= nc) {
      throw ValidationError("detector_objective: box class out of range");
    }
    const auto [i, j] = responsible_cell(b, h, w, input);
    target[i * w + j] = b.class_id;
  }
  double loss = 0.0;
  std::vector<double> logits(nc), g(nc);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double o = grid(0, i, j);
      const int t = target[i * w + j];
      loss += t >= 0 ? softplus(-o) : softplus(o);
      if (grad) (*grad)(0, i, j) = 1.0 / (1.0 + std::exp(-o)) - (t >= 0 ? 1.0 : 0.0);
      if (t >= 0) {
        for (std::size_t k = 0; k < nc; ++k) logits[k] = grid(5 + k, i, j);
        loss += cross_entropy(logits, t, grad ? std::span<double>(g) : std::span<double>{});
        if (grad) {
          for (std::size_t k = 0; k < nc; ++k) (*grad)(5 + k, i, j) = g[k];
        }
      }
    }
  }
  return loss;
}

namespace detail {

inline double head_loss(TaskKind kind, const TaskOutput& out, const TaskLabel& y, Tensor3* grad) {
  switch (kind) {
    case TaskKind::classification: {
      const int* label = std::get_if<int>(&y);
      if (!label) throw ValidationError("task_loss: classification model needs an integer label");
      return cross_entropy(out.raw.values(), *label, grad ? grad->values() : std::span<double>{});
    }
    case TaskKind::segmentation: {
      const auto* labels = std::get_if<std::vector<int>>(&y);
      if (!labels) throw ValidationError("task_loss: segmentation model needs a class map label");
      return segmentation_cross_entropy(out.raw, *labels, grad);
    }
    case TaskKind::detection: {
      const auto* boxes = std::get_if<std::vector<Box>>(&y);
      if (!boxes) throw ValidationError("task_loss: detection model needs box labels");
      return detector_objective(out.raw, *boxes, {out.height, out.width}, grad);
    }
    case TaskKind::none: break;
  }
  throw ValidationError("task_loss: model has no task head");
}

}  // namespace detail

/// Differentiable task loss on the model's head output.
inline Objective task_objective(const Model& model, TaskLabel y) {
  if (model.task_kind() == TaskKind::none) throw ValidationError("task_loss: model has no task head");
  Objective obj;
  obj.uses_head = true;
  obj.evaluate = [kind = model.task_kind(), y = std::move(y)](const ObjectiveInputs& in, ObjectiveSeeds& seeds) {
    return detail::head_loss(kind, *in.head, y, &seeds.head);
  };
  return obj;
}

/// Cross-entropy for classification and segmentation (mean over pixels),
/// detector objective for detection.
inline double task_loss(const Model& model, const Image& x_adv, const TaskLabel& y) {
  if (model.task_kind() == TaskKind::none) throw ValidationError("task_loss: model has no task head");
  return detail::head_loss(model.task_kind(), model.task_forward(x_adv), y, nullptr);
}

}  // namespace carpet

#endif  // CARPET_LOSS_TASK_LOSS_HPP
