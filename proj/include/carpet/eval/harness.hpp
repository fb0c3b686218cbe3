#ifndef CARPET_EVAL_HARNESS_HPP
#define CARPET_EVAL_HARNESS_HPP

#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/core/box.hpp"
#include "carpet/core/image.hpp"
#include "carpet/eval/detection.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

/// A patch at a placement, an additive noise, or nothing.
struct Perturbation {
  std::variant<std::monostate, Patch, Noise> value;
  std::optional<Placement> placement;

  static Perturbation none() { return {}; }
  static Perturbation of(Patch p, Placement at) { return {std::move(p), at}; }
  static Perturbation of(Noise n) { return {std::move(n), std::nullopt}; }

  bool is_patch() const noexcept { return std::holds_alternative<Patch>(value); }

  Image apply(const Image& x) const {
    if (const auto* p = std::get_if<Patch>(&value)) {
      if (!placement) throw ValidationError("patch perturbation needs a placement");
      return apply_patch(x, *p, *placement);
    }
    if (const auto* n = std::get_if<Noise>(&value)) return apply_noise(x, *n);
    return x;
  }

  /// Pixel rectangle covered by a patch; none for noise or no attack.
  std::optional<Rect> region(Shape2 image) const {
    if (!is_patch() || !placement) return std::nullopt;
    return placement->resolve(image);
  }
};

struct EvalConfig {
  double conf_threshold = 0.0005;
  double nms_iou = 0.45;
  double match_iou = 0.5;
  ApInterpolation ap = ApInterpolation::all_points;

  void validate() const {
    for (double v : {conf_threshold, nms_iou, match_iou}) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("EvalConfig: thresholds must lie in [0,1]");
    }
  }
};

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

struct EvalReport {
  TaskKind task = TaskKind::none;
  std::map<std::string, double> clean, attacked;  // percent, 2 decimals
  std::size_t n_images = 0;
  std::string config_digest, attack_digest;

  bool operator==(const EvalReport&) const = default;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"task", to_string(r.task)},  {"clean", r.clean},
       {"attacked", r.attacked},     {"n_images", r.n_images},
       {"config_digest", r.config_digest}, {"attack_digest", r.attack_digest}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.task = parse_task_kind(j.at("task").get<std::string>());
  r.clean = j.at("clean").get<std::map<std::string, double>>();
  r.attacked = j.at("attacked").get<std::map<std::string, double>>();
  r.n_images = j.at("n_images").get<std::size_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.attack_digest = j.at("attack_digest").get<std::string>();
}

namespace detail {

inline void require_task(const Model& model, TaskKind kind, const char* what) {
  if (model.task_kind() != kind) {
    throw ValidationError(std::string(what) + ": model head is " + to_string(model.task_kind()) + ", expected " +
                          to_string(kind));
  }
}

inline void require_aligned(std::size_t images, std::size_t labels, const char* what) {
  if (images != labels) {
    throw ValidationError(std::string(what) + ": " + std::to_string(images) + " images but " + std::to_string(labels) +
                          " labels");
  }
  if (images == 0) throw ValidationError(std::string(what) + ": empty image set");
}

}  // namespace detail

/// Top-1 accuracy in percent, unrounded.
inline double top1_percent(const Model& model, std::span<const Image> images, std::span<const int> labels,
                           const Perturbation& attack) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    hits += model.task_forward(attack.apply(images[i])).argmax() == labels[i];
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(images.size());
}

inline EvalReport eval_classification(const Model& model, std::span<const Image> images, std::span<const int> labels,
                                      const Perturbation& attack) {
  detail::require_task(model, TaskKind::classification, "eval_classification");
  detail::require_aligned(images.size(), labels.size(), "eval_classification");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.num_classes()) {
      throw ValidationError("eval_classification: label " + std::to_string(y) + " out of range");
    }
  }
  EvalReport r;
  r.task = TaskKind::classification;
  r.n_images = images.size();
  r.clean["top1"] = round2(top1_percent(model, images, labels, Perturbation::none()));
  r.attacked["top1"] = round2(top1_percent(model, images, labels, attack));
  return r;
}

/// Keeps boxes with no positive-area overlap with `region`.
inline std::vector<Box> drop_overlapping(std::span<const Box> boxes, const Box& region) {
  std::vector<Box> out;
  for (const Box& b : boxes) {
    if (intersection_area(b, region) <= 0.0) out.push_back(b);
  }
  return out;
}

/// Image indices none of whose GT boxes intersect `region`.
inline std::vector<std::size_t> images_clear_of(std::span<const std::vector<Box>> gts, const Box& region) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (drop_overlapping(gts[i], region).size() == gts[i].size()) keep.push_back(i);
  }
  return keep;
}

/// Detector output after patch-region removal, confidence filter and NMS.
inline std::vector<Box> postprocess_detections(std::span<const Box> raw, const std::optional<Box>& region,
                                               const EvalConfig& cfg) {
  std::vector<Box> kept;
  for (const Box& b : raw) {
    if (region && intersection_area(b, *region) > 0.0) continue;
    if (b.confidence < cfg.conf_threshold) continue;
    kept.push_back(b);
  }
  return nms(kept, cfg.nms_iou);
}

/// mAP (%) of the detector over the given images under `attack`.
inline double detection_map_percent(const Model& model, std::span<const Image> images,
                                    std::span<const std::vector<Box>> gts, const Perturbation& attack,
                                    const std::optional<Box>& region, const EvalConfig& cfg) {
  std::vector<std::vector<Box>> preds;
  preds.reserve(images.size());
  for (const auto& x : images) {
    preds.push_back(postprocess_detections(model.task_forward(attack.apply(x)).detections, region, cfg));
  }
  const ApResult ap = average_precision(preds, gts, cfg.match_iou, cfg.ap);
  if (!ap.excluded.empty()) {
    std::clog << "carpet: " << ap.excluded.size() << " predicted class(es) without ground truth excluded from mAP\n";
  }
  return 100.0 * ap.mean;
}

/// Contextual detection mAP: images whose objects touch the patch are
/// skipped, and predictions touching the patch are dropped. The clean run
/// uses the same image subset and the same region filter.
inline EvalReport eval_detection_contextual(const Model& model, std::span<const Image> images,
                                            std::span<const std::vector<Box>> gt_boxes, const Perturbation& attack,
                                            const EvalConfig& cfg = {}) {
  detail::require_task(model, TaskKind::detection, "eval_detection_contextual");
  detail::require_aligned(images.size(), gt_boxes.size(), "eval_detection_contextual");
  cfg.validate();
  for (const auto& img : gt_boxes) {
    for (const Box& b : img) require_valid(b);
  }
  std::optional<Box> region;
  if (const auto r = attack.region(images.front().shape())) region = to_box(*r);

  std::vector<Image> kept_images;
  std::vector<std::vector<Box>> kept_gts;
  if (region) {
    for (std::size_t i : images_clear_of(gt_boxes, *region)) {
      kept_images.push_back(images[i]);
      kept_gts.push_back(gt_boxes[i]);
    }
    if (kept_images.empty()) {
      throw ValidationError("eval_detection_contextual: every image has an object under the patch; move the patch");
    }
  } else {
    kept_images.assign(images.begin(), images.end());
    kept_gts.assign(gt_boxes.begin(), gt_boxes.end());
  }
  EvalReport r;
  r.task = TaskKind::detection;
  r.n_images = kept_images.size();
  r.clean["mAP"] = round2(detection_map_percent(model, kept_images, kept_gts, Perturbation::none(), region, cfg));
  r.attacked["mAP"] = round2(detection_map_percent(model, kept_images, kept_gts, attack, region, cfg));
  return r;
}

/// Ground-truth label ignored by segmentation scoring.
inline constexpr int kIgnoreLabel = 255;

/// Pixel confusion counts for segmentation.
struct SegmentationCounts {
  std::size_t classes = 0;
  std::vector<std::size_t> tp, gt, pred;

  explicit SegmentationCounts(std::size_t n) : classes(n), tp(n, 0), gt(n, 0), pred(n, 0) {}

  void add(std::span<const int> prediction, std::span<const int> truth, std::size_t width,
           const std::optional<Rect>& excluded) {
    for (std::size_t p = 0; p < truth.size(); ++p) {
      if (excluded && excluded->contains(p / width, p % width)) continue;
      const int t = truth[p];
      if (t == kIgnoreLabel) continue;
      if (t < 0 || static_cast<std::size_t>(t) >= classes) {
        throw ValidationError("segmentation label " + std::to_string(t) + " out of range");
      }
      const int q = prediction[p];
      ++gt[t];
      if (q >= 0 && static_cast<std::size_t>(q) < classes) ++pred[q];
      if (q == t) ++tp[t];
    }
  }

  /// Mean IoU over classes present in GT or prediction.
  double miou() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t uni = gt[c] + pred[c] - tp[c];
      if (uni == 0) continue;
      s += static_cast<double>(tp[c]) / static_cast<double>(uni);
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  /// Mean per-class pixel accuracy over classes present in GT.
  double macc() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (gt[c] == 0) continue;
      s += static_cast<double>(tp[c]) / static_cast<double>(gt[c]);
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  std::size_t absent_classes() const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes; ++c) n += gt[c] + pred[c] == 0;
    return n;
  }
};

inline SegmentationCounts segmentation_counts(const Model& model, std::span<const Image> images,
                                              std::span<const std::vector<int>> masks, const Perturbation& attack,
                                              const std::optional<Rect>& excluded) {
  SegmentationCounts counts(model.num_classes());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const TaskOutput out = model.task_forward(attack.apply(images[i]));
    if (masks[i].size() != out.class_map.size()) {
      throw ValidationError("eval_segmentation: mask " + std::to_string(i) + " does not match the image size");
    }
    counts.add(out.class_map, masks[i], out.width, excluded);
  }
  return counts;
}

/// mIoU and mAcc over pixels outside the patch rectangle. The clean run
/// excludes the same rectangle.
inline EvalReport eval_segmentation(const Model& model, std::span<const Image> images,
                                    std::span<const std::vector<int>> gt_masks, const Perturbation& attack) {
  detail::require_task(model, TaskKind::segmentation, "eval_segmentation");
  detail::require_aligned(images.size(), gt_masks.size(), "eval_segmentation");
  const auto excluded = attack.region(images.front().shape());
  const auto clean = segmentation_counts(model, images, gt_masks, Perturbation::none(), excluded);
  const auto adv = segmentation_counts(model, images, gt_masks, attack, excluded);
  if (clean.absent_classes() || adv.absent_classes()) {
    std::clog << "carpet: classes absent from both prediction and ground truth excluded from means\n";
  }
  EvalReport r;
  r.task = TaskKind::segmentation;
  r.n_images = images.size();
  r.clean = {{"mIoU", round2(100.0 * clean.miou())}, {"mAcc", round2(100.0 * clean.macc())}};
  r.attacked = {{"mIoU", round2(100.0 * adv.miou())}, {"mAcc", round2(100.0 * adv.macc())}};
  return r;
}

}  // namespace carpet

#endif  // CARPET_EVAL_HARNESS_HPP
