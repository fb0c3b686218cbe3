#ifndef CARPET_EVAL_DETECTION_HPP
#define CARPET_EVAL_DETECTION_HPP

#include <algorithm>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "carpet/core/box.hpp"
#include "carpet/error.hpp"

namespace carpet {

inline double iou(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace detail {

/// Indices ordered by descending confidence, ties by ascending index.
inline std::vector<std::size_t> confidence_order(std::span<const Box> boxes) {
  std::vector<std::size_t> idx(boxes.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].confidence > boxes[b].confidence; });
  return idx;
}

}  // namespace detail

/// Greedy per-class NMS. A box is dropped when its IoU with an already kept
/// box of the same class exceeds `iou_threshold`. Output is in keep order.
inline std::vector<Box> nms(std::span<const Box> boxes, double iou_threshold) {
  std::vector<Box> kept;
  for (std::size_t i : detail::confidence_order(boxes)) {
    const Box& b = boxes[i];
    bool suppressed = false;
    for (const Box& k : kept) {
      if (k.class_id == b.class_id && iou(k, b) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

enum class ApInterpolation { all_points, eleven_point };

inline std::string to_string(ApInterpolation a) { return a == ApInterpolation::all_points ? "all_points" : "eleven_point"; }
inline ApInterpolation parse_ap_interpolation(const std::string& s) {
  if (s == "all_points") return ApInterpolation::all_points;
  if (s == "eleven_point") return ApInterpolation::eleven_point;
  throw ValidationError("unknown AP interpolation '" + s + "' (all_points, eleven_point)");
}

/// Area under a precision/recall curve given in detection order.
inline double pr_area(std::span<const double> recall, std::span<const double> precision, ApInterpolation mode) {
  if (mode == ApInterpolation::eleven_point) {
    double s = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] >= r - 1e-12) p = std::max(p, precision[i]);
      }
      s += p;
    }
    return s / 11.0;
  }
  // Precision envelope, then sum rectangles where recall moves.
  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

struct ApResult {
  std::map<int, double> per_class;  // in [0,1]
  double mean = 0.0;                // in [0,1]
  std::vector<int> excluded;        // classes with predictions but no GT
};

/// Per-class AP over an image set. preds[i] and gts[i] belong to image i.
/// Each prediction is matched to the same-class GT of highest IoU in its
/// image; it counts as a true positive when that IoU reaches `match_iou` and
/// the GT is still unmatched.
inline ApResult average_precision(std::span<const std::vector<Box>> preds, std::span<const std::vector<Box>> gts,
                                  double match_iou = 0.5, ApInterpolation mode = ApInterpolation::all_points) {
  if (preds.size() != gts.size()) throw ValidationError("average_precision: preds and gts differ in image count");
  std::map<int, std::size_t> gt_count;
  for (const auto& img : gts) {
    for (const Box& g : img) ++gt_count[g.class_id];
  }
  ApResult out;
  std::map<int, bool> pred_classes;
  for (const auto& img : preds) {
    for (const Box& p : img) pred_classes[p.class_id] = true;
  }
  for (const auto& [c, _] : pred_classes) {
    if (!gt_count.count(c)) out.excluded.push_back(c);
  }
  if (gt_count.empty()) throw ValidationError("average_precision: no ground-truth boxes");

  for (const auto& [cls, n_gt] : gt_count) {
    struct Det {
      double conf;
      std::size_t image, index;
    };
    std::vector<Det> dets;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      for (std::size_t j = 0; j < preds[i].size(); ++j) {
        if (preds[i][j].class_id == cls) dets.push_back({preds[i][j].confidence, i, j});
      }
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.conf > b.conf; });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);

    std::vector<double> recall, precision;
    std::size_t tp = 0, fp = 0;
    for (const Det& d : dets) {
      const Box& p = preds[d.image][d.index];
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gts[d.image].size(); ++g) {
        if (gts[d.image][g].class_id != cls) continue;
        const double o = iou(p, gts[d.image][g]);
        if (o > best) {
          best = o;
          best_g = g;
        }
      }
      if (best >= match_iou && !used[d.image][best_g]) {
        used[d.image][best_g] = true;
        ++tp;
      } else {
        ++fp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    out.per_class[cls] = pr_area(recall, precision, mode);
  }
  double s = 0.0;
  for (const auto& [_, ap] : out.per_class) s += ap;
  out.mean = s / static_cast<double>(out.per_class.size());
  return out;
}

}  // namespace carpet

#endif  // CARPET_EVAL_DETECTION_HPP
