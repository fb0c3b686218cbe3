#ifndef CARPET_CORE_BOX_HPP
#define CARPET_CORE_BOX_HPP

#include <algorithm>
#include <cmath>
#include <string>

#include "carpet/core/image.hpp"
#include "carpet/error.hpp"

namespace carpet {

/// Axis-aligned box in pixel coordinates. `confidence` is only meaningful
/// for predictions.
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  int class_id = 0;
  double confidence = 1.0;

  double area() const noexcept { return std::max(0.0, xmax - xmin) * std::max(0.0, ymax - ymin); }
  bool valid() const noexcept {
    return std::isfinite(xmin) && std::isfinite(ymin) && std::isfinite(xmax) && std::isfinite(ymax) &&
           xmin < xmax && ymin < ymax;
  }
  bool operator==(const Box&) const = default;
};

inline void require_valid(const Box& b) {
  if (!b.valid()) throw ValidationError("Box: requires xmin < xmax and ymin < ymax");
}

inline double intersection_area(const Box& a, const Box& b) noexcept {
  const double w = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double h = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// The pixel rectangle as a box: [col, col_end) x [row, row_end).
inline Box to_box(const Rect& r) {
  return {static_cast<double>(r.col), static_cast<double>(r.row), static_cast<double>(r.col_end()),
          static_cast<double>(r.row_end()), -1, 1.0};
}

}  // namespace carpet

#endif  // CARPET_CORE_BOX_HPP
