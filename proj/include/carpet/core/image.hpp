#ifndef CARPET_CORE_IMAGE_HPP
#define CARPET_CORE_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "carpet/core/tensor.hpp"
#include "carpet/error.hpp"

namespace carpet {

struct Shape2 {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Shape2&) const = default;
};

namespace detail {

inline void require_unit_range(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x) || x < 0.0 || x > 1.0) {
      throw ValidationError(std::string(what) + ": pixel value outside [0,1] or non-finite");
    }
  }
}

}  // namespace detail

/// An RGB image with pixel values in [0,1], stored channel-major.
class Image {
 public:
  Image() = default;
  Image(Tensor3 data, std::string id = {}) : data_(std::move(data)), id_(std::move(id)) {
    if (data_.channels() != 3) throw ShapeError("Image: expected 3 channels, got " + data_.shape_string());
    if (data_.height() < 1 || data_.width() < 1) throw ShapeError("Image: empty spatial extent");
    detail::require_unit_range(data_.values(), "Image");
  }

  std::size_t height() const noexcept { return data_.height(); }
  std::size_t width() const noexcept { return data_.width(); }
  Shape2 shape() const noexcept { return {height(), width()}; }
  const Tensor3& tensor() const noexcept { return data_; }
  const std::string& id() const noexcept { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  double operator()(std::size_t c, std::size_t y, std::size_t x) const noexcept { return data_(c, y, x); }

  bool operator==(const Image& o) const { return data_ == o.data_; }

 private:
  Tensor3 data_;
  std::string id_;
};

/// A rectangular patch of pixels in [0,1]. Magnitude is unconstrained
/// beyond the pixel range; the spatial extent is the constraint.
class Patch {
 public:
  Patch() = default;
  Patch(Tensor3 data, std::string created_by = {}) : data_(std::move(data)), created_by_(std::move(created_by)) {
    if (data_.channels() != 3) throw ShapeError("Patch: expected 3 channels, got " + data_.shape_string());
    if (data_.height() < 1 || data_.width() < 1) throw ShapeError("Patch: empty spatial extent");
    detail::require_unit_range(data_.values(), "Patch");
  }

  std::size_t height() const noexcept { return data_.height(); }
  std::size_t width() const noexcept { return data_.width(); }
  const Tensor3& tensor() const noexcept { return data_; }
  const std::string& created_by() const noexcept { return created_by_; }
  void set_created_by(std::string s) { created_by_ = std::move(s); }

 private:
  Tensor3 data_;
  std::string created_by_;
};

/// Max-norm budget for additive noise.
struct NoiseBudget {
  double epsilon = 8.0 / 255.0;

  explicit NoiseBudget(double eps = 8.0 / 255.0) : epsilon(eps) {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw ValidationError("NoiseBudget: epsilon must be > 0");
  }
};

/// Full-image additive perturbation bounded by a max-norm budget.
class Noise {
 public:
  Noise() = default;
  Noise(Tensor3 data, NoiseBudget budget) : data_(std::move(data)), budget_(budget) {
    if (data_.channels() != 3) throw ShapeError("Noise: expected 3 channels, got " + data_.shape_string());
    if (!all_finite(data_.values())) throw ValidationError("Noise: non-finite value");
    if (max_abs(data_.values()) > budget_.epsilon) {
      throw ValidationError("Noise: max-norm exceeds epsilon");
    }
  }

  const Tensor3& tensor() const noexcept { return data_; }
  const NoiseBudget& budget() const noexcept { return budget_; }
  std::size_t height() const noexcept { return data_.height(); }
  std::size_t width() const noexcept { return data_.width(); }

 private:
  Tensor3 data_;
  NoiseBudget budget_;
};

/// Resolved placement rectangle: rows [row, row+height), cols [col, col+width).
struct Rect {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t row_end() const noexcept { return row + height; }
  std::size_t col_end() const noexcept { return col + width; }
  bool contains(std::size_t y, std::size_t x) const noexcept {
    return y >= row && y < row_end() && x >= col && x < col_end();
  }
  bool operator==(const Rect&) const = default;
};

enum class PlacementMode { top_left_offset, centered };

/// Where a patch sits in an image. `centered` ignores the offsets and puts
/// the rectangle at ((H-h)/2, (W-w)/2), rounded down.
class Placement {
 public:
  Placement(PlacementMode mode, std::size_t patch_h, std::size_t patch_w, long offset_row = 0,
            long offset_col = 0)
      : mode_(mode), offset_row_(offset_row), offset_col_(offset_col), patch_h_(patch_h), patch_w_(patch_w) {
    if (patch_h == 0 || patch_w == 0) throw PlacementError("area", "Placement: patch has zero area");
  }

  static Placement top_left(std::size_t row, std::size_t col, std::size_t h, std::size_t w) {
    return {PlacementMode::top_left_offset, h, w, static_cast<long>(row), static_cast<long>(col)};
  }
  static Placement centered(std::size_t h, std::size_t w) { return {PlacementMode::centered, h, w}; }

  PlacementMode mode() const noexcept { return mode_; }
  long offset_row() const noexcept { return offset_row_; }
  long offset_col() const noexcept { return offset_col_; }
  std::size_t patch_h() const noexcept { return patch_h_; }
  std::size_t patch_w() const noexcept { return patch_w_; }

  /// Rectangle inside an image of the given shape. Throws PlacementError
  /// naming the first overflowing edge.
  Rect resolve(Shape2 image) const {
    long row = offset_row_, col = offset_col_;
    if (mode_ == PlacementMode::centered) {
      if (patch_h_ > image.height) throw PlacementError("bottom", overflow_msg("bottom", image));
      if (patch_w_ > image.width) throw PlacementError("right", overflow_msg("right", image));
      row = static_cast<long>((image.height - patch_h_) / 2);
      col = static_cast<long>((image.width - patch_w_) / 2);
    }
    if (row < 0) throw PlacementError("top", overflow_msg("top", image));
    if (col < 0) throw PlacementError("left", overflow_msg("left", image));
    if (static_cast<std::size_t>(row) + patch_h_ > image.height) {
      throw PlacementError("bottom", overflow_msg("bottom", image));
    }
    if (static_cast<std::size_t>(col) + patch_w_ > image.width) {
      throw PlacementError("right", overflow_msg("right", image));
    }
    return {static_cast<std::size_t>(row), static_cast<std::size_t>(col), patch_h_, patch_w_};
  }

  bool operator==(const Placement&) const = default;

 private:
  std::string overflow_msg(const std::string& edge, Shape2 image) const {
    return "placement " + std::to_string(patch_h_) + "x" + std::to_string(patch_w_) + " at (" +
           std::to_string(offset_row_) + "," + std::to_string(offset_col_) + ") overflows the " + edge +
           " edge of a " + std::to_string(image.height) + "x" + std::to_string(image.width) + " image";
  }

  PlacementMode mode_;
  long offset_row_;
  long offset_col_;
  std::size_t patch_h_;
  std::size_t patch_w_;
};

/// Single-channel binary mask, row-major.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill) : height(h), width(w), data(h * w, fill) {}

  std::uint8_t operator()(std::size_t y, std::size_t x) const noexcept { return data[y * width + x]; }
  std::uint8_t& operator()(std::size_t y, std::size_t x) noexcept { return data[y * width + x]; }
  std::size_t count_ones() const noexcept {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
  }
  bool operator==(const BinaryMask&) const = default;
};

/// Image-space mask: 1 on the patch rectangle, 0 elsewhere.
struct PixelMask : BinaryMask {
  using BinaryMask::BinaryMask;
};

/// Feature-space mask for one layer: 0 on cells touched by the patch, 1 elsewhere.
struct FeatureMask : BinaryMask {
  using BinaryMask::BinaryMask;
  std::string layer;
};

inline PixelMask make_pixel_mask(Shape2 image, const Placement& placement) {
  const Rect r = placement.resolve(image);
  PixelMask m(image.height, image.width, 0);
  for (std::size_t y = r.row; y < r.row_end(); ++y) {
    for (std::size_t x = r.col; x < r.col_end(); ++x) m(y, x) = 1;
  }
  return m;
}

/// x * (1 - m) + delta * m with m the placement rectangle.
inline Image apply_patch(const Image& x, const Patch& delta, const Placement& placement) {
  if (placement.patch_h() != delta.height() || placement.patch_w() != delta.width()) {
    throw ShapeError("apply_patch: placement is " + std::to_string(placement.patch_h()) + "x" +
                     std::to_string(placement.patch_w()) + " but patch is " + std::to_string(delta.height()) +
                     "x" + std::to_string(delta.width()));
  }
  const Rect r = placement.resolve(x.shape());
  Tensor3 out = x.tensor();
  const Tensor3& p = delta.tensor();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < r.height; ++y) {
      for (std::size_t xx = 0; xx < r.width; ++xx) out(c, r.row + y, r.col + xx) = p(c, y, xx);
    }
  }
  return Image(std::move(out), x.id());
}

/// Elementwise min(max(v, 0), 1). NaN input is rejected.
inline std::vector<double> clip_unit(std::span<const double> data) {
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (std::isnan(data[i])) throw ValidationError("clip_unit: NaN at index " + std::to_string(i));
    out[i] = std::clamp(data[i], 0.0, 1.0);
  }
  return out;
}

inline void clip_unit_inplace(std::span<double> data) {
  for (double& v : data) {
    if (std::isnan(v)) throw ValidationError("clip_unit: NaN value");
    v = std::clamp(v, 0.0, 1.0);
  }
}

/// clip(x + delta, 0, 1).
inline Image apply_noise(const Image& x, const Noise& delta) {
  if (x.height() != delta.height() || x.width() != delta.width()) {
    throw ShapeError("apply_noise: image " + x.tensor().shape_string() + " vs noise " +
                     delta.tensor().shape_string());
  }
  Tensor3 out = x.tensor();
  auto o = out.values();
  auto d = delta.tensor().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(o[i] + d[i], 0.0, 1.0);
  return Image(std::move(out), x.id());
}

/// Conservative downsampling of a pixel mask to a layer grid. Cell (i, j)
/// covers the real interval [i*H/h, (i+1)*H/h) x [j*W/w, (j+1)*W/w); it is
/// 0 when any covered pixel is set in the pixel mask and 1 otherwise.
inline FeatureMask derive_feature_mask(const PixelMask& pixel_mask, Shape2 layer, std::string layer_name = {}) {
  const std::size_t H = pixel_mask.height, W = pixel_mask.width;
  if (layer.height < 1 || layer.width < 1 || layer.height > H || layer.width > W) {
    throw ShapeError("derive_feature_mask: layer grid " + std::to_string(layer.height) + "x" +
                     std::to_string(layer.width) + " incompatible with mask " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  // Integer pixel p overlaps [a, b) iff floor(a) <= p < ceil(b); with a = i*H/h this is exact.
  auto span_of = [](std::size_t i, std::size_t full, std::size_t cells) {
    const std::size_t begin = (i * full) / cells;
    const std::size_t end = ((i + 1) * full + cells - 1) / cells;
    return std::pair{begin, end};
  };
  // Prefix sums make each block query O(1).
  std::vector<std::size_t> prefix((H + 1) * (W + 1), 0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      prefix[(y + 1) * (W + 1) + x + 1] = pixel_mask(y, x) + prefix[y * (W + 1) + x + 1] +
                                          prefix[(y + 1) * (W + 1) + x] - prefix[y * (W + 1) + x];
    }
  }
  FeatureMask fm(layer.height, layer.width, 1);
  fm.layer = std::move(layer_name);
  for (std::size_t i = 0; i < layer.height; ++i) {
    const auto [y0, y1] = span_of(i, H, layer.height);
    for (std::size_t j = 0; j < layer.width; ++j) {
      const auto [x0, x1] = span_of(j, W, layer.width);
      const std::size_t hits = prefix[y1 * (W + 1) + x1] - prefix[y0 * (W + 1) + x1] -
                               prefix[y1 * (W + 1) + x0] + prefix[y0 * (W + 1) + x0];
      fm(i, j) = hits > 0 ? 0 : 1;
    }
  }
  return fm;
}

inline FeatureMask all_ones_feature_mask(Shape2 layer, std::string layer_name = {}) {
  FeatureMask fm(layer.height, layer.width, 1);
  fm.layer = std::move(layer_name);
  return fm;
}

}  // namespace carpet

#endif  // CARPET_CORE_IMAGE_HPP
