#ifndef CARPET_CORE_TENSOR_HPP
#define CARPET_CORE_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "carpet/error.hpp"

namespace carpet {

/// Dense channel-major (C, H, W) array of doubles. Used for images,
/// feature maps, gradients and head outputs alike.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0)
      : c_(channels), h_(height), w_(width), data_(channels * height * width, fill) {}
  Tensor3(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> data)
      : c_(channels), h_(height), w_(width), data_(std::move(data)) {
    if (data_.size() != c_ * h_ * w_) {
      throw ShapeError("Tensor3: data size does not match shape");
    }
  }

  std::size_t channels() const noexcept { return c_; }
  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  std::size_t plane() const noexcept { return h_ * w_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t c, std::size_t y, std::size_t x) noexcept {
    return data_[(c * h_ + y) * w_ + x];
  }
  double operator()(std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[(c * h_ + y) * w_ + x];
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> channel(std::size_t c) noexcept { return {data_.data() + c * plane(), plane()}; }
  std::span<const double> channel(std::size_t c) const noexcept {
    return {data_.data() + c * plane(), plane()};
  }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& storage() noexcept { return data_; }

  bool same_shape(const Tensor3& o) const noexcept { return c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }

  std::string shape_string() const {
    std::ostringstream os;
    os << "(" << c_ << "," << h_ << "," << w_ << ")";
    return os.str();
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor3&) const = default;

 private:
  std::size_t c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor3& a, const Tensor3& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace carpet

#endif  // CARPET_CORE_TENSOR_HPP
