#ifndef CARPET_MODEL_TOY_DATA_HPP
#define CARPET_MODEL_TOY_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "carpet/core/box.hpp"
#include "carpet/core/image.hpp"

namespace carpet::toy {

/// One synthetic scene: a single shape on a textured background.
struct ToySample {
  Image image;
  int label = 0;                // shape class
  std::vector<int> mask;        // per-pixel 0 background / 1 + shape class, row-major
  Box box;                      // tight box around the object, class = label
};

enum class DomainShift {
  none,
  /// Channel rotation (R->G->B->R) plus a diagonal stripe texture on the
  /// background. Used as the proxy distribution.
  color_texture,
};

struct ToyDataConfig {
  std::size_t size = 32;
  std::uint64_t seed = 0;
  DomainShift shift = DomainShift::none;
  /// When set, objects never intersect this region.
  std::optional<Rect> keep_clear;
  double noise_sigma = 0.04;
};

inline constexpr int kToyClasses = 10;

inline const std::array<const char*, kToyClasses>& toy_class_names() {
  static const std::array<const char*, kToyClasses> names{"disk",    "square", "triangle", "plus",  "ring",
                                                          "bars",    "diamond", "cross",   "frame", "wedge"};
  return names;
}

/// Whether normalized shape coordinates (u, v) in [-1,1]^2 lie inside shape `cls`.
inline bool toy_shape_contains(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return v <= 0.9 && v >= 2.0 * au - 1.0;
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: {
      const double r = std::sqrt(u * u + v * v);
      return r <= 1.0 && r >= 0.55;
    }
    case 5: return au <= 1.0 && (std::abs(v - 0.6) <= 0.28 || std::abs(v + 0.6) <= 0.28);
    case 6: return au + av <= 1.0;
    case 7: return std::abs(au - av) <= 0.32 && au <= 1.0 && av <= 1.0;
    case 8: return std::max(au, av) <= 0.95 && std::max(au, av) >= 0.55;
    case 9: return v >= -0.9 && v <= 1.0 - 2.0 * au;
    default: return false;
  }
}

/// Deterministic synthetic scene generator.
class ToyDataGenerator {
 public:
  explicit ToyDataGenerator(ToyDataConfig cfg) : cfg_(cfg), rng_(cfg.seed) {}

  ToySample next() { return make(std::uniform_int_distribution<int>(0, kToyClasses - 1)(rng_)); }

  ToySample make(int label) {
    const std::size_t S = cfg_.size;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, cfg_.noise_sigma);

    const bool dark_bg = unit(rng_) < 0.5;
    std::array<double, 3> bg{}, fg{}, grad{};
    for (int c = 0; c < 3; ++c) {
      bg[c] = dark_bg ? 0.05 + 0.35 * unit(rng_) : 0.6 + 0.35 * unit(rng_);
      fg[c] = dark_bg ? 0.6 + 0.35 * unit(rng_) : 0.05 + 0.35 * unit(rng_);
      grad[c] = (unit(rng_) - 0.5) * 0.15;
    }

    const double half = 5.0 + 3.0 * unit(rng_);
    double cx = 0, cy = 0;
    for (int attempt = 0;; ++attempt) {
      cx = half + 1.0 + unit(rng_) * (static_cast<double>(S) - 2.0 * half - 2.0);
      cy = half + 1.0 + unit(rng_) * (static_cast<double>(S) - 2.0 * half - 2.0);
      if (!cfg_.keep_clear || attempt > 1000) break;
      const Rect& r = *cfg_.keep_clear;
      const bool overlaps = cx - half < static_cast<double>(r.col_end()) && cx + half > static_cast<double>(r.col) &&
                            cy - half < static_cast<double>(r.row_end()) && cy + half > static_cast<double>(r.row);
      if (!overlaps) break;
    }

    Tensor3 img(3, S, S);
    std::vector<int> mask(S * S, 0);
    double xmin = 1e9, ymin = 1e9, xmax = -1e9, ymax = -1e9;
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        const double u = (static_cast<double>(x) + 0.5 - cx) / half;
        const double v = (static_cast<double>(y) + 0.5 - cy) / half;
        const bool inside = toy_shape_contains(label, u, v);
        const double ramp = (static_cast<double>(x) + static_cast<double>(y)) / static_cast<double>(2 * S) - 0.5;
        double stripe = 0.0;
        if (cfg_.shift == DomainShift::color_texture && !inside) stripe = ((x + y) / 3) % 2 == 0 ? 0.12 : -0.12;
        for (int c = 0; c < 3; ++c) {
          const double base = inside ? fg[c] : bg[c] + grad[c] * ramp + stripe;
          img(static_cast<std::size_t>(c), y, x) = base + noise(rng_);
        }
        if (inside) {
          mask[y * S + x] = label + 1;
          xmin = std::min(xmin, static_cast<double>(x));
          ymin = std::min(ymin, static_cast<double>(y));
          xmax = std::max(xmax, static_cast<double>(x + 1));
          ymax = std::max(ymax, static_cast<double>(y + 1));
        }
      }
    }
    if (cfg_.shift == DomainShift::color_texture) {
      Tensor3 rotated(3, S, S);
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < S * S; ++p) rotated.channel((c + 1) % 3)[p] = img.channel(c)[p];
      }
      img = std::move(rotated);
    }
    for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
    ToySample s;
    s.image = Image(std::move(img), "toy-" + std::to_string(cfg_.seed) + "-" + std::to_string(counter_++));
    s.label = label;
    s.mask = std::move(mask);
    s.box = Box{xmin, ymin, xmax, ymax, label, 1.0};
    return s;
  }

 private:
  ToyDataConfig cfg_;
  std::mt19937_64 rng_;
  std::size_t counter_ = 0;
};

inline std::vector<ToySample> make_toy_dataset(std::size_t n, ToyDataConfig cfg) {
  ToyDataGenerator gen(cfg);
  std::vector<ToySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen.next());
  return out;
}

inline std::vector<Image> images_of(const std::vector<ToySample>& samples) {
  std::vector<Image> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

inline std::vector<int> labels_of(const std::vector<ToySample>& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

}  // namespace carpet::toy

#endif  // CARPET_MODEL_TOY_DATA_HPP
