#ifndef CARPET_FORENSICS_FORENSICS_HPP
#define CARPET_FORENSICS_FORENSICS_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "carpet/core/image.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

/// Maps a clean image to its attacked version.
using AttackApplier = std::function<Image(const Image&)>;

inline AttackApplier identity_attack() {
  return [](const Image& x) { return x; };
}
inline AttackApplier patch_attack(Patch patch, Placement placement) {
  return [patch = std::move(patch), placement](const Image& x) { return apply_patch(x, patch, placement); };
}
inline AttackApplier noise_attack(Noise noise) {
  return [noise = std::move(noise)](const Image& x) { return apply_noise(x, noise); };
}

/// Unmasked per-channel L2 distance between two feature maps.
inline std::vector<double> channel_distances(const Tensor3& clean, const Tensor3& attacked) {
  require_same_shape(clean, attacked, "channel_distances");
  std::vector<double> d(clean.channels());
  for (std::size_t k = 0; k < clean.channels(); ++k) {
    const auto a = clean.channel(k), b = attacked.channel(k);
    double sq = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) sq += (b[p] - a[p]) * (b[p] - a[p]);
    d[k] = std::sqrt(sq);
  }
  return d;
}

/// Indices of the k largest values, descending; ties go to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  if (k > values.size()) {
    throw ValidationError("top-k: k = " + std::to_string(k) + " exceeds " + std::to_string(values.size()) + " channels");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(k);
  return idx;
}

namespace detail {

inline Tensor3 layer_features(const Model& model, const LayerId& layer, const Image& x) {
  const LayerId layers[] = {layer};
  return model.extract_features(x, layers).at(layer.name);
}

inline void require_images(std::span<const Image> images, const char* what) {
  if (images.empty()) throw ValidationError(std::string(what) + ": empty image set");
}

}  // namespace detail

/// The k channels of `layer` most changed by the attack.
inline std::vector<std::size_t> top_attacked_channels(const Model& model, const LayerId& layer, const Image& x,
                                                      const Image& x_adv, std::size_t k) {
  model.require_layer(layer);
  const auto d = channel_distances(detail::layer_features(model, layer, x), detail::layer_features(model, layer, x_adv));
  return top_k_indices(d, k);
}

/// How often each channel lands in the per-image top-k.
struct FrequencyBins {
  std::vector<double> frequency;  // per channel, in [0,1]
  std::size_t k = 50;
  double threshold = 0.5;
  std::size_t n_images = 0;
  std::size_t frequent = 0;      // p >= threshold
  std::size_t occasional = 0;    // 0 < p < threshold
  std::size_t not_selected = 0;  // p == 0
};

inline FrequencyBins bin_frequencies(std::vector<double> frequency, std::size_t k, double threshold, std::size_t n) {
  FrequencyBins b;
  b.frequency = std::move(frequency);
  b.k = k;
  b.threshold = threshold;
  b.n_images = n;
  for (double p : b.frequency) {
    if (p >= threshold) {
      ++b.frequent;
    } else if (p > 0.0) {
      ++b.occasional;
    } else {
      ++b.not_selected;
    }
  }
  return b;
}

inline FrequencyBins frequency_bins(const Model& model, const LayerId& layer, std::span<const Image> images,
                                    const AttackApplier& attack, std::size_t k = 50, double threshold = 0.5) {
  detail::require_images(images, "frequency_bins");
  model.require_layer(layer);
  std::vector<std::size_t> counts;
  for (const auto& x : images) {
    const auto d =
        channel_distances(detail::layer_features(model, layer, x), detail::layer_features(model, layer, attack(x)));
    if (counts.empty()) counts.assign(d.size(), 0);
    for (std::size_t c : top_k_indices(d, k)) ++counts[c];
  }
  std::vector<double> freq(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    freq[c] = static_cast<double>(counts[c]) / static_cast<double>(images.size());
  }
  return bin_frequencies(std::move(freq), k, threshold, images.size());
}

/// Mean per-channel clean-vs-attacked L2 distance over an image set.
struct ChannelDistanceProfile {
  std::vector<double> mean_distance;
  std::size_t sample_count = 0;

  /// (channel, value) pairs by descending value, ties by channel index.
  std::vector<std::pair<std::size_t, double>> sorted() const {
    std::vector<std::pair<std::size_t, double>> out;
    for (std::size_t c : top_k_indices(mean_distance, mean_distance.size())) out.emplace_back(c, mean_distance[c]);
    return out;
  }

  std::vector<bool> highlight(std::span<const std::size_t> channels) const {
    std::vector<bool> h(mean_distance.size(), false);
    for (std::size_t c : channels) {
      if (c >= h.size()) throw ValidationError("highlight: channel out of range");
      h[c] = true;
    }
    return h;
  }

  /// Mean of the profile over a channel subset.
  double mean_over(std::span<const std::size_t> channels) const {
    if (channels.empty()) throw ValidationError("mean_over: empty channel set");
    double s = 0.0;
    for (std::size_t c : channels) s += mean_distance.at(c);
    return s / static_cast<double>(channels.size());
  }
};

inline ChannelDistanceProfile channel_distance_profile(const Model& model, const LayerId& layer,
                                                       std::span<const Image> images, const AttackApplier& attack) {
  detail::require_images(images, "channel_distance_profile");
  model.require_layer(layer);
  ChannelDistanceProfile p;
  for (const auto& x : images) {
    const auto d =
        channel_distances(detail::layer_features(model, layer, x), detail::layer_features(model, layer, attack(x)));
    if (p.mean_distance.empty()) p.mean_distance.assign(d.size(), 0.0);
    for (std::size_t c = 0; c < d.size(); ++c) p.mean_distance[c] += d[c];
  }
  for (double& v : p.mean_distance) v /= static_cast<double>(images.size());
  p.sample_count = images.size();
  return p;
}

/// Divisor guard of relative_profile.
inline constexpr double kRelativeEpsilon = 1e-12;

/// forced / (unforced + 1e-12), per channel.
inline std::vector<double> relative_profile(const ChannelDistanceProfile& forced, const ChannelDistanceProfile& unforced) {
  if (forced.mean_distance.size() != unforced.mean_distance.size()) {
    throw ValidationError("relative_profile: profiles differ in length");
  }
  std::vector<double> r(forced.mean_distance.size());
  for (std::size_t c = 0; c < r.size(); ++c) {
    r[c] = forced.mean_distance[c] / (unforced.mean_distance[c] + kRelativeEpsilon);
  }
  return r;
}

/// Per-cell mean over images of the channel-vector L2 distance.
struct ImpactMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major

  double operator()(std::size_t i, std::size_t j) const { return values[i * width + j]; }
};

inline ImpactMap spatial_impact_map(const Model& model, const LayerId& layer, std::span<const Image> images,
                                    const AttackApplier& attack) {
  detail::require_images(images, "spatial_impact_map");
  model.require_layer(layer);
  ImpactMap map;
  for (const auto& x : images) {
    const Tensor3 a = detail::layer_features(model, layer, x);
    const Tensor3 b = detail::layer_features(model, layer, attack(x));
    require_same_shape(a, b, "spatial_impact_map");
    if (map.values.empty()) {
      map.height = a.height();
      map.width = a.width();
      map.values.assign(a.plane(), 0.0);
    }
    for (std::size_t p = 0; p < a.plane(); ++p) {
      double sq = 0.0;
      for (std::size_t k = 0; k < a.channels(); ++k) {
        const double diff = b.channel(k)[p] - a.channel(k)[p];
        sq += diff * diff;
      }
      map.values[p] += std::sqrt(sq);
    }
  }
  for (double& v : map.values) v /= static_cast<double>(images.size());
  return map;
}

/// Elementwise numerator / (denominator + 1e-12), e.g. hidden over whitebox.
inline ImpactMap ratio_map(const ImpactMap& numerator, const ImpactMap& denominator) {
  if (numerator.height != denominator.height || numerator.width != denominator.width) {
    throw ValidationError("ratio_map: maps differ in shape");
  }
  ImpactMap r = numerator;
  for (std::size_t p = 0; p < r.values.size(); ++p) r.values[p] /= denominator.values[p] + kRelativeEpsilon;
  return r;
}

/// |A ∩ B| / |A ∪ B|; 1 for two empty sets.
inline double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  const std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (std::size_t v : sa) inter += sb.count(v);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct DriftPoint {
  ChannelDistanceProfile profile;
  std::vector<std::size_t> top_set;
  double overlap = 0.0;
};

/// Distance profile of a fixed patch on each checkpoint, plus the Jaccard
/// overlap between each checkpoint's top-|baseline| channels and the baseline set.
inline std::vector<DriftPoint> checkpoint_drift(std::span<const ModelHandle> handles, const LayerId& layer,
                                                std::span<const Image> images, const Patch& patch,
                                                const Placement& placement,
                                                std::span<const std::size_t> baseline_top_set) {
  if (handles.empty()) throw ValidationError("checkpoint_drift: no checkpoints");
  detail::require_images(images, "checkpoint_drift");
  const Shape2 shape = images.front().shape();
  std::size_t channels = 0;
  for (std::size_t i = 0; i < handles.size(); ++i) {
    try {
      handles[i]->require_layer(layer);
    } catch (const ValidationError& e) {
      throw ValidationError("checkpoint_drift: checkpoint " + std::to_string(i) + ": " + e.what());
    }
    const std::size_t c = handles[i]->layer_shape(layer, shape).channels;
    if (i == 0) channels = c;
    if (c != channels) {
      throw ValidationError("checkpoint_drift: checkpoint " + std::to_string(i) + " has " + std::to_string(c) +
                            " channels at '" + layer.name + "', expected " + std::to_string(channels));
    }
  }
  for (std::size_t c : baseline_top_set) {
    if (c >= channels) throw ValidationError("checkpoint_drift: baseline channel out of range");
  }
  const auto attack = patch_attack(patch, placement);
  std::vector<DriftPoint> out;
  for (const auto& h : handles) {
    DriftPoint pt;
    pt.profile = channel_distance_profile(*h, layer, images, attack);
    pt.top_set = top_k_indices(pt.profile.mean_distance, baseline_top_set.size());
    pt.overlap = jaccard(pt.top_set, baseline_top_set);
    out.push_back(std::move(pt));
  }
  return out;
}

}  // namespace carpet

#endif  // CARPET_FORENSICS_FORENSICS_HPP
