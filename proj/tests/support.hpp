#ifndef CARPET_TESTS_SUPPORT_HPP
#define CARPET_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "carpet/core/image.hpp"
#include "carpet/model/toy_data.hpp"
#include "carpet/model/toy_model.hpp"
#include "carpet/model/training.hpp"

namespace carpet::testing {

inline Tensor3 random_tensor(std::mt19937_64& rng, std::size_t c, std::size_t h, std::size_t w, double lo = 0.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor3 t(c, h, w);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline Image random_image(std::mt19937_64& rng, std::size_t h = 32, std::size_t w = 32, std::string id = {}) {
  return Image(random_tensor(rng, 3, h, w), std::move(id));
}

/// Untrained toy network with the default architecture.
inline std::shared_ptr<const toy::ToyNetwork> random_network(std::uint64_t seed = 3) {
  toy::ToyConfig cfg;
  cfg.seed = seed;
  return std::make_shared<const toy::ToyNetwork>(cfg);
}

inline ModelHandle random_model(TaskKind task = TaskKind::classification, std::uint64_t seed = 3) {
  return ToyModel::make(random_network(seed), task);
}

/// ReLU on/off states and max-pool winners of a full backbone pass. Two
/// inputs with equal patterns lie in the same linear region of the network.
inline std::vector<std::size_t> activation_pattern(const toy::ToyNetwork& net, const Image& x) {
  toy::ToyNetwork::Tape tape;
  net.forward_backbone(nn::Batch::from_tensor(x.tensor()), tape);
  std::vector<std::size_t> p;
  for (const auto& bt : tape.blocks) {
    for (double v : bt.relu_out.data) p.push_back(v > 0.0);
    p.insert(p.end(), bt.argmax.begin(), bt.argmax.end());
  }
  return p;
}

struct FdStats {
  double max_rel = 0.0;   // worst single coordinate
  double norm_rel = 0.0;  // ||fd - an|| / max(||fd||, ||an||) over the checked coordinates
  std::size_t checked = 0;
  std::size_t resampled = 0;  // coordinates whose +-h step crossed a kink
};

/// Central-difference check of `grad` (the analytic gradient of `loss_at`
/// at `at`) on `coords` uniformly drawn coordinates. A coordinate whose
/// +-h segment changes the activation pattern at any of 16 probe points is
/// redrawn: the difference quotient is meaningless across a kink. Reports
/// both the worst per-coordinate error |fd - an| / max(|fd|, |an|, 1e-8)
/// and the normwise error over all checked coordinates.
template <class LossAt>
FdStats finite_difference_check(const toy::ToyNetwork& net, const Image& at, const Tensor3& grad, LossAt loss_at,
                                std::mt19937_64& rng, std::size_t coords = 20, double h = 1e-3) {
  FdStats s;
  double diff2 = 0.0, fd2 = 0.0, an2 = 0.0;
  const Tensor3& base = at.tensor();
  const auto pattern = activation_pattern(net, at);
  std::uniform_int_distribution<std::size_t> pick(0, base.size() - 1);
  while (s.checked < coords) {
    if (s.resampled > 50 * coords) throw std::runtime_error("finite_difference_check: too many kinks");
    const std::size_t i = pick(rng);
    // a unit can switch and switch back inside the step, so probe the
    // whole segment and not only its ends
    bool kink = false;
    for (int q = -8; q <= 8 && !kink; ++q) {
      if (q == 0) continue;
      Tensor3 probe = base;
      probe.values()[i] += h * q / 8.0;
      kink = activation_pattern(net, Image(probe)) != pattern;
    }
    if (kink) {
      ++s.resampled;
      continue;
    }
    Tensor3 plus = base, minus = base;
    plus.values()[i] += h;
    minus.values()[i] -= h;
    const Image xp(plus), xm(minus);
    const double fd = (loss_at(xp) - loss_at(xm)) / (2 * h);
    const double an = grad.values()[i];
    s.max_rel = std::max(s.max_rel, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}));
    diff2 += (fd - an) * (fd - an);
    fd2 += fd * fd;
    an2 += an * an;
    ++s.checked;
  }
  s.norm_rel = std::sqrt(diff2) / std::max({std::sqrt(fd2), std::sqrt(an2), 1e-300});
  return s;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("carpet-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Small trained toy network, built once and kept under the temp dir so
/// separate test processes share it.
inline std::shared_ptr<const toy::ToyNetwork> trained_network() {
  const auto path = std::filesystem::temp_directory_path() / "carpet-test-trained-v3.ckpt";
  if (std::filesystem::exists(path)) return std::make_shared<const toy::ToyNetwork>(toy::load_checkpoint(path));
  toy::ToyNetwork net(toy::ToyConfig{});
  toy::ToyDataConfig dc;
  dc.seed = 21;
  const auto data = toy::make_toy_dataset(800, dc);
  toy::TrainConfig tc;
  tc.epochs = 6;
  toy::train_classifier(net, data, tc);
  tc.epochs = 4;
  toy::train_dense_heads(net, data, tc);
  const auto tmp = path.string() + ".tmp" + std::to_string(std::random_device{}());
  toy::save_checkpoint(net, tmp);
  std::filesystem::rename(tmp, path);
  return std::make_shared<const toy::ToyNetwork>(std::move(net));
}

inline ModelHandle trained_model(TaskKind task = TaskKind::classification) {
  return ToyModel::make(trained_network(), task);
}

}  // namespace carpet::testing

#endif  // CARPET_TESTS_SUPPORT_HPP
