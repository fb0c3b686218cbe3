#ifndef CARPET_MODEL_TRAINING_HPP
#define CARPET_MODEL_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "carpet/loss/task_loss.hpp"
#include "carpet/model/toy_data.hpp"
#include "carpet/model/toy_model.hpp"
#include "carpet/model/toy_network.hpp"

namespace carpet::toy {

/// Adam over a fixed set of parameters.
class Adam {
 public:
  explicit Adam(std::vector<nn::Param*> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double grad_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k] * grad_scale;
        m_[i][k] = b1_ * m_[i][k] + (1 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1 - b2_) * g * g;
        p.value[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<nn::Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 6;
  std::size_t batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 7;
  /// Probability of pasting a random-noise square (side 4..12 px) at a
  /// random position into each training image (cutout-style augmentation).
  double occlusion_prob = 0.5;
};

namespace detail {

inline nn::Batch stack(const std::vector<ToySample>& data, const std::vector<std::size_t>& order, std::size_t begin,
                       std::size_t end, double occlusion_prob, std::mt19937_64& rng) {
  const Tensor3& first = data[order[begin]].image.tensor();
  nn::Batch b(end - begin, 3, first.height(), first.width());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = begin; i < end; ++i) {
    const auto v = data[order[i]].image.tensor().values();
    double* dst = b.sample(i - begin);
    std::copy(v.begin(), v.end(), dst);
    if (occlusion_prob > 0.0 && unit(rng) < occlusion_prob) {
      const auto side = std::min<std::size_t>(4 + static_cast<std::size_t>(unit(rng) * 9), std::min(b.h, b.w));
      const auto r0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(b.h - side + 1));
      const auto c0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(b.w - side + 1));
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = r0; y < r0 + side; ++y) {
          for (std::size_t x = c0; x < c0 + side; ++x) dst[(c * b.h + y) * b.w + x] = unit(rng);
        }
      }
    }
  }
  return b;
}

}  // namespace detail

/// Trains backbone + classifier head with batch-norm in training mode.
/// Returns the mean loss of the last epoch. `on_epoch(epoch, loss)` is
/// optional progress reporting.
inline double train_classifier(ToyNetwork& net, const std::vector<ToySample>& data, const TrainConfig& cfg,
                               const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (data.empty()) throw ValidationError("train_classifier: empty dataset");
  auto params = net.backbone_params();
  for (auto* p : net.classifier_params()) params.push_back(p);
  Adam opt(params, cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double epoch_loss = 0.0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    // cosine decay over the whole run
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      const double progress = (static_cast<double>(e) + static_cast<double>(b) / static_cast<double>(order.size())) /
                              static_cast<double>(cfg.epochs);
      opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
      nn::Batch x = detail::stack(data, order, b, end, cfg.occlusion_prob, rng);
      ToyNetwork::Tape tape;
      const nn::Batch feat = net.forward_backbone_train(x, tape);
      const nn::Batch logits = net.classifier_logits(feat);
      nn::Batch dlogits(logits.n, logits.c, 1, 1);
      const double n = static_cast<double>(end - b);
      for (std::size_t i = 0; i < logits.n; ++i) {
        std::span<const double> li(logits.sample(i), logits.c);
        std::span<double> gi(dlogits.sample(i), logits.c);
        total += cross_entropy(li, data[order[b + i]].label, gi);
        for (double& g : gi) g /= n;
      }
      opt.zero_grad();
      ToyNetwork::Seeds seeds;
      seeds.classifier = &dlogits;
      net.backward_train(tape, seeds);
      opt.step();
    }
    epoch_loss = total / static_cast<double>(data.size());
    if (on_epoch) on_epoch(e, epoch_loss);
  }
  return epoch_loss;
}

/// Trains the segmentation and detection heads on top of the frozen
/// (inference-mode) backbone.
inline void train_dense_heads(ToyNetwork& net, const std::vector<ToySample>& data, const TrainConfig& cfg) {
  if (data.empty()) throw ValidationError("train_dense_heads: empty dataset");
  std::vector<nn::Batch> feats;
  feats.reserve(data.size());
  for (const auto& s : data) {
    ToyNetwork::Tape tape;
    feats.push_back(net.forward_backbone(nn::Batch::from_tensor(s.image.tensor()), tape));
  }
  auto params = net.segmentation_params();
  for (auto* p : net.detection_params()) params.push_back(p);
  Adam opt(params, cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const double stride = static_cast<double>(net.downsample());
  const double anchor = net.config().anchor;
  // inverse-frequency class weights so that every segmentation class counts
  std::vector<double> freq(net.config().seg_classes, 0.0);
  double pixels = 0.0;
  for (const auto& s : data) {
    for (int v : s.mask) {
      if (v < 0 || static_cast<std::size_t>(v) >= freq.size()) throw ValidationError("train_dense_heads: mask label out of range");
      freq[static_cast<std::size_t>(v)] += 1.0;
    }
    pixels += static_cast<double>(s.mask.size());
  }
  std::vector<double> class_weight(freq.size(), 0.0);
  for (std::size_t k = 0; k < freq.size(); ++k) {
    class_weight[k] = freq[k] > 0 ? pixels / (static_cast<double>(freq.size()) * freq[k]) : 0.0;
  }
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      const double n = static_cast<double>(end - b);
      opt.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        const ToySample& s = data[order[i]];
        const nn::Batch& f = feats[order[i]];
        const Shape2 input = s.image.shape();

        const Tensor3 seg = net.segmentation_logits(f).to_tensor();
        Tensor3 dseg(seg.channels(), seg.height(), seg.width());
        segmentation_cross_entropy(seg, s.mask, &dseg);
        for (std::size_t p = 0; p < dseg.plane(); ++p) {
          const double w = class_weight[static_cast<std::size_t>(s.mask[p])];
          for (std::size_t k = 0; k < dseg.channels(); ++k) dseg.channel(k)[p] *= w;
        }

        const Tensor3 grid = net.detection_grid(f).to_tensor();
        Tensor3 ddet(grid.channels(), grid.height(), grid.width());
        detector_objective(grid, {s.box}, input, &ddet);
        // box regression on the responsible cell
        const auto [ci, cj] = responsible_cell(s.box, grid.height(), grid.width(), input);
        const double tx = 0.5 * (s.box.xmin + s.box.xmax) / stride - static_cast<double>(cj);
        const double ty = 0.5 * (s.box.ymin + s.box.ymax) / stride - static_cast<double>(ci);
        const double tw = std::log((s.box.xmax - s.box.xmin) / anchor);
        const double th = std::log((s.box.ymax - s.box.ymin) / anchor);
        const double sx = sigmoid(grid(1, ci, cj)), sy = sigmoid(grid(2, ci, cj));
        ddet(1, ci, cj) = 2.0 * (sx - tx) * sx * (1 - sx);
        ddet(2, ci, cj) = 2.0 * (sy - ty) * sy * (1 - sy);
        ddet(3, ci, cj) = 2.0 * (grid(3, ci, cj) - tw);
        ddet(4, ci, cj) = 2.0 * (grid(4, ci, cj) - th);

        nn::Batch gs = nn::Batch::from_tensor(dseg), gd = nn::Batch::from_tensor(ddet);
        net.accumulate_head_grads(f, &gs, &gd);
      }
      opt.step(1.0 / n);
    }
  }
}

/// Top-1 accuracy in [0,1].
inline double accuracy(const Model& model, const std::vector<Image>& images, const std::vector<int>& labels) {
  if (images.size() != labels.size() || images.empty()) throw ValidationError("accuracy: bad inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < images.size(); ++i) hits += model.task_forward(images[i]).argmax() == labels[i];
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

}  // namespace carpet::toy

#endif  // CARPET_MODEL_TRAINING_HPP
