#ifndef CARPET_MODEL_LAYERS_HPP
#define CARPET_MODEL_LAYERS_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "carpet/core/tensor.hpp"
#include "carpet/error.hpp"

namespace carpet::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecX = Eigen::VectorXd;

/// (N, C, H, W) activations.
struct Batch {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Batch() = default;
  Batch(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, fill) {}

  std::size_t sample_size() const noexcept { return c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  double* sample(std::size_t i) noexcept { return data.data() + i * sample_size(); }
  const double* sample(std::size_t i) const noexcept { return data.data() + i * sample_size(); }
  bool same_shape(const Batch& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }

  static Batch from_tensor(const Tensor3& t) {
    Batch b(1, t.channels(), t.height(), t.width());
    std::copy(t.values().begin(), t.values().end(), b.data.begin());
    return b;
  }
  Tensor3 to_tensor(std::size_t i = 0) const {
    return Tensor3(c, h, w, std::vector<double>(sample(i), sample(i) + sample_size()));
  }
};

/// A named trainable array and its gradient accumulator.
struct Param {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, std::size_t size) : name(std::move(n)), value(size, 0.0), grad(size, 0.0) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Square-kernel convolution, stride 1, zero padding `pad`.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t pad)
      : in_(in_ch), out_(out_ch), k_(kernel), pad_(pad),
        weight_(name + ".weight", out_ch * in_ch * kernel * kernel), bias_(name + ".bias", out_ch) {}

  void init(std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_)));
    for (double& v : weight_.value) v = dist(rng);
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
  }

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  Param& weight() noexcept { return weight_; }
  Param& bias() noexcept { return bias_; }
  const Param& weight() const noexcept { return weight_; }
  const Param& bias() const noexcept { return bias_; }

  Batch forward(const Batch& x) const {
    check_input(x);
    Batch y(x.n, out_, x.h, x.w);
    const std::size_t K = in_ * k_ * k_, P = x.plane();
    Eigen::Map<const MatRM> W(weight_.value.data(), out_, K);
    Eigen::Map<const VecX> b(bias_.value.data(), out_);
    std::vector<double> cols;
    for (std::size_t i = 0; i < x.n; ++i) {
      Eigen::Map<MatRM> out(y.sample(i), out_, P);
      if (is_pointwise()) {
        out.noalias() = W * Eigen::Map<const MatRM>(x.sample(i), in_, P);
      } else {
        im2col(x, i, cols);
        out.noalias() = W * Eigen::Map<const MatRM>(cols.data(), K, P);
      }
      out.colwise() += b;
    }
    return y;
  }

  /// dL/dx given dL/dy.
  Batch backward_input(const Batch& x_shape, const Batch& dy) const {
    Batch dx(x_shape.n, in_, x_shape.h, x_shape.w);
    const std::size_t K = in_ * k_ * k_, P = dy.plane();
    Eigen::Map<const MatRM> W(weight_.value.data(), out_, K);
    std::vector<double> dcols(K * P);
    for (std::size_t i = 0; i < dy.n; ++i) {
      Eigen::Map<const MatRM> g(dy.sample(i), out_, P);
      if (is_pointwise()) {
        Eigen::Map<MatRM>(dx.sample(i), in_, P).noalias() = W.transpose() * g;
      } else {
        Eigen::Map<MatRM>(dcols.data(), K, P).noalias() = W.transpose() * g;
        col2im(dcols, dx, i);
      }
    }
    return dx;
  }

  void accumulate_param_grads(const Batch& x, const Batch& dy) {
    const std::size_t K = in_ * k_ * k_, P = dy.plane();
    Eigen::Map<MatRM> dW(weight_.grad.data(), out_, K);
    Eigen::Map<VecX> db(bias_.grad.data(), out_);
    std::vector<double> cols;
    for (std::size_t i = 0; i < dy.n; ++i) {
      Eigen::Map<const MatRM> g(dy.sample(i), out_, P);
      if (is_pointwise()) {
        dW.noalias() += g * Eigen::Map<const MatRM>(x.sample(i), in_, P).transpose();
      } else {
        im2col(x, i, cols);
        dW.noalias() += g * Eigen::Map<const MatRM>(cols.data(), K, P).transpose();
      }
      db += g.rowwise().sum();
    }
  }

 private:
  bool is_pointwise() const noexcept { return k_ == 1 && pad_ == 0; }

  void check_input(const Batch& x) const {
    if (x.c != in_) {
      throw ShapeError("Conv2d: expected " + std::to_string(in_) + " input channels, got " + std::to_string(x.c));
    }
  }

  void im2col(const Batch& x, std::size_t i, std::vector<double>& cols) const {
    const std::size_t H = x.h, W = x.w, P = H * W;
    cols.assign(in_ * k_ * k_ * P, 0.0);
    const double* src = x.sample(i);
    for (std::size_t ci = 0; ci < in_; ++ci) {
      for (std::size_t ky = 0; ky < k_; ++ky) {
        for (std::size_t kx = 0; kx < k_; ++kx) {
          double* row = cols.data() + ((ci * k_ + ky) * k_ + kx) * P;
          const long dy = static_cast<long>(ky) - static_cast<long>(pad_);
          const long dx = static_cast<long>(kx) - static_cast<long>(pad_);
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + dy;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            const double* srow = src + (ci * H + static_cast<std::size_t>(sy)) * W;
            const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
            const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
            for (std::size_t xx = x0; xx < x1; ++xx) row[y * W + xx] = srow[static_cast<long>(xx) + dx];
          }
        }
      }
    }
  }

  void col2im(const std::vector<double>& cols, Batch& dx, std::size_t i) const {
    const std::size_t H = dx.h, W = dx.w, P = H * W;
    double* dst = dx.sample(i);
    for (std::size_t ci = 0; ci < in_; ++ci) {
      for (std::size_t ky = 0; ky < k_; ++ky) {
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const double* row = cols.data() + ((ci * k_ + ky) * k_ + kx) * P;
          const long dy = static_cast<long>(ky) - static_cast<long>(pad_);
          const long ddx = static_cast<long>(kx) - static_cast<long>(pad_);
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + dy;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            double* drow = dst + (ci * H + static_cast<std::size_t>(sy)) * W;
            const std::size_t x0 = ddx < 0 ? static_cast<std::size_t>(-ddx) : 0;
            const std::size_t x1 = ddx > 0 ? W - static_cast<std::size_t>(ddx) : W;
            for (std::size_t xx = x0; xx < x1; ++xx) drow[static_cast<long>(xx) + ddx] += row[y * W + xx];
          }
        }
      }
    }
  }

  std::size_t in_ = 0, out_ = 0, k_ = 1, pad_ = 0;
  Param weight_, bias_;
};

/// Saved statistics of a training-mode batch-norm forward pass.
struct BatchNormCache {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

/// Per-channel batch normalization. Inference mode uses running statistics
/// and is a fixed affine map; training mode uses batch statistics.
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels)
      : c_(channels), gamma_(name + ".gamma", channels), beta_(name + ".beta", channels),
        running_mean_(name + ".running_mean", channels), running_var_(name + ".running_var", channels) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
    std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0);
  }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  Param& gamma() noexcept { return gamma_; }
  Param& beta() noexcept { return beta_; }
  Param& running_mean() noexcept { return running_mean_; }
  Param& running_var() noexcept { return running_var_; }
  const Param& gamma() const noexcept { return gamma_; }
  const Param& beta() const noexcept { return beta_; }
  const Param& running_mean() const noexcept { return running_mean_; }
  const Param& running_var() const noexcept { return running_var_; }

  Batch forward_inference(const Batch& x) const {
    Batch y(x.n, x.c, x.h, x.w);
    const std::size_t P = x.plane();
    for (std::size_t ch = 0; ch < c_; ++ch) {
      const double scale = gamma_.value[ch] / std::sqrt(running_var_.value[ch] + kEps);
      const double shift = beta_.value[ch] - running_mean_.value[ch] * scale;
      for (std::size_t i = 0; i < x.n; ++i) {
        const double* s = x.sample(i) + ch * P;
        double* d = y.sample(i) + ch * P;
        for (std::size_t p = 0; p < P; ++p) d[p] = s[p] * scale + shift;
      }
    }
    return y;
  }

  Batch backward_inference(const Batch& dy) const {
    Batch dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t P = dy.plane();
    for (std::size_t ch = 0; ch < c_; ++ch) {
      const double scale = gamma_.value[ch] / std::sqrt(running_var_.value[ch] + kEps);
      for (std::size_t i = 0; i < dy.n; ++i) {
        const double* s = dy.sample(i) + ch * P;
        double* d = dx.sample(i) + ch * P;
        for (std::size_t p = 0; p < P; ++p) d[p] = s[p] * scale;
      }
    }
    return dx;
  }

  Batch forward_train(const Batch& x, BatchNormCache& cache) {
    Batch y(x.n, x.c, x.h, x.w);
    const std::size_t P = x.plane();
    const double M = static_cast<double>(x.n * P);
    cache.xhat.assign(x.data.size(), 0.0);
    cache.inv_std.assign(c_, 0.0);
    for (std::size_t ch = 0; ch < c_; ++ch) {
      double mean = 0.0;
      for (std::size_t i = 0; i < x.n; ++i) {
        const double* s = x.sample(i) + ch * P;
        for (std::size_t p = 0; p < P; ++p) mean += s[p];
      }
      mean /= M;
      double var = 0.0;
      for (std::size_t i = 0; i < x.n; ++i) {
        const double* s = x.sample(i) + ch * P;
        for (std::size_t p = 0; p < P; ++p) var += (s[p] - mean) * (s[p] - mean);
      }
      var /= M;
      const double inv = 1.0 / std::sqrt(var + kEps);
      cache.inv_std[ch] = inv;
      for (std::size_t i = 0; i < x.n; ++i) {
        const std::size_t off = i * x.sample_size() + ch * P;
        for (std::size_t p = 0; p < P; ++p) {
          const double xh = (x.data[off + p] - mean) * inv;
          cache.xhat[off + p] = xh;
          y.data[off + p] = gamma_.value[ch] * xh + beta_.value[ch];
        }
      }
      const double unbiased = M > 1 ? var * M / (M - 1) : var;
      running_mean_.value[ch] = (1 - kMomentum) * running_mean_.value[ch] + kMomentum * mean;
      running_var_.value[ch] = (1 - kMomentum) * running_var_.value[ch] + kMomentum * unbiased;
    }
    return y;
  }

  Batch backward_train(const Batch& dy, const BatchNormCache& cache) {
    Batch dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t P = dy.plane();
    const double M = static_cast<double>(dy.n * P);
    for (std::size_t ch = 0; ch < c_; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < dy.n; ++i) {
        const std::size_t off = i * dy.sample_size() + ch * P;
        for (std::size_t p = 0; p < P; ++p) {
          sum_dy += dy.data[off + p];
          sum_dy_xhat += dy.data[off + p] * cache.xhat[off + p];
        }
      }
      gamma_.grad[ch] += sum_dy_xhat;
      beta_.grad[ch] += sum_dy;
      const double k = gamma_.value[ch] * cache.inv_std[ch] / M;
      for (std::size_t i = 0; i < dy.n; ++i) {
        const std::size_t off = i * dy.sample_size() + ch * P;
        for (std::size_t p = 0; p < P; ++p) {
          dx.data[off + p] = k * (M * dy.data[off + p] - sum_dy - cache.xhat[off + p] * sum_dy_xhat);
        }
      }
    }
    return dx;
  }

 private:
  std::size_t c_ = 0;
  Param gamma_, beta_, running_mean_, running_var_;
};

inline Batch relu_forward(const Batch& x) {
  Batch y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

/// Gradient through ReLU given its output (zero where the output is zero).
inline Batch relu_backward(const Batch& y, const Batch& dy) {
  Batch dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i) {
    if (!(y.data[i] > 0.0)) dx.data[i] = 0.0;
  }
  return dx;
}

/// 2x2 max pooling, stride 2; `argmax` records the winning input offset per
/// output element (first maximum in scan order wins).
inline Batch maxpool2_forward(const Batch& x, std::vector<std::size_t>& argmax) {
  const std::size_t oh = x.h / 2, ow = x.w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2: input smaller than 2x2");
  Batch y(x.n, x.c, oh, ow);
  argmax.assign(y.data.size(), 0);
  std::size_t o = 0;
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t ch = 0; ch < x.c; ++ch) {
      const std::size_t base = (i * x.c + ch) * x.plane();
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t q = 0; q < ow; ++q, ++o) {
          std::size_t best = base + (2 * r) * x.w + 2 * q;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = base + (2 * r + dy) * x.w + 2 * q + dx;
              if (x.data[idx] > x.data[best]) best = idx;
            }
          }
          argmax[o] = best;
          y.data[o] = x.data[best];
        }
      }
    }
  }
  return y;
}

inline Batch maxpool2_backward(const Batch& x_shape, const std::vector<std::size_t>& argmax, const Batch& dy) {
  Batch dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
  for (std::size_t o = 0; o < dy.data.size(); ++o) dx.data[argmax[o]] += dy.data[o];
  return dx;
}

/// Fully connected layer on flattened samples.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_(name + ".weight", out * in), bias_(name + ".bias", out) {}

  void init(std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(in_)));
    for (double& v : weight_.value) v = dist(rng);
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
  }

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  Param& weight() noexcept { return weight_; }
  Param& bias() noexcept { return bias_; }
  const Param& weight() const noexcept { return weight_; }
  const Param& bias() const noexcept { return bias_; }

  Batch forward(const Batch& x) const {
    if (x.sample_size() != in_) {
      throw ShapeError("Linear: expected " + std::to_string(in_) + " input features, got " +
                       std::to_string(x.sample_size()));
    }
    Batch y(x.n, out_, 1, 1);
    Eigen::Map<const MatRM> W(weight_.value.data(), out_, in_);
    Eigen::Map<const VecX> b(bias_.value.data(), out_);
    Eigen::Map<const MatRM> X(x.data.data(), x.n, in_);
    Eigen::Map<MatRM> Y(y.data.data(), x.n, out_);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += b.transpose();
    return y;
  }

  Batch backward_input(const Batch& x_shape, const Batch& dy) const {
    Batch dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
    Eigen::Map<const MatRM> W(weight_.value.data(), out_, in_);
    Eigen::Map<const MatRM> G(dy.data.data(), dy.n, out_);
    Eigen::Map<MatRM>(dx.data.data(), dy.n, in_).noalias() = G * W;
    return dx;
  }

  void accumulate_param_grads(const Batch& x, const Batch& dy) {
    Eigen::Map<const MatRM> G(dy.data.data(), dy.n, out_);
    Eigen::Map<const MatRM> X(x.data.data(), x.n, in_);
    Eigen::Map<MatRM>(weight_.grad.data(), out_, in_).noalias() += G.transpose() * X;
    Eigen::Map<VecX>(bias_.grad.data(), out_) += G.colwise().sum().transpose();
  }

 private:
  std::size_t in_ = 0, out_ = 0;
  Param weight_, bias_;
};

/// Nearest-neighbour upsampling by an integer factor.
inline Batch upsample_nearest(const Batch& x, std::size_t factor) {
  Batch y(x.n, x.c, x.h * factor, x.w * factor);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t ch = 0; ch < x.c; ++ch) {
      const double* s = x.sample(i) + ch * x.plane();
      double* d = y.sample(i) + ch * y.plane();
      for (std::size_t r = 0; r < y.h; ++r) {
        for (std::size_t q = 0; q < y.w; ++q) d[r * y.w + q] = s[(r / factor) * x.w + q / factor];
      }
    }
  }
  return y;
}

inline Batch upsample_nearest_backward(const Batch& x_shape, const Batch& dy, std::size_t factor) {
  Batch dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
  for (std::size_t i = 0; i < dy.n; ++i) {
    for (std::size_t ch = 0; ch < dy.c; ++ch) {
      const double* s = dy.sample(i) + ch * dy.plane();
      double* d = dx.sample(i) + ch * dx.plane();
      for (std::size_t r = 0; r < dy.h; ++r) {
        for (std::size_t q = 0; q < dy.w; ++q) d[(r / factor) * dx.w + q / factor] += s[r * dy.w + q];
      }
    }
  }
  return dx;
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edges clamped).
namespace detail {
struct Tap {
  std::size_t i0, i1;
  double w1;
};
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Tap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

inline Batch upsample_bilinear(const Batch& x, std::size_t factor) {
  Batch y(x.n, x.c, x.h * factor, x.w * factor);
  const auto ty = detail::bilinear_taps(x.h, factor), tx = detail::bilinear_taps(x.w, factor);
  for (std::size_t i = 0; i < x.n; ++i) {
    for (std::size_t ch = 0; ch < x.c; ++ch) {
      const double* s = x.sample(i) + ch * x.plane();
      double* d = y.sample(i) + ch * y.plane();
      for (std::size_t r = 0; r < y.h; ++r) {
        const auto& a = ty[r];
        for (std::size_t q = 0; q < y.w; ++q) {
          const auto& b = tx[q];
          const double top = s[a.i0 * x.w + b.i0] * (1 - b.w1) + s[a.i0 * x.w + b.i1] * b.w1;
          const double bot = s[a.i1 * x.w + b.i0] * (1 - b.w1) + s[a.i1 * x.w + b.i1] * b.w1;
          d[r * y.w + q] = top * (1 - a.w1) + bot * a.w1;
        }
      }
    }
  }
  return y;
}

inline Batch upsample_bilinear_backward(const Batch& x_shape, const Batch& dy, std::size_t factor) {
  Batch dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
  const auto ty = detail::bilinear_taps(dx.h, factor), tx = detail::bilinear_taps(dx.w, factor);
  for (std::size_t i = 0; i < dy.n; ++i) {
    for (std::size_t ch = 0; ch < dy.c; ++ch) {
      const double* s = dy.sample(i) + ch * dy.plane();
      double* d = dx.sample(i) + ch * dx.plane();
      for (std::size_t r = 0; r < dy.h; ++r) {
        const auto& a = ty[r];
        for (std::size_t q = 0; q < dy.w; ++q) {
          const auto& b = tx[q];
          const double g = s[r * dy.w + q];
          d[a.i0 * dx.w + b.i0] += g * (1 - a.w1) * (1 - b.w1);
          d[a.i0 * dx.w + b.i1] += g * (1 - a.w1) * b.w1;
          d[a.i1 * dx.w + b.i0] += g * a.w1 * (1 - b.w1);
          d[a.i1 * dx.w + b.i1] += g * a.w1 * b.w1;
        }
      }
    }
  }
  return dx;
}

}  // namespace carpet::nn

#endif  // CARPET_MODEL_LAYERS_HPP
