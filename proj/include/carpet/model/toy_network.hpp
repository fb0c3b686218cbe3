#ifndef CARPET_MODEL_TOY_NETWORK_HPP
#define CARPET_MODEL_TOY_NETWORK_HPP

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/core/box.hpp"
#include "carpet/core/digest.hpp"
#include "carpet/error.hpp"
#include "carpet/model/layers.hpp"

namespace carpet::toy {

/// Architecture of the reference CNN: three conv-bn-relu-maxpool blocks
/// followed by three heads sharing the last block (linear classifier,
/// 1x1-conv segmentation with bilinear upsampling, 3x3-conv grid detector).
struct ToyConfig {
  std::size_t input_size = 32;
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t kernel = 5;  // odd conv kernel side
  bool global_pool = true;  // classifier reads averaged features instead of the flattened grid
  std::size_t num_classes = 10;
  std::size_t seg_classes = 11;  // background + one per shape class
  double anchor = 12.0;  // detector prior box side, pixels
  std::uint64_t seed = 1;

  /// Everything that determines parameter shapes (seed excluded).
  nlohmann::json architecture() const {
    return {{"input_size", input_size}, {"widths", widths}, {"kernel", kernel}, {"global_pool", global_pool}, {"num_classes", num_classes},
            {"seg_classes", seg_classes}, {"anchor", anchor}};
  }
  nlohmann::json to_json() const {
    auto j = architecture();
    j["seed"] = seed;
    return j;
  }
  static ToyConfig from_json(const nlohmann::json& j) {
    ToyConfig c;
    c.input_size = j.at("input_size").get<std::size_t>();
    c.widths = j.at("widths").get<std::array<std::size_t, 3>>();
    c.kernel = j.at("kernel").get<std::size_t>();
    c.global_pool = j.at("global_pool").get<bool>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.seg_classes = j.at("seg_classes").get<std::size_t>();
    c.anchor = j.at("anchor").get<double>();
    c.seed = j.value("seed", std::uint64_t{1});
    return c;
  }
};

/// Per-channel input normalization applied after compositing.
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.25;

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

class ToyNetwork {
 public:
  static constexpr std::size_t kBlocks = 3;
  /// Activation sites: the raw input and the pooled output of each block.
  static constexpr std::array<const char*, 4> kLayerNames{"input", "block1", "block2", "block3"};

  struct Block {
    nn::Conv2d conv;
    nn::BatchNorm2d bn;
  };

  struct BlockTape {
    nn::Batch in, relu_out, out;
    std::vector<std::size_t> argmax;
    nn::BatchNormCache bn_cache;
  };

  /// Intermediate values of one forward pass, needed by backward.
  struct Tape {
    nn::Batch input;
    std::array<BlockTape, kBlocks> blocks;
    std::size_t depth = 0;
    bool train = false;
  };

  /// Gradient seeds: per activation site (index into kLayerNames) and per head.
  struct Seeds {
    std::array<const nn::Batch*, 4> layers{};
    const nn::Batch* classifier = nullptr;
    const nn::Batch* segmentation = nullptr;
    const nn::Batch* detection = nullptr;
  };

  explicit ToyNetwork(ToyConfig cfg) : cfg_(cfg) {
    if (cfg_.kernel % 2 == 0) throw ValidationError("ToyConfig: kernel must be odd");
    std::size_t in = 3;
    for (std::size_t b = 0; b < kBlocks; ++b) {
      const std::string name = "block" + std::to_string(b + 1);
      blocks_[b] = Block{nn::Conv2d(name + ".conv", in, cfg_.widths[b], cfg_.kernel, cfg_.kernel / 2), nn::BatchNorm2d(name + ".bn", cfg_.widths[b])};
      in = cfg_.widths[b];
    }
    const std::size_t cell = cfg_.input_size >> kBlocks;
    if (cell == 0 || (cfg_.input_size % (1u << kBlocks)) != 0) {
      throw ValidationError("ToyConfig: input_size must be a positive multiple of 8");
    }
    classifier_ = nn::Linear("classifier", cfg_.global_pool ? in : in * cell * cell, cfg_.num_classes);
    segmenter_ = nn::Conv2d("segmenter", in, cfg_.seg_classes, 1, 0);
    detector_ = nn::Conv2d("detector", in, 5 + cfg_.num_classes, 3, 1);
    std::mt19937_64 rng(cfg_.seed);
    for (auto& b : blocks_) b.conv.init(rng);
    classifier_.init(rng);
    segmenter_.init(rng);
    detector_.init(rng);
  }

  const ToyConfig& config() const noexcept { return cfg_; }
  std::size_t feature_channels() const noexcept { return cfg_.widths.back(); }
  std::size_t downsample() const noexcept { return std::size_t{1} << kBlocks; }

  std::vector<nn::Param*> backbone_params() {
    std::vector<nn::Param*> p;
    for (auto& b : blocks_) {
      p.insert(p.end(), {&b.conv.weight(), &b.conv.bias(), &b.bn.gamma(), &b.bn.beta()});
    }
    return p;
  }
  std::vector<nn::Param*> classifier_params() { return {&classifier_.weight(), &classifier_.bias()}; }
  std::vector<nn::Param*> segmentation_params() { return {&segmenter_.weight(), &segmenter_.bias()}; }
  std::vector<nn::Param*> detection_params() { return {&detector_.weight(), &detector_.bias()}; }

  /// Every serialized array (trainable and running statistics) in a fixed order.
  std::vector<nn::Param*> state() {
    std::vector<nn::Param*> p;
    for (auto& b : blocks_) {
      p.insert(p.end(), {&b.conv.weight(), &b.conv.bias(), &b.bn.gamma(), &b.bn.beta(), &b.bn.running_mean(),
                         &b.bn.running_var()});
    }
    p.insert(p.end(), {&classifier_.weight(), &classifier_.bias(), &segmenter_.weight(), &segmenter_.bias(),
                       &detector_.weight(), &detector_.bias()});
    return p;
  }
  std::vector<const nn::Param*> state() const {
    auto p = const_cast<ToyNetwork*>(this)->state();
    return {p.begin(), p.end()};
  }

  std::string digest() const {
    std::string bytes = cfg_.architecture().dump();
    for (const auto* p : state()) {
      bytes += p->name;
      bytes.append(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(double));
    }
    return sha256_hex(bytes);
  }

  /// Inference-mode backbone up to `depth` blocks (0 = input only).
  nn::Batch forward_backbone(const nn::Batch& x01, Tape& tape, std::size_t depth = kBlocks) const {
    return forward_impl(*this, x01, tape, depth);
  }
  /// Training-mode backbone: batch statistics, running stats updated.
  nn::Batch forward_backbone_train(const nn::Batch& x01, Tape& tape) {
    return forward_impl(*this, x01, tape, kBlocks);
  }

  nn::Batch classifier_logits(const nn::Batch& features) const {
    return classifier_.forward(cfg_.global_pool ? global_average(features) : features);
  }
  nn::Batch segmentation_logits(const nn::Batch& features) const {
    return nn::upsample_bilinear(segmenter_.forward(features), downsample());
  }
  nn::Batch detection_grid(const nn::Batch& features) const { return detector_.forward(features); }

  /// Gradient w.r.t. the [0,1] input, no parameter gradients.
  nn::Batch backward(const Tape& tape, const Seeds& seeds) const { return backward_impl(*this, tape, seeds); }
  /// Gradient w.r.t. the input; also accumulates parameter gradients of
  /// everything downstream of a seed.
  nn::Batch backward_train(const Tape& tape, const Seeds& seeds) { return backward_impl(*this, tape, seeds); }

  /// Accumulates gradients of the dense heads only, given backbone output
  /// `features` and seeds on the (upsampled) segmentation logits and the
  /// detection grid.
  void accumulate_head_grads(const nn::Batch& features, const nn::Batch* seg_seed, const nn::Batch* det_seed) {
    if (seg_seed) {
      nn::Batch low(features.n, cfg_.seg_classes, features.h, features.w);
      segmenter_.accumulate_param_grads(features, nn::upsample_bilinear_backward(low, *seg_seed, downsample()));
    }
    if (det_seed) detector_.accumulate_param_grads(features, *det_seed);
  }

  /// Decodes a (5 + classes, h, w) grid into one box per cell.
  std::vector<Box> decode_detections(const Tensor3& grid) const {
    std::vector<Box> out;
    const double stride = static_cast<double>(downsample());
    const std::size_t nc = cfg_.num_classes;
    for (std::size_t i = 0; i < grid.height(); ++i) {
      for (std::size_t j = 0; j < grid.width(); ++j) {
        const double obj = sigmoid(grid(0, i, j));
        const double cx = (static_cast<double>(j) + sigmoid(grid(1, i, j))) * stride;
        const double cy = (static_cast<double>(i) + sigmoid(grid(2, i, j))) * stride;
        const double bw = cfg_.anchor * std::exp(std::clamp(grid(3, i, j), -4.0, 4.0));
        const double bh = cfg_.anchor * std::exp(std::clamp(grid(4, i, j), -4.0, 4.0));
        double mx = grid(5, i, j);
        std::size_t best = 0;
        for (std::size_t k = 1; k < nc; ++k) {
          if (grid(5 + k, i, j) > mx) {
            mx = grid(5 + k, i, j);
            best = k;
          }
        }
        double denom = 0.0;
        for (std::size_t k = 0; k < nc; ++k) denom += std::exp(grid(5 + k, i, j) - mx);
        out.push_back({cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, static_cast<int>(best), obj / denom});
      }
    }
    return out;
  }

 private:
  template <class Self>
  static nn::Batch forward_impl(Self& self, const nn::Batch& x01, Tape& tape, std::size_t depth) {
    constexpr bool kTrain = !std::is_const_v<Self>;
    if (x01.c != 3) throw ShapeError("ToyNetwork: expected 3-channel input");
    tape.train = kTrain;
    tape.depth = depth;
    tape.input = x01;
    nn::Batch cur = x01;
    for (double& v : cur.data) v = (v - kPixelMean) / kPixelStd;
    for (std::size_t b = 0; b < depth; ++b) {
      auto& bt = tape.blocks[b];
      auto& blk = self.blocks_[b];
      bt.in = std::move(cur);
      nn::Batch conv = blk.conv.forward(bt.in);
      nn::Batch normed;
      if constexpr (kTrain) {
        normed = blk.bn.forward_train(conv, bt.bn_cache);
      } else {
        normed = blk.bn.forward_inference(conv);
      }
      bt.relu_out = nn::relu_forward(normed);
      bt.out = nn::maxpool2_forward(bt.relu_out, bt.argmax);
      require_finite(bt.out, kLayerNames[b + 1]);
      cur = bt.out;
    }
    return depth == 0 ? x01 : tape.blocks[depth - 1].out;
  }

  template <class Self>
  static nn::Batch backward_impl(Self& self, const Tape& tape, const Seeds& seeds) {
    constexpr bool kTrain = !std::is_const_v<Self>;
    const bool any_head = seeds.classifier || seeds.segmentation || seeds.detection;
    std::size_t top = 0;
    for (std::size_t l = 0; l < seeds.layers.size(); ++l) {
      if (seeds.layers[l]) top = l;
    }
    if (any_head) top = kBlocks;
    if (top > tape.depth) throw ValidationError("ToyNetwork::backward: tape does not reach the seeded layer");

    nn::Batch grad;
    if (top > 0) {
      const nn::Batch& feat = tape.blocks[kBlocks - 1].out;
      grad = nn::Batch(feat.n, feat.c, feat.h, feat.w);
      if (top == kBlocks) {
        if (seeds.classifier) {
          if (self.cfg_.global_pool) {
            const nn::Batch pooled = global_average(feat);
            const nn::Batch dpooled = self.classifier_.backward_input(pooled, *seeds.classifier);
            add_into(grad, global_average_backward(feat, dpooled));
            if constexpr (kTrain) self.classifier_.accumulate_param_grads(pooled, *seeds.classifier);
          } else {
            add_into(grad, self.classifier_.backward_input(feat, *seeds.classifier));
            if constexpr (kTrain) self.classifier_.accumulate_param_grads(feat, *seeds.classifier);
          }
        }
        if (seeds.segmentation) {
          nn::Batch low(feat.n, self.cfg_.seg_classes, feat.h, feat.w);
          nn::Batch dlow = nn::upsample_bilinear_backward(low, *seeds.segmentation, self.downsample());
          add_into(grad, self.segmenter_.backward_input(feat, dlow));
          if constexpr (kTrain) self.segmenter_.accumulate_param_grads(feat, dlow);
        }
        if (seeds.detection) {
          add_into(grad, self.detector_.backward_input(feat, *seeds.detection));
          if constexpr (kTrain) self.detector_.accumulate_param_grads(feat, *seeds.detection);
        }
      } else {
        grad = nn::Batch(tape.blocks[top - 1].out.n, tape.blocks[top - 1].out.c, tape.blocks[top - 1].out.h,
                         tape.blocks[top - 1].out.w);
      }
      for (std::size_t b = top; b-- > 0;) {
        if (seeds.layers[b + 1]) add_into(grad, *seeds.layers[b + 1]);
        const auto& bt = tape.blocks[b];
        auto& blk = self.blocks_[b];
        nn::Batch g = nn::maxpool2_backward(bt.relu_out, bt.argmax, grad);
        g = nn::relu_backward(bt.relu_out, g);
        if constexpr (kTrain) {
          g = blk.bn.backward_train(g, bt.bn_cache);
          blk.conv.accumulate_param_grads(bt.in, g);
        } else {
          g = blk.bn.backward_inference(g);
        }
        grad = blk.conv.backward_input(bt.in, g);
        require_finite(grad, kLayerNames[b + 1]);
      }
      for (double& v : grad.data) v /= kPixelStd;
    } else {
      grad = nn::Batch(tape.input.n, tape.input.c, tape.input.h, tape.input.w);
    }
    if (seeds.layers[0]) add_into(grad, *seeds.layers[0]);
    return grad;
  }

  static nn::Batch global_average(const nn::Batch& x) {
    nn::Batch y(x.n, x.c, 1, 1);
    for (std::size_t i = 0; i < x.n; ++i) {
      for (std::size_t ch = 0; ch < x.c; ++ch) {
        const double* s = x.sample(i) + ch * x.plane();
        double acc = 0.0;
        for (std::size_t p = 0; p < x.plane(); ++p) acc += s[p];
        y.sample(i)[ch] = acc / static_cast<double>(x.plane());
      }
    }
    return y;
  }

  static nn::Batch global_average_backward(const nn::Batch& x_shape, const nn::Batch& dy) {
    nn::Batch dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
    const double inv = 1.0 / static_cast<double>(x_shape.plane());
    for (std::size_t i = 0; i < dx.n; ++i) {
      for (std::size_t ch = 0; ch < dx.c; ++ch) {
        double* d = dx.sample(i) + ch * dx.plane();
        for (std::size_t p = 0; p < dx.plane(); ++p) d[p] = dy.sample(i)[ch] * inv;
      }
    }
    return dx;
  }

  static void add_into(nn::Batch& acc, const nn::Batch& g) {
    if (!acc.same_shape(g)) throw ShapeError("ToyNetwork: gradient seed shape mismatch");
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
  }

  static void require_finite(const nn::Batch& b, const char* layer) {
    if (!all_finite(b.data)) throw NonFiniteError(layer, std::string("non-finite value at layer ") + layer);
  }

  ToyConfig cfg_;
  std::array<Block, kBlocks> blocks_;
  nn::Linear classifier_;
  nn::Conv2d segmenter_;
  nn::Conv2d detector_;
};

// Checkpoint layout: "CBCK", u32 config-JSON length, config JSON, u32 array
// count, then per array: u32 name length, name, u64 element count, f64 LE values.

inline void save_checkpoint(const ToyNetwork& net, const std::filesystem::path& path) {
  std::string out = "CBCK";
  auto put32 = [&out](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  };
  auto put64 = [&out](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  };
  const std::string cfg = net.config().to_json().dump();
  put32(static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto st = net.state();
  put32(static_cast<std::uint32_t>(st.size()));
  for (const auto* p : st) {
    put32(static_cast<std::uint32_t>(p->name.size()));
    out += p->name;
    put64(p->value.size());
    for (double v : p->value) put64(std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw RuntimeFailure("write failed for checkpoint " + path.string());
}

inline ToyNetwork load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint " + path.string());
  const std::string in{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > in.size()) throw ValidationError("checkpoint " + path.string() + " is truncated");
  };
  auto get = [&](int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  };
  need(4);
  if (in.compare(0, 4, "CBCK") != 0) throw ValidationError("checkpoint " + path.string() + " has bad magic");
  pos = 4;
  const auto cfg_len = static_cast<std::size_t>(get(4));
  need(cfg_len);
  ToyConfig cfg;
  try {
    cfg = ToyConfig::from_json(nlohmann::json::parse(in.substr(pos, cfg_len)));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint " + path.string() + ": bad config: " + e.what());
  }
  pos += cfg_len;
  ToyNetwork net(cfg);
  auto st = net.state();
  const auto count = static_cast<std::size_t>(get(4));
  if (count != st.size()) throw ValidationError("checkpoint " + path.string() + ": array count mismatch");
  for (auto* p : st) {
    const auto name_len = static_cast<std::size_t>(get(4));
    need(name_len);
    const std::string name = in.substr(pos, name_len);
    pos += name_len;
    if (name != p->name) throw ValidationError("checkpoint " + path.string() + ": expected array " + p->name + ", found " + name);
    const auto n = static_cast<std::size_t>(get(8));
    if (n != p->value.size()) throw ValidationError("checkpoint " + path.string() + ": size mismatch for " + name);
    for (double& v : p->value) v = std::bit_cast<double>(get(8));
  }
  if (pos != in.size()) throw ValidationError("checkpoint " + path.string() + " has trailing bytes");
  return net;
}

}  // namespace carpet::toy

#endif  // CARPET_MODEL_TOY_NETWORK_HPP
