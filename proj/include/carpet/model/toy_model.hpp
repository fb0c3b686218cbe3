#ifndef CARPET_MODEL_TOY_MODEL_HPP
#define CARPET_MODEL_TOY_MODEL_HPP

#include <algorithm>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "carpet/model/model.hpp"
#include "carpet/model/toy_network.hpp"

namespace carpet {

/// Adapter exposing a ToyNetwork as a Model. Several handles with different
/// task kinds can share one network: they share the backbone f.
///
/// Activation sites: "input" is the raw [0,1] image before normalization;
/// "blockN" is the max-pooled output of block N (post-ReLU).
class ToyModel final : public Model {
 public:
  ToyModel(std::shared_ptr<const toy::ToyNetwork> net, TaskKind task) : net_(std::move(net)), task_(task) {
    if (!net_) throw ValidationError("ToyModel: null network");
  }

  static ModelHandle make(std::shared_ptr<const toy::ToyNetwork> net, TaskKind task) {
    return std::make_shared<ToyModel>(std::move(net), task);
  }

  const std::shared_ptr<const toy::ToyNetwork>& network() const noexcept { return net_; }

  std::string backbone_id() const override { return "toy"; }
  TaskKind task_kind() const override { return task_; }
  std::vector<LayerId> layers() const override {
    return {toy::ToyNetwork::kLayerNames.begin(), toy::ToyNetwork::kLayerNames.end()};
  }
  std::string preprocessing() const override {
    return "x -> (x - 0.5) / 0.25 per channel, applied after compositing";
  }
  bool trainable() const override { return true; }
  std::size_t num_classes() const override {
    return task_ == TaskKind::segmentation ? net_->config().seg_classes : net_->config().num_classes;
  }
  std::string digest() const override { return net_->digest(); }

  LayerShape layer_shape(const LayerId& layer, Shape2 input) const override {
    const std::size_t d = depth_of(layer);
    if (d == 0) return {3, input.height, input.width};
    return {net_->config().widths[d - 1], input.height >> d, input.width >> d};
  }

  FeatureMapSet extract_features(const Image& x, std::span<const LayerId> layers) const override {
    std::size_t depth = 0;
    for (const auto& l : layers) depth = std::max(depth, depth_of(l));
    toy::ToyNetwork::Tape tape;
    net_->forward_backbone(nn::Batch::from_tensor(x.tensor()), tape, depth);
    FeatureMapSet out;
    for (const auto& l : layers) out[l.name] = activation(tape, depth_of(l));
    return out;
  }

  TaskOutput task_forward(const Image& x) const override {
    if (task_ == TaskKind::none) throw ValidationError("task_forward: model has no task head");
    toy::ToyNetwork::Tape tape;
    const nn::Batch feat = net_->forward_backbone(nn::Batch::from_tensor(x.tensor()), tape);
    return head_output(feat, x.shape());
  }

  LossGradient input_gradient(const Image& x, const Objective& objective) const override {
    if (!objective.evaluate) throw ValidationError("input_gradient: objective has no evaluate function");
    if (objective.uses_head && task_ == TaskKind::none) {
      throw ValidationError("input_gradient: objective needs a task head but model has none");
    }
    std::size_t depth = objective.uses_head ? toy::ToyNetwork::kBlocks : 0;
    for (const auto& l : objective.layers) depth = std::max(depth, depth_of(l));

    toy::ToyNetwork::Tape tape;
    const nn::Batch top = net_->forward_backbone(nn::Batch::from_tensor(x.tensor()), tape, depth);
    FeatureMapSet feats;
    ObjectiveSeeds seeds;
    for (const auto& l : objective.layers) {
      feats[l.name] = activation(tape, depth_of(l));
      const Tensor3& f = feats[l.name];
      seeds.features[l.name] = Tensor3(f.channels(), f.height(), f.width());
    }
    TaskOutput head;
    if (objective.uses_head) {
      head = head_output(top, x.shape());
      seeds.head = Tensor3(head.raw.channels(), head.raw.height(), head.raw.width());
    }
    const double loss = objective.evaluate(ObjectiveInputs{feats, objective.uses_head ? &head : nullptr}, seeds);
    if (!std::isfinite(loss)) throw NonFiniteError("loss", "input_gradient: objective returned a non-finite loss");

    std::vector<nn::Batch> layer_seeds;
    layer_seeds.reserve(objective.layers.size() + 1);
    toy::ToyNetwork::Seeds s;
    for (const auto& l : objective.layers) {
      const std::size_t d = depth_of(l);
      const Tensor3& g = seeds.features.at(l.name);
      require_same_shape(g, feats.at(l.name), "input_gradient seed");
      layer_seeds.push_back(nn::Batch::from_tensor(g));
      if (s.layers[d]) {
        throw ValidationError("input_gradient: layer '" + l.name + "' listed twice in objective");
      }
      s.layers[d] = &layer_seeds.back();
    }
    nn::Batch head_seed;
    if (objective.uses_head) {
      require_same_shape(seeds.head, head.raw, "input_gradient head seed");
      head_seed = nn::Batch::from_tensor(seeds.head);
      switch (task_) {
        case TaskKind::classification: s.classifier = &head_seed; break;
        case TaskKind::segmentation: s.segmentation = &head_seed; break;
        case TaskKind::detection: s.detection = &head_seed; break;
        case TaskKind::none: break;
      }
    }
    nn::Batch g = net_->backward(tape, s);
    if (!all_finite(g.data)) throw NonFiniteError("input", "input_gradient: non-finite gradient at input");
    return {loss, g.to_tensor()};
  }

 private:
  std::size_t depth_of(const LayerId& layer) const {
    const auto& names = toy::ToyNetwork::kLayerNames;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (layer.name == names[i]) return i;
    }
    require_layer(layer);
    return 0;
  }

  static Tensor3 activation(const toy::ToyNetwork::Tape& tape, std::size_t depth) {
    return depth == 0 ? tape.input.to_tensor() : tape.blocks[depth - 1].out.to_tensor();
  }

  TaskOutput head_output(const nn::Batch& feat, Shape2 input) const {
    TaskOutput out;
    out.kind = task_;
    out.height = input.height;
    out.width = input.width;
    switch (task_) {
      case TaskKind::classification: {
        out.raw = net_->classifier_logits(feat).to_tensor();
        out.scores.assign(out.raw.values().begin(), out.raw.values().end());
        break;
      }
      case TaskKind::segmentation: {
        out.raw = net_->segmentation_logits(feat).to_tensor();
        out.class_map.assign(out.raw.plane(), 0);
        for (std::size_t p = 0; p < out.raw.plane(); ++p) {
          std::size_t best = 0;
          for (std::size_t k = 1; k < out.raw.channels(); ++k) {
            if (out.raw.channel(k)[p] > out.raw.channel(best)[p]) best = k;
          }
          out.class_map[p] = static_cast<int>(best);
        }
        break;
      }
      case TaskKind::detection: {
        out.raw = net_->detection_grid(feat).to_tensor();
        out.detections = net_->decode_detections(out.raw);
        break;
      }
      case TaskKind::none: break;
    }
    return out;
  }

  std::shared_ptr<const toy::ToyNetwork> net_;
  TaskKind task_;
};

/// Backbones the registry knows about. Only "toy" ships with this build;
/// the others need pretrained full-scale adapters.
inline const std::vector<std::string>& known_backbones() {
  static const std::vector<std::string> ids{"toy", "resnet50", "resnet18", "darknet19", "yolov2", "bisenet"};
  return ids;
}

inline ModelHandle load_model(const std::string& backbone_id, const std::filesystem::path& checkpoint, TaskKind task) {
  if (backbone_id == "toy") {
    return ToyModel::make(std::make_shared<const toy::ToyNetwork>(toy::load_checkpoint(checkpoint)), task);
  }
  if (std::find(known_backbones().begin(), known_backbones().end(), backbone_id) != known_backbones().end()) {
    throw ValidationError("backbone '" + backbone_id + "' needs a full-scale adapter that is not part of this build");
  }
  throw ValidationError("unknown backbone '" + backbone_id + "'");
}

/// Loads toy checkpoints in the given order; all must share the first one's
/// architecture.
inline std::vector<ModelHandle> load_checkpoint_sequence(const std::vector<std::filesystem::path>& paths,
                                                         TaskKind task = TaskKind::none) {
  std::vector<ModelHandle> out;
  nlohmann::json arch;
  for (const auto& p : paths) {
    auto net = std::make_shared<const toy::ToyNetwork>(toy::load_checkpoint(p));
    if (out.empty()) {
      arch = net->config().architecture();
    } else if (net->config().architecture() != arch) {
      throw ValidationError("checkpoint " + p.string() + " has an incompatible architecture");
    }
    out.push_back(ToyModel::make(std::move(net), task));
  }
  return out;
}

}  // namespace carpet

#endif  // CARPET_MODEL_TOY_MODEL_HPP
