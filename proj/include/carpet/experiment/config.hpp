#ifndef CARPET_EXPERIMENT_CONFIG_HPP
#define CARPET_EXPERIMENT_CONFIG_HPP

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/attack/forge.hpp"
#include "carpet/core/digest.hpp"
#include "carpet/eval/harness.hpp"

namespace carpet {

enum class AttackKind { carpet_patch, task_patch, tmifgsm_noise, forced };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::carpet_patch: return "carpet_patch";
    case AttackKind::task_patch: return "task_patch";
    case AttackKind::tmifgsm_noise: return "tmifgsm_noise";
    case AttackKind::forced: return "forced";
  }
  return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  for (auto k : {AttackKind::carpet_patch, AttackKind::task_patch, AttackKind::tmifgsm_noise, AttackKind::forced}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown attack kind '" + s + "' (carpet_patch, task_patch, tmifgsm_noise, forced)");
}

/// Compact dump with sorted keys.
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

inline std::string config_digest(const nlohmann::json& j) { return sha256_hex(canonical_json(j)); }

struct ModelRef {
  std::string backbone = "toy";
  std::filesystem::path checkpoint;
  TaskKind task = TaskKind::none;
};

struct DataRef {
  std::filesystem::path manifest;
  std::string split;
  std::size_t limit = 0;  // 0 = all entries
};

struct ForensicsConfig {
  std::string layer;  // defaults to the first target layer
  std::size_t top_k = 50;
  double threshold = 0.5;
  std::size_t images = 16;
  std::vector<std::size_t> highlight;  // empty: the frequent bin
  std::optional<ModelRef> hidden_model;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t drift_top = 10;
};

/// A parsed experiment config. Relative paths resolve against the config
/// file's directory. The digest covers the canonical form of the raw JSON
/// with the effective seed written back.
struct ExperimentConfig {
  nlohmann::json raw;
  std::string digest;
  std::uint64_t seed = 0;
  ModelRef model;
  AttackKind attack = AttackKind::carpet_patch;
  FeatureTargetSpec target;
  std::optional<Placement> placement;
  CraftConfig craft;
  NoiseCraftConfig noise;
  DataRef train, eval;
  EvalConfig eval_cfg;
  ForensicsConfig forensics;

  bool crafts_patch() const { return attack != AttackKind::tmifgsm_noise; }
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline Placement parse_placement(const nlohmann::json& j) {
  const auto size = j.at("size").get<std::vector<std::size_t>>();
  if (size.size() != 2) throw ValidationError("placement.size must be [h, w]");
  const std::string mode = j.value("mode", std::string("top_left_offset"));
  if (mode == "centered") return Placement::centered(size[0], size[1]);
  if (mode != "top_left_offset") throw ValidationError("unknown placement mode '" + mode + "'");
  const auto off = j.value("offset", std::vector<long>{0, 0});
  if (off.size() != 2) throw ValidationError("placement.offset must be [row, col]");
  return Placement::top_left(off[0], off[1], size[0], size[1]);
}

inline FeatureTargetSpec parse_target(const nlohmann::json& j) {
  FeatureTargetSpec spec;
  spec.squared = j.value("squared", false);
  for (const auto& l : j.at("layers")) {
    LayerTarget t;
    t.layer = LayerId{l.at("name").get<std::string>()};
    t.weight = l.value("weight", 1.0);
    if (l.contains("channels") && !(l.at("channels").is_string() && l.at("channels") == "all")) {
      t.channels = ChannelSet::Of(l.at("channels").get<std::vector<std::size_t>>());
    }
    spec.targets.push_back(std::move(t));
  }
  return spec;
}

inline ModelRef parse_model(const nlohmann::json& j, const std::filesystem::path& base) {
  ModelRef m;
  m.backbone = j.value("backbone", std::string("toy"));
  m.checkpoint = base / j.at("checkpoint").get<std::string>();
  if (j.contains("task")) m.task = parse_task_kind(j.at("task").get<std::string>());
  return m;
}

inline DataRef parse_data(const nlohmann::json& j, const std::filesystem::path& base) {
  DataRef d;
  d.manifest = base / j.at("manifest").get<std::string>();
  read_opt(j, "split", d.split);
  read_opt(j, "limit", d.limit);
  return d;
}

inline CraftConfig parse_craft(const nlohmann::json& j, std::uint64_t seed) {
  CraftConfig c;
  c.seed = seed;
  read_opt(j, "steps", c.steps);
  read_opt(j, "iterations_per_step", c.iterations_per_step);
  read_opt(j, "updates_per_image", c.updates_per_image);
  read_opt(j, "minibatch", c.minibatch);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "adam_lr", c.adam_lr);
  if (j.contains("optimizer")) {
    const auto o = j.at("optimizer").get<std::string>();
    if (o == "sgd_momentum") {
      c.optimizer_kind = OptimizerKind::sgd_momentum;
    } else if (o == "adam") {
      c.optimizer_kind = OptimizerKind::adam;
    } else {
      throw ValidationError("unknown optimizer '" + o + "' (sgd_momentum, adam)");
    }
  }
  if (j.contains("init")) {
    const auto i = j.at("init").get<std::string>();
    if (i == "zeros") {
      c.init = PatchInit::zeros;
    } else if (i == "uniform_random") {
      c.init = PatchInit::uniform_random;
    } else {
      throw ValidationError("unknown patch init '" + i + "' (zeros, uniform_random)");
    }
  }
  c.validate();
  return c;
}

inline NoiseCraftConfig parse_noise(const nlohmann::json& j, std::uint64_t seed) {
  NoiseCraftConfig n;
  n.seed = seed;
  read_opt(j, "random_start", n.random_start);
  read_opt(j, "epsilon", n.epsilon);
  read_opt(j, "step_size", n.step_size);
  read_opt(j, "steps", n.steps);
  read_opt(j, "momentum_decay", n.momentum_decay);
  read_opt(j, "images_per_step", n.images_per_step);
  n.validate();
  return n;
}

}  // namespace detail

/// Parses a config object. `seed_override` replaces the config's seed (and
/// therefore its digest).
inline ExperimentConfig parse_config(nlohmann::json raw, const std::filesystem::path& base,
                                     std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (!raw.is_object()) throw ValidationError("config must be a JSON object");
  if (seed_override) raw["seed"] = *seed_override;
  ExperimentConfig c;
  try {
    c.seed = raw.value("seed", std::uint64_t{0});
    c.model = detail::parse_model(raw.at("model"), base);
    c.attack = parse_attack_kind(raw.at("attack").get<std::string>());
    if (raw.contains("target")) c.target = detail::parse_target(raw.at("target"));
    if (raw.contains("placement")) c.placement = detail::parse_placement(raw.at("placement"));
    c.craft = detail::parse_craft(raw.value("craft", nlohmann::json::object()), c.seed);
    c.noise = detail::parse_noise(raw.value("noise", nlohmann::json::object()), c.seed);
    c.train = detail::parse_data(raw.at("train"), base);
    c.eval = raw.contains("eval") ? detail::parse_data(raw.at("eval"), base) : c.train;
    if (raw.contains("eval")) {
      const auto& e = raw.at("eval");
      detail::read_opt(e, "conf_threshold", c.eval_cfg.conf_threshold);
      detail::read_opt(e, "nms_iou", c.eval_cfg.nms_iou);
      detail::read_opt(e, "match_iou", c.eval_cfg.match_iou);
      if (e.contains("ap")) c.eval_cfg.ap = parse_ap_interpolation(e.at("ap").get<std::string>());
    }
    c.eval_cfg.validate();
    if (raw.contains("forensics")) {
      const auto& f = raw.at("forensics");
      detail::read_opt(f, "layer", c.forensics.layer);
      detail::read_opt(f, "top_k", c.forensics.top_k);
      detail::read_opt(f, "threshold", c.forensics.threshold);
      detail::read_opt(f, "images", c.forensics.images);
      detail::read_opt(f, "highlight", c.forensics.highlight);
      detail::read_opt(f, "drift_top", c.forensics.drift_top);
      if (f.contains("hidden_model")) c.forensics.hidden_model = detail::parse_model(f.at("hidden_model"), base);
      for (const auto& p : f.value("checkpoints", std::vector<std::string>{})) c.forensics.checkpoints.push_back(base / p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (c.attack != AttackKind::task_patch && c.target.targets.empty()) {
    throw ValidationError("config: attack '" + to_string(c.attack) + "' needs a \"target\" spec");
  }
  if (c.crafts_patch() && !c.placement) throw ValidationError("config: patch attacks need a \"placement\"");
  if (c.attack == AttackKind::forced) {
    for (const auto& t : c.target.targets) {
      if (t.channels.all || t.channels.indices.empty()) {
        throw ValidationError("config: forced attacks need explicit channel lists");
      }
    }
  }
  if (c.forensics.layer.empty() && !c.target.targets.empty()) c.forensics.layer = c.target.targets.front().layer.name;
  c.raw = std::move(raw);
  c.digest = config_digest(c.raw);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  nlohmann::json raw;
  try {
    raw = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return parse_config(std::move(raw), path.parent_path(), seed_override);
}

}  // namespace carpet

#endif  // CARPET_EXPERIMENT_CONFIG_HPP
