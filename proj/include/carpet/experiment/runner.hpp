#ifndef CARPET_EXPERIMENT_RUNNER_HPP
#define CARPET_EXPERIMENT_RUNNER_HPP

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/attack/forge.hpp"
#include "carpet/core/patch_io.hpp"
#include "carpet/eval/harness.hpp"
#include "carpet/experiment/config.hpp"
#include "carpet/experiment/manifest.hpp"
#include "carpet/forensics/forensics.hpp"
#include "carpet/model/toy_model.hpp"

namespace carpet {

namespace fs = std::filesystem;

/// Exclusive per-directory lock, released on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".carpet.lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw RuntimeFailure("output directory " + dir.string() + " is locked by another run (remove " +
                           path_.string() + " if stale)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string file_sha256(const fs::path& p) { return sha256_hex(read_file_bytes(p)); }

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + p.string());
  out << text;
  if (!out) throw RuntimeFailure("write failed for " + p.string());
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Re-throws a library error with the config digest prepended, keeping
/// its exit-code class.
template <class F>
auto with_digest(const std::string& digest, F&& body) -> decltype(body()) {
  const std::string tag = "[config " + digest.substr(0, 12) + "] ";
  try {
    return body();
  } catch (const ValidationError& e) {
    throw ValidationError(tag + e.what());
  } catch (const RuntimeFailure& e) {
    throw RuntimeFailure(tag + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    throw RuntimeFailure(tag + e.what());
  }
}

}  // namespace detail

/// Append-only JSON-lines record of completed runs.
class Ledger {
 public:
  explicit Ledger(const fs::path& dir) : path_(dir / "ledger.jsonl") {}

  std::vector<nlohmann::json> rows() const {
    std::vector<nlohmann::json> out;
    std::ifstream in(path_);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        out.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::parse_error&) {
        throw ValidationError(path_.string() + ":" + std::to_string(n) + ": malformed ledger row");
      }
    }
    return out;
  }

  /// Latest row for a digest and command, if any.
  std::optional<nlohmann::json> find(const std::string& digest, const std::string& command) const {
    std::optional<nlohmann::json> hit;
    for (auto& r : rows()) {
      if (r.value("digest", "") == digest && r.value("command", "") == command) hit = std::move(r);
    }
    return hit;
  }

  /// True when a matching row exists and all its artifacts are on disk.
  bool completed(const std::string& digest, const std::string& command) const {
    const auto row = find(digest, command);
    if (!row) return false;
    for (const auto& p : row->at("artifact_paths")) {
      if (!fs::exists(path_.parent_path() / p.get<std::string>())) return false;
    }
    return true;
  }

  void append(const std::string& digest, const std::string& command, const std::vector<fs::path>& artifacts,
              const nlohmann::json& metrics = nullptr) const {
    nlohmann::json row{{"timestamp", detail::utc_timestamp()}, {"digest", digest}, {"command", command}};
    auto paths = nlohmann::json::array();
    auto hashes = nlohmann::json::object();
    for (const auto& a : artifacts) {
      const std::string rel = fs::relative(a, path_.parent_path()).generic_string();
      paths.push_back(rel);
      hashes[rel] = detail::file_sha256(a);
    }
    row["artifact_paths"] = paths;
    row["artifact_sha256"] = hashes;
    if (!metrics.is_null()) row["metrics"] = metrics;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw RuntimeFailure("cannot append to " + path_.string());
    out << row.dump() << "\n";
  }

 private:
  fs::path path_;
};

inline ModelHandle load_model(const ModelRef& ref) { return load_model(ref.backbone, ref.checkpoint, ref.task); }

inline LoadedSet load_split(const DataRef& ref) { return load_entries(load_manifest(ref.manifest), ref.split, ref.limit); }

/// Task labels of a loaded set, in the variant form the task loss takes.
inline std::vector<TaskLabel> task_labels(const LoadedSet& set) {
  std::vector<TaskLabel> out;
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    switch (set.task) {
      case TaskKind::classification: out.emplace_back(set.labels[i]); break;
      case TaskKind::detection: out.emplace_back(set.boxes[i]); break;
      case TaskKind::segmentation: out.emplace_back(set.masks[i]); break;
      case TaskKind::none: throw ValidationError("manifest has no task labels");
    }
  }
  return out;
}

struct RunOutcome {
  bool skipped = false;
  std::vector<fs::path> artifacts;
};

inline fs::path artifact_path(const ExperimentConfig& cfg, const fs::path& out) {
  return out / (cfg.crafts_patch() ? "patch.cbp" : "noise.cbp");
}

/// Crafts the configured attack and writes the CBP1 artifact, a PNG
/// preview, the loss trace, and a ledger row.
inline RunOutcome run_craft(const ExperimentConfig& cfg, const fs::path& out, bool force = false,
                            std::ostream& log = std::clog) {
  return detail::with_digest(cfg.digest, [&] {
    DirectoryLock lock(out);
    const Ledger ledger(out);
    RunOutcome res;
    if (!force && ledger.completed(cfg.digest, "craft")) {
      log << "craft: config " << cfg.digest.substr(0, 12) << " already completed; use --force to rerun\n";
      res.skipped = true;
      return res;
    }
    const ModelHandle model = load_model(cfg.model);
    const LoadedSet train = load_split(cfg.train);
    FeatureCache cache;
    CraftHooks hooks;
    hooks.cache = &cache;
    hooks.on_step = [&](const StepLoss& s) { log << "step " << s.step << " loss " << s.mean_loss << "\n"; };

    nlohmann::json meta{{"config_digest", cfg.digest},
                        {"attack", to_string(cfg.attack)},
                        {"model_digest", model->digest()},
                        {"backbone", model->backbone_id()}};
    const fs::path artifact = artifact_path(cfg, out);
    const fs::path preview = out / (cfg.crafts_patch() ? "patch.png" : "noise.png");
    std::vector<StepLoss> trace;
    if (cfg.crafts_patch()) {
      PatchResult r;
      if (cfg.attack == AttackKind::task_patch) {
        const auto labels = task_labels(train);
        r = craft_task_patch(*model, train.images, labels, *cfg.placement, cfg.craft, hooks);
      } else if (cfg.attack == AttackKind::forced) {
        r = craft_forced_patch(*model, train.images, *cfg.placement, cfg.target, cfg.craft, hooks);
      } else {
        r = craft_carpet_patch(*model, train.images, *cfg.placement, cfg.target, cfg.craft, hooks);
      }
      meta["placement"] = cfg.raw.at("placement");
      write_cbp1(artifact, to_file(Patch(r.patch.tensor(), to_string(cfg.attack)), meta));
      write_png(preview, r.patch.tensor());
      trace = std::move(r.trace);
    } else {
      NoiseResult r = craft_feature_noise_tmifgsm(*model, train.images, cfg.target, cfg.noise, hooks);
      write_cbp1(artifact, to_file(r.noise, meta));
      write_png(preview, r.noise.tensor(), 0.5, 0.5 / cfg.noise.epsilon);
      trace = std::move(r.trace);
    }
    const fs::path trace_path = out / "loss_trace.json";
    detail::write_json(trace_path, {{"config_digest", cfg.digest}, {"trace", trace_to_json(trace)}});
    res.artifacts = {artifact, preview, trace_path};
    ledger.append(cfg.digest, "craft", res.artifacts);
    return res;
  });
}

/// Reads a CBP1 artifact back as a perturbation at the config's placement.
inline Perturbation load_perturbation(const ExperimentConfig& cfg, const PerturbationFile& file) {
  if (file.metadata.value("kind", "") == "noise") return Perturbation::of(noise_from_file(file));
  if (!cfg.placement) throw ValidationError("patch artifact needs a placement in the config");
  return Perturbation::of(patch_from_file(file), *cfg.placement);
}

inline void require_artifact_digest(const ExperimentConfig& cfg, const PerturbationFile& file, bool force,
                                    const fs::path& path) {
  const std::string d = file.metadata.value("config_digest", "");
  if (d != cfg.digest && !force) {
    throw ValidationError("artifact " + path.string() + " was produced by config " + (d.empty() ? "?" : d.substr(0, 12)) +
                          "; pass --force to evaluate it anyway");
  }
}

/// Clean and attacked metrics on the eval split, at the training placement.
inline EvalReport run_eval(const ExperimentConfig& cfg, const fs::path& artifact, const fs::path& out,
                           bool force = false, std::ostream& log = std::clog) {
  return detail::with_digest(cfg.digest, [&] {
    DirectoryLock lock(out);
    const Ledger ledger(out);
    const fs::path report_path = out / "report.json";
    if (!force && ledger.completed(cfg.digest, "eval")) {
      log << "eval: config " << cfg.digest.substr(0, 12) << " already completed; use --force to rerun\n";
      return nlohmann::json::parse(detail::read_file_bytes(report_path)).get<EvalReport>();
    }
    const std::string bytes = detail::read_file_bytes(artifact);
    const PerturbationFile file = decode_cbp1(bytes);
    require_artifact_digest(cfg, file, force, artifact);
    const Perturbation attack = load_perturbation(cfg, file);
    const ModelHandle model = load_model(cfg.model);
    if (model->task_kind() == TaskKind::none) throw ValidationError("eval: config model has no task head");
    const LoadedSet set = load_split(cfg.eval);
    if (set.task != model->task_kind()) {
      throw ValidationError("eval: manifest task " + to_string(set.task) + " does not match model task " +
                            to_string(model->task_kind()));
    }
    EvalReport r;
    switch (set.task) {
      case TaskKind::classification: r = eval_classification(*model, set.images, set.labels, attack); break;
      case TaskKind::detection: r = eval_detection_contextual(*model, set.images, set.boxes, attack, cfg.eval_cfg); break;
      case TaskKind::segmentation: r = eval_segmentation(*model, set.images, set.masks, attack); break;
      case TaskKind::none: break;
    }
    r.config_digest = cfg.digest;
    r.attack_digest = sha256_hex(bytes);
    detail::write_json(report_path, r);
    ledger.append(cfg.digest, "eval", {report_path}, {{"clean", r.clean}, {"attacked", r.attacked}});
    return r;
  });
}

/// Everything a figure-data bundle is computed from.
struct ForensicsInputs {
  ModelHandle model;
  std::vector<Image> images;
  AttackApplier attack;
  std::optional<AttackApplier> reference;  // unforced attack for relative profiles
  ModelHandle hidden;                      // second backbone for ratio maps
  std::vector<ModelHandle> checkpoints;    // drift sequence
  std::optional<std::pair<Patch, Placement>> patch;
  std::vector<std::size_t> forced_channels;
};

/// Writes the CSV/JSON figure data into `dir` and returns bundle.json.
inline nlohmann::json write_forensics_bundle(const ForensicsInputs& in, const ForensicsConfig& fc, const fs::path& dir,
                                             const std::string& config_digest, const std::string& attack_digest) {
  fs::create_directories(dir);
  const LayerId layer{fc.layer};
  std::vector<std::pair<std::string, fs::path>> files;

  const FrequencyBins bins = frequency_bins(*in.model, layer, in.images, in.attack, fc.top_k, fc.threshold);
  {
    // Rows in descending frequency; `index` is the rank.
    std::string csv = "channel,index,value,bin\n";
    std::size_t rank = 0;
    for (std::size_t c : top_k_indices(bins.frequency, bins.frequency.size())) {
      const double p = bins.frequency[c];
      csv += std::to_string(c) + "," + std::to_string(rank++) + "," + detail::num(p) + "," +
             (p >= bins.threshold ? "frequent" : (p > 0.0 ? "occasional" : "not_selected")) + "\n";
    }
    detail::write_text(dir / "frequency_bins.csv", csv);
    files.emplace_back("frequency_bins.csv", dir / "frequency_bins.csv");
    detail::write_json(dir / "frequency_bins.json", {{"layer", fc.layer},
                                                    {"k", bins.k},
                                                    {"threshold", bins.threshold},
                                                    {"n_images", bins.n_images},
                                                    {"frequent", bins.frequent},
                                                    {"occasional", bins.occasional},
                                                    {"not_selected", bins.not_selected}});
    files.emplace_back("frequency_bins.json", dir / "frequency_bins.json");
  }

  const ChannelDistanceProfile profile = channel_distance_profile(*in.model, layer, in.images, in.attack);
  std::vector<std::size_t> highlight = fc.highlight;
  if (highlight.empty()) highlight = in.forced_channels;
  if (highlight.empty()) {
    for (std::size_t c = 0; c < bins.frequency.size(); ++c) {
      if (bins.frequency[c] >= bins.threshold) highlight.push_back(c);
    }
  }
  {
    const auto mark = profile.highlight(highlight);
    std::string csv = "channel,index,value,highlight\n";
    std::size_t rank = 0;
    for (const auto& [c, v] : profile.sorted()) {
      csv += std::to_string(c) + "," + std::to_string(rank++) + "," + detail::num(v) + "," + (mark[c] ? "1" : "0") + "\n";
    }
    detail::write_text(dir / "profile.csv", csv);
    files.emplace_back("profile.csv", dir / "profile.csv");
  }

  if (in.reference) {
    const auto unforced = channel_distance_profile(*in.model, layer, in.images, *in.reference);
    const auto rel = relative_profile(profile, unforced);
    std::string csv = "channel,index,value,forced,unforced\n";
    std::size_t rank = 0;
    for (std::size_t c : top_k_indices(rel, rel.size())) {
      csv += std::to_string(c) + "," + std::to_string(rank++) + "," + detail::num(rel[c]) + "," +
             detail::num(profile.mean_distance[c]) + "," + detail::num(unforced.mean_distance[c]) + "\n";
    }
    detail::write_text(dir / "relative_profile.csv", csv);
    files.emplace_back("relative_profile.csv", dir / "relative_profile.csv");
  }

  const auto map_json = [&](const ImpactMap& m) {
    return nlohmann::json{{"layer", fc.layer}, {"height", m.height}, {"width", m.width}, {"values", m.values}};
  };
  const ImpactMap whitebox = spatial_impact_map(*in.model, layer, in.images, in.attack);
  detail::write_json(dir / "impact_map.json", map_json(whitebox));
  files.emplace_back("impact_map.json", dir / "impact_map.json");
  if (in.hidden) {
    const ImpactMap hidden = spatial_impact_map(*in.hidden, layer, in.images, in.attack);
    detail::write_json(dir / "hidden_impact_map.json", map_json(hidden));
    detail::write_json(dir / "ratio_map.json", map_json(ratio_map(hidden, whitebox)));
    files.emplace_back("hidden_impact_map.json", dir / "hidden_impact_map.json");
    files.emplace_back("ratio_map.json", dir / "ratio_map.json");
  }

  if (!in.checkpoints.empty()) {
    if (!in.patch) throw ValidationError("forensics: checkpoint drift needs a patch artifact");
    const auto baseline = top_k_indices(profile.mean_distance, std::min(fc.drift_top, profile.mean_distance.size()));
    const auto drift =
        checkpoint_drift(in.checkpoints, layer, in.images, in.patch->first, in.patch->second, baseline);
    auto arr = nlohmann::json::array();
    for (std::size_t i = 0; i < drift.size(); ++i) {
      arr.push_back({{"checkpoint", i},
                     {"overlap", drift[i].overlap},
                     {"top_set", drift[i].top_set},
                     {"mean_distance", drift[i].profile.mean_distance}});
    }
    detail::write_json(dir / "drift.json", {{"layer", fc.layer}, {"baseline_top_set", baseline}, {"points", arr}});
    files.emplace_back("drift.json", dir / "drift.json");
  }

  nlohmann::json bundle{{"config_digest", config_digest},
                        {"attack_digest", attack_digest},
                        {"layer", fc.layer},
                        {"n_images", in.images.size()}};
  for (const auto& [name, path] : files) bundle["files"][name] = detail::file_sha256(path);
  detail::write_json(dir / "bundle.json", bundle);
  return bundle;
}

/// Figure-data bundle for an attack artifact; `reference` is an optional
/// unforced artifact for relative profiles.
inline nlohmann::json run_forensics(const ExperimentConfig& cfg, const fs::path& artifact,
                                    const std::optional<fs::path>& reference, const fs::path& out, bool force = false,
                                    std::ostream& log = std::clog) {
  return detail::with_digest(cfg.digest, [&] {
    DirectoryLock lock(out);
    const Ledger ledger(out);
    const fs::path dir = out / "forensics";
    if (!force && ledger.completed(cfg.digest, "forensics")) {
      log << "forensics: config " << cfg.digest.substr(0, 12) << " already completed; use --force to rerun\n";
      return nlohmann::json::parse(detail::read_file_bytes(dir / "bundle.json"));
    }
    if (cfg.forensics.layer.empty()) throw ValidationError("forensics: no layer configured");
    const std::string bytes = detail::read_file_bytes(artifact);
    const PerturbationFile file = decode_cbp1(bytes);
    require_artifact_digest(cfg, file, force, artifact);
    const Perturbation attack = load_perturbation(cfg, file);

    ForensicsInputs in;
    in.model = load_model(cfg.model);
    in.images = load_split(DataRef{cfg.eval.manifest, cfg.eval.split, cfg.forensics.images}).images;
    in.attack = [attack](const Image& x) { return attack.apply(x); };
    if (reference) {
      const Perturbation ref = load_perturbation(cfg, read_cbp1(*reference));
      in.reference = [ref](const Image& x) { return ref.apply(x); };
    }
    if (cfg.forensics.hidden_model) in.hidden = load_model(*cfg.forensics.hidden_model);
    if (!cfg.forensics.checkpoints.empty()) in.checkpoints = load_checkpoint_sequence(cfg.forensics.checkpoints);
    if (const auto* p = std::get_if<Patch>(&attack.value)) in.patch.emplace(*p, *attack.placement);
    if (cfg.attack == AttackKind::forced) {
      for (const auto& t : cfg.target.targets) {
        if (t.layer.name == cfg.forensics.layer) in.forced_channels = t.channels.indices;
      }
    }
    auto bundle = write_forensics_bundle(in, cfg.forensics, dir, cfg.digest, sha256_hex(bytes));
    std::vector<fs::path> paths{dir / "bundle.json"};
    for (const auto& [name, _] : bundle.at("files").items()) paths.push_back(dir / name);
    ledger.append(cfg.digest, "forensics", paths);
    return bundle;
  });
}

struct VerifyResult {
  std::size_t checked = 0;
  std::vector<std::string> problems;
  bool ok() const { return checked > 0 && problems.empty(); }
};

/// Re-hashes every artifact the ledger records for this config and checks
/// the config digest embedded in each one.
inline VerifyResult verify(const ExperimentConfig& cfg, const fs::path& out) {
  VerifyResult v;
  const Ledger ledger(out);
  for (const char* command : {"craft", "eval", "forensics"}) {
    const auto row = ledger.find(cfg.digest, command);
    if (!row) continue;
    for (const auto& [rel, hash] : row->at("artifact_sha256").items()) {
      const fs::path p = out / rel;
      ++v.checked;
      if (!fs::exists(p)) {
        v.problems.push_back(rel + ": missing");
        continue;
      }
      const std::string bytes = detail::read_file_bytes(p);
      if (sha256_hex(bytes) != hash.get<std::string>()) v.problems.push_back(rel + ": content hash mismatch");
      // Other files are covered through the hashes listed in bundle.json.
      static const std::set<std::string> carriers{"patch.cbp", "noise.cbp", "report.json", "loss_trace.json",
                                                  "bundle.json"};
      if (!carriers.count(p.filename().string())) continue;
      std::string embedded;
      try {
        embedded = p.extension() == ".cbp" ? decode_cbp1(bytes).metadata.value("config_digest", "")
                                           : nlohmann::json::parse(bytes).value("config_digest", "");
      } catch (const std::exception& e) {
        v.problems.push_back(rel + ": unreadable (" + e.what() + ")");
        continue;
      }
      if (embedded != cfg.digest) v.problems.push_back(rel + ": does not embed this config's digest");
    }
  }
  if (v.checked == 0) v.problems.push_back("no ledger entries for config " + cfg.digest.substr(0, 12));
  return v;
}

}  // namespace carpet

#endif  // CARPET_EXPERIMENT_RUNNER_HPP
