// Command-line front end: craft, eval, forensics, verify, manifest-check,
// plus toy-data / toy-train helpers for the bundled toy backbone.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "carpet/experiment/runner.hpp"
#include "carpet/experiment/toy_dataset.hpp"
#include "carpet/model/training.hpp"

namespace fs = std::filesystem;
using namespace carpet;

namespace {

struct Common {
  fs::path config, out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_force = true) {
  cmd->add_option("--config", c.config, "experiment config JSON")->required();
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_option("--seed", c.seed, "override the config seed");
  if (with_force) cmd->add_flag("--force", c.force, "rerun even if the ledger has this config");
}

int run(int argc, char** argv) {
  CLI::App app{"carpet: feature-disruption patch attacks, forensics and evaluation"};
  app.require_subcommand(1);

  Common craft_o, eval_o, foren_o, verify_o;
  std::optional<fs::path> eval_artifact, foren_artifact, foren_reference;
  auto* craft = app.add_subcommand("craft", "craft the configured patch or noise");
  add_common(craft, craft_o);
  auto* eval = app.add_subcommand("eval", "clean and attacked metrics on the eval split");
  add_common(eval, eval_o);
  eval->add_option("--artifact", eval_artifact, "CBP1 artifact (default: the one craft wrote)");
  auto* foren = app.add_subcommand("forensics", "write the figure-data bundle");
  add_common(foren, foren_o);
  foren->add_option("--artifact", foren_artifact, "CBP1 artifact (default: the one craft wrote)");
  foren->add_option("--reference", foren_reference, "unforced CBP1 artifact for relative profiles");
  auto* ver = app.add_subcommand("verify", "re-hash artifacts and check embedded config digests");
  add_common(ver, verify_o, false);

  fs::path manifest_path;
  auto* mcheck = app.add_subcommand("manifest-check", "validate a JSON-lines dataset manifest");
  mcheck->add_option("manifest", manifest_path, "manifest path")->required();

  fs::path data_out;
  std::size_t n_train = 2000, n_eval = 1000;
  std::uint64_t data_seed = 3;
  std::string shift = "none";
  auto* tdata = app.add_subcommand("toy-data", "write a synthetic toy dataset with manifests");
  tdata->add_option("--out", data_out, "output directory")->required();
  tdata->add_option("--train", n_train, "train_attack split size");
  tdata->add_option("--eval", n_eval, "eval split size");
  tdata->add_option("--seed", data_seed, "generator seed (eval split uses seed + 1)");
  tdata->add_option("--shift", shift, "domain shift")->check(CLI::IsMember({"none", "color_texture"}));

  fs::path ckpt_out;
  std::size_t n_fit = 4000, epochs = 3, head_epochs = 10;
  std::uint64_t fit_seed = 1;
  auto* ttrain = app.add_subcommand("toy-train", "train the toy backbone and its three heads");
  ttrain->add_option("--out", ckpt_out, "checkpoint path")->required();
  ttrain->add_option("--images", n_fit, "training images");
  ttrain->add_option("--epochs", epochs, "classifier epochs");
  ttrain->add_option("--head-epochs", head_epochs, "dense-head epochs");
  ttrain->add_option("--seed", fit_seed, "data and initialization seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*craft) {
    const auto cfg = load_config(craft_o.config, craft_o.seed);
    const auto r = run_craft(cfg, craft_o.out, craft_o.force);
    for (const auto& p : r.artifacts) std::cout << p.string() << "\n";
  } else if (*eval) {
    const auto cfg = load_config(eval_o.config, eval_o.seed);
    const auto r = run_eval(cfg, eval_artifact.value_or(artifact_path(cfg, eval_o.out)), eval_o.out, eval_o.force);
    std::cout << nlohmann::json(r).dump(2) << "\n";
  } else if (*foren) {
    const auto cfg = load_config(foren_o.config, foren_o.seed);
    const auto b = run_forensics(cfg, foren_artifact.value_or(artifact_path(cfg, foren_o.out)), foren_reference,
                                 foren_o.out, foren_o.force);
    std::cout << b.dump(2) << "\n";
  } else if (*ver) {
    const auto cfg = load_config(verify_o.config, verify_o.seed);
    const auto v = verify(cfg, verify_o.out);
    for (const auto& p : v.problems) std::cout << "FAIL " << p << "\n";
    std::cout << (v.ok() ? "OK " : "MISMATCH ") << v.checked << " artifact(s) for config " << cfg.digest << "\n";
    return v.ok() ? 0 : 2;
  } else if (*mcheck) {
    const auto m = load_manifest(manifest_path);
    std::map<std::string, std::size_t> counts;
    for (const auto& e : m.entries) ++counts[e.split.empty() ? "(none)" : e.split];
    std::cout << to_string(m.task) << ": " << m.entries.size() << " entries";
    for (const auto& [s, n] : counts) std::cout << ", " << s << " " << n;
    std::cout << "\n";
  } else if (*tdata) {
    toy::write_toy_dataset(data_out, n_train, n_eval, data_seed,
                           shift == "color_texture" ? toy::DomainShift::color_texture : toy::DomainShift::none);
    std::cout << data_out.string() << "\n";
  } else if (*ttrain) {
    toy::ToyConfig tc;
    tc.seed = fit_seed;
    toy::ToyNetwork net(tc);
    toy::ToyDataConfig dc;
    dc.seed = fit_seed;
    const auto train = toy::make_toy_dataset(n_fit, dc);
    toy::TrainConfig cls_cfg;
    cls_cfg.epochs = epochs;
    toy::train_classifier(net, train, cls_cfg);
    toy::TrainConfig head_cfg = cls_cfg;
    head_cfg.epochs = head_epochs;
    toy::train_dense_heads(net, train, head_cfg);
    if (ckpt_out.has_parent_path()) fs::create_directories(ckpt_out.parent_path());
    toy::save_checkpoint(net, ckpt_out);
    dc.seed = fit_seed + 1000;
    const auto test = toy::make_toy_dataset(1000, dc);
    const auto model = ToyModel::make(std::make_shared<const toy::ToyNetwork>(net), TaskKind::classification);
    std::printf("%s: held-out accuracy %.2f%%\n", ckpt_out.c_str(),
                100.0 * toy::accuracy(*model, toy::images_of(test), toy::labels_of(test)));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
}
