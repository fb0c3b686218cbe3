// Library-level walk-through on the toy backbone: train (or load) a model,
// craft a feature-only patch, compare it with a random patch of the same
// size on both task heads, and list the channels it hits hardest.
//
//   toy_carpet_demo [checkpoint] [steps]
//
// A missing checkpoint file is trained and written to that path.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "carpet/attack/forge.hpp"
#include "carpet/eval/harness.hpp"
#include "carpet/forensics/forensics.hpp"
#include "carpet/model/training.hpp"

using namespace carpet;

int main(int argc, char** argv) {
  const std::filesystem::path ckpt = argc > 1 ? argv[1] : "toy.ckpt";
  const std::size_t steps = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 20;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  std::shared_ptr<const toy::ToyNetwork> net;
  if (std::filesystem::exists(ckpt)) {
    net = std::make_shared<const toy::ToyNetwork>(toy::load_checkpoint(ckpt));
  } else {
    auto fresh = std::make_shared<toy::ToyNetwork>(toy::ToyConfig{});
    const auto train = toy::make_toy_dataset(4000, {.seed = 1});
    toy::train_classifier(*fresh, train, {.epochs = 3});
    toy::train_dense_heads(*fresh, train, {.epochs = 10});
    toy::save_checkpoint(*fresh, ckpt);
    net = fresh;
    std::printf("trained %s in %.0fs\n", ckpt.c_str(), elapsed());
  }
  const auto cls = ToyModel::make(net, TaskKind::classification);
  const auto seg = ToyModel::make(net, TaskKind::segmentation);

  const auto test = toy::make_toy_dataset(1000, {.seed = 2});
  const auto images = toy::images_of(test);
  const auto labels = toy::labels_of(test);
  std::vector<std::vector<int>> masks;
  for (const auto& s : test) masks.push_back(s.mask);

  // No labels and no task head: only the block3 feature maps are pushed away.
  const Placement at = Placement::top_left(1, 1, 10, 10);
  CraftConfig cfg;
  cfg.steps = steps;
  CraftHooks hooks;
  hooks.on_step = [&](const StepLoss& s) {
    std::printf("step %3zu  feature loss %.3f  (%.0fs)\n", s.step, s.mean_loss, elapsed());
  };
  const auto attack_set = toy::images_of(toy::make_toy_dataset(2000, {.seed = 3}));
  const Patch carpet = craft_carpet_patch(*cls, attack_set, at, FeatureTargetSpec::single("block3"), cfg, hooks).patch;

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor3 noise(3, 10, 10);
  for (double& v : noise.values()) v = u(rng);
  const Patch random(noise);

  for (const auto& [name, p] : {std::pair{"carpet", &carpet}, std::pair{"random", &random}}) {
    const auto attack = Perturbation::of(*p, at);
    const auto c = eval_classification(*cls, images, labels, attack);
    const auto s = eval_segmentation(*seg, images, masks, attack);
    std::printf("%-7s top1 %6.2f -> %6.2f   seg mAcc %6.2f -> %6.2f\n", name, c.clean.at("top1"),
                c.attacked.at("top1"), s.clean.at("mAcc"), s.attacked.at("mAcc"));
  }

  const auto profile =
      channel_distance_profile(*cls, LayerId{"block3"}, std::span(images).first(64), patch_attack(carpet, at));
  const auto ranked = profile.sorted();
  std::printf("most disrupted block3 channels:");
  for (std::size_t i = 0; i < 8; ++i) std::printf(" %zu (%.2f)", ranked[i].first, ranked[i].second);
  std::printf("\n");
}
