#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "carpet/attack/forge.hpp"
#include "carpet/core/patch_io.hpp"
#include "support.hpp"

using namespace carpet;
using carpet::testing::random_image;
using carpet::testing::random_model;

namespace {

std::vector<Image> random_stream(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Image> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(random_image(rng, 32, 32, "s" + std::to_string(i)));
  return v;
}

CraftConfig small_cfg() {
  CraftConfig c;
  c.steps = 2;
  c.iterations_per_step = 20;
  c.updates_per_image = 5;
  c.learning_rate = 0.05;
  c.seed = 11;
  return c;
}

std::vector<Image> toy_images(std::size_t n, std::uint64_t seed) {
  toy::ToyDataConfig dc;
  dc.seed = seed;
  return toy::images_of(toy::make_toy_dataset(n, dc));
}

std::vector<int> toy_labels(std::size_t n, std::uint64_t seed) {
  toy::ToyDataConfig dc;
  dc.seed = seed;
  return toy::labels_of(toy::make_toy_dataset(n, dc));
}

double accuracy_under(const Model& m, const std::vector<Image>& xs, const std::vector<int>& ys,
                      const std::function<Image(const Image&)>& attack) {
  std::vector<Image> adv;
  for (const auto& x : xs) adv.push_back(attack(x));
  return toy::accuracy(m, adv, ys);
}

const Placement kCorner = Placement::top_left(1, 1, 10, 10);

}  // namespace

TEST(CraftConfig, Invariants) {
  CraftConfig c;
  EXPECT_NO_THROW(c.validate());
  c.steps = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.iterations_per_step = 1005;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.learning_rate = -0.1;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_EQ(CraftConfig{}.minibatches_per_step(), 100u);
}

TEST(NoiseCraftConfig, Invariants) {
  NoiseCraftConfig n;
  EXPECT_NEAR(n.effective_step(), 0.8 / 255.0, 1e-15);
  n.step_size = 2 * n.epsilon;
  EXPECT_THROW(n.validate(), ValidationError);
  n = {};
  n.epsilon = 0.0;
  EXPECT_THROW(n.validate(), ValidationError);
}

TEST(CarpetPatch, ZeroLearningRateKeepsInitialization) {
  const auto m = random_model();
  const auto stream = random_stream(3, 1);
  auto cfg = small_cfg();
  cfg.learning_rate = 0.0;
  const auto spec = FeatureTargetSpec::single("block3");
  const auto r = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  EXPECT_TRUE(r.patch.tensor() == Tensor3(3, 10, 10, 0.0));

  cfg.init = PatchInit::uniform_random;
  const auto a = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  cfg.steps = 1;
  cfg.iterations_per_step = 5;
  const auto b = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  EXPECT_TRUE(a.patch.tensor() == b.patch.tensor());
  EXPECT_FALSE(a.patch.tensor() == Tensor3(3, 10, 10, 0.0));
}

TEST(CarpetPatch, UpdateCountAndUnitRangeEveryIterate) {
  const auto m = random_model();
  const auto stream = random_stream(4, 2);
  auto cfg = small_cfg();
  cfg.learning_rate = 5.0;  // large enough to hit the clip often
  std::size_t updates = 0;
  bool in_range = true, clipped = false;
  CraftHooks hooks;
  hooks.on_update = [&](std::size_t, const Tensor3& t) {
    ++updates;
    for (double v : t.values()) {
      in_range = in_range && v >= 0.0 && v <= 1.0;
      clipped = clipped || v == 1.0;
    }
  };
  const auto r = craft_carpet_patch(*m, stream, kCorner, FeatureTargetSpec::single("block3"), cfg, hooks);
  EXPECT_EQ(updates, cfg.steps * cfg.iterations_per_step);
  EXPECT_EQ(r.trace.size(), cfg.steps);
  EXPECT_TRUE(in_range);
  EXPECT_TRUE(clipped);
}

TEST(CarpetPatch, DeterministicForFixedSeed) {
  const auto m = random_model();
  const auto stream = random_stream(5, 3);
  const auto spec = FeatureTargetSpec::single("block2");
  auto cfg = small_cfg();
  cfg.init = PatchInit::uniform_random;
  const auto a = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  const auto b = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  EXPECT_EQ(encode_cbp1(to_file(a.patch)), encode_cbp1(to_file(b.patch)));
  cfg.seed = 12;
  const auto c = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  EXPECT_NE(encode_cbp1(to_file(a.patch)), encode_cbp1(to_file(c.patch)));
}

TEST(CarpetPatch, LossGrowsOnSingleImage) {
  const auto m = carpet::testing::trained_model();
  const auto stream = toy_images(1, 4);
  const auto spec = FeatureTargetSpec::single("block3");
  CraftConfig cfg;
  cfg.steps = 1;
  cfg.iterations_per_step = 200;
  cfg.updates_per_image = 10;
  const auto masks = make_feature_masks(*m, spec, stream[0].shape(), kCorner);
  const auto r = craft_carpet_patch(*m, stream, kCorner, spec, cfg);
  const double before = feature_loss(*m, stream[0], apply_patch(stream[0], Patch(Tensor3(3, 10, 10, 0.0)), kCorner),
                                     spec, masks);
  const double after = feature_loss(*m, stream[0], apply_patch(stream[0], r.patch, kCorner), spec, masks);
  EXPECT_GT(after, before);
}

TEST(CarpetPatch, PixelsOutsidePatchUntouched) {
  const auto m = random_model();
  auto stream = random_stream(3, 5);
  const auto copy = stream;
  const auto r = craft_carpet_patch(*m, stream, kCorner, FeatureTargetSpec::single("block3"), small_cfg());
  const Rect rect = kCorner.resolve({32, 32});
  for (std::size_t n = 0; n < stream.size(); ++n) {
    EXPECT_TRUE(stream[n].tensor() == copy[n].tensor());
    const Image adv = apply_patch(stream[n], r.patch, kCorner);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < 32; ++y) {
        for (std::size_t x = 0; x < 32; ++x) {
          if (rect.contains(y, x)) continue;
          ASSERT_EQ(adv.tensor()(c, y, x), copy[n].tensor()(c, y, x));
        }
      }
    }
  }
}

TEST(CarpetPatch, ErrorsOnBadInput) {
  const auto m = random_model();
  const auto spec = FeatureTargetSpec::single("block3");
  EXPECT_THROW(craft_carpet_patch(*m, std::vector<Image>{}, kCorner, spec, small_cfg()), ValidationError);
  EXPECT_THROW(craft_carpet_patch(*m, random_stream(2, 1), Placement::top_left(30, 30, 10, 10), spec, small_cfg()),
               ValidationError);
}

TEST(TaskPatch, ZeroLearningRateAndLabelChecks) {
  const auto m = random_model();
  const auto stream = random_stream(3, 6);
  std::vector<TaskLabel> labels{TaskLabel{1}, TaskLabel{2}, TaskLabel{3}};
  auto cfg = small_cfg();
  cfg.learning_rate = 0.0;
  EXPECT_TRUE(craft_task_patch(*m, stream, labels, kCorner, cfg).patch.tensor() == Tensor3(3, 10, 10, 0.0));
  labels.pop_back();
  EXPECT_THROW(craft_task_patch(*m, stream, labels, kCorner, cfg), ValidationError);
  EXPECT_THROW(craft_task_patch(*random_model(TaskKind::none), stream, {}, kCorner, cfg), ValidationError);
}

TEST(TaskPatch, NoBetterForTheModelThanRandomPatch) {
  const auto m = carpet::testing::trained_model();
  const auto train = toy_images(200, 31);
  const auto train_y = toy_labels(200, 31);
  std::vector<TaskLabel> labels;
  for (int y : train_y) labels.push_back(TaskLabel{y});
  CraftConfig cfg;
  cfg.steps = 2;
  cfg.iterations_per_step = 200;
  cfg.learning_rate = 0.05;
  const auto r = craft_task_patch(*m, train, labels, kCorner, cfg);

  const auto test = toy_images(300, 32);
  const auto test_y = toy_labels(300, 32);
  std::mt19937_64 rng(33);
  const Patch random_patch(carpet::testing::random_tensor(rng, 3, 10, 10));
  const double acc_task = accuracy_under(*m, test, test_y, [&](const Image& x) { return apply_patch(x, r.patch, kCorner); });
  const double acc_rand =
      accuracy_under(*m, test, test_y, [&](const Image& x) { return apply_patch(x, random_patch, kCorner); });
  std::printf("task patch %.3f, random patch %.3f\n", acc_task, acc_rand);
  EXPECT_LE(acc_task, acc_rand);
}

TEST(Tmifgsm, ProjectionHoldsAfterEveryUpdate) {
  const auto m = random_model();
  const auto stream = random_stream(4, 7);
  NoiseCraftConfig n;
  n.epsilon = 0.03;
  n.step_size = 0.02;
  n.steps = 3;
  std::size_t updates = 0;
  double worst = 0.0;
  CraftHooks hooks;
  hooks.on_update = [&](std::size_t, const Tensor3& t) {
    ++updates;
    worst = std::max(worst, max_abs(t.values()));
  };
  const auto r = craft_feature_noise_tmifgsm(*m, stream, FeatureTargetSpec::single("block3"), n, hooks);
  EXPECT_EQ(updates, 12u);
  EXPECT_LE(worst, n.epsilon);
  EXPECT_EQ(max_abs(r.noise.tensor().values()), n.epsilon);  // 0.02 steps saturate the clamp
}

TEST(Tmifgsm, ZeroStepsGiveZeroNoise) {
  const auto m = random_model();
  NoiseCraftConfig n;
  n.steps = 0;
  const auto r = craft_feature_noise_tmifgsm(*m, random_stream(2, 8), FeatureTargetSpec::single("block3"), n);
  EXPECT_TRUE(r.noise.tensor() == Tensor3(3, 32, 32, 0.0));
  EXPECT_TRUE(r.trace.empty());
}

TEST(Tmifgsm, WhiteboxNoiseLowersAccuracy) {
  const auto m = carpet::testing::trained_model();
  NoiseCraftConfig n;
  n.epsilon = 16.0 / 255.0;
  n.steps = 5;
  n.images_per_step = 40;
  const auto r = craft_feature_noise_tmifgsm(*m, toy_images(200, 41), FeatureTargetSpec::single("block3"), n);
  const auto test = toy_images(300, 42);
  const auto test_y = toy_labels(300, 42);
  const double clean = toy::accuracy(*m, test, test_y);
  const double adv = accuracy_under(*m, test, test_y, [&](const Image& x) { return apply_noise(x, r.noise); });
  std::printf("clean %.3f, noise %.3f\n", clean, adv);
  EXPECT_LT(adv, clean);
}

TEST(ForcedPatch, AllChannelsReproducesCarpetPatch) {
  const auto m = random_model();
  const auto stream = random_stream(3, 9);
  const auto spec = FeatureTargetSpec::single("block3");
  const auto a = craft_carpet_patch(*m, stream, kCorner, spec, small_cfg());
  const auto b = craft_forced_patch(*m, stream, kCorner, spec, small_cfg());
  EXPECT_EQ(encode_cbp1(to_file(a.patch)), encode_cbp1(to_file(b.patch)));
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].mean_loss, b.trace[i].mean_loss);
}

TEST(ForcedPatch, SingleChannelTraceMatchesExplicitLoss) {
  const auto m = random_model();
  const auto stream = random_stream(1, 10);
  const std::size_t k = 17;
  const auto spec = FeatureTargetSpec::single("block3", ChannelSet::Of({k}));
  auto cfg = small_cfg();
  cfg.steps = 1;
  cfg.iterations_per_step = 5;
  cfg.init = PatchInit::uniform_random;
  // iterates seen by each update: the initialization, then each hook value but the last
  std::vector<Tensor3> iterates;
  {
    auto zero_lr = cfg;
    zero_lr.learning_rate = 0.0;
    iterates.push_back(craft_forced_patch(*m, stream, kCorner, spec, zero_lr).patch.tensor());
  }
  CraftHooks hooks;
  hooks.on_update = [&](std::size_t, const Tensor3& t) { iterates.push_back(t); };
  const auto r = craft_forced_patch(*m, stream, kCorner, spec, cfg, hooks);
  iterates.pop_back();

  const LayerId l[] = {LayerId{"block3"}};
  const Tensor3 clean = m->extract_features(stream[0], l).at("block3");
  const auto masks = make_feature_masks(*m, spec, {32, 32}, kCorner);
  double sum = 0.0;
  for (const auto& t : iterates) {
    const Tensor3 adv = m->extract_features(apply_patch(stream[0], Patch(t), kCorner), l).at("block3");
    double sq = 0.0;
    for (std::size_t i = 0; i < adv.height(); ++i) {
      for (std::size_t j = 0; j < adv.width(); ++j) {
        const double d = (adv(k, i, j) - clean(k, i, j)) * masks.at("block3")(i, j);
        sq += d * d;
      }
    }
    sum += std::sqrt(sq);
  }
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_NEAR(r.trace[0].mean_loss, sum / 5.0, 1e-9 * std::max(1.0, sum));
}

TEST(ForcedPatch, EmptyOrOutOfRangeChannelSetRejected) {
  const auto m = random_model();
  const auto stream = random_stream(1, 11);
  EXPECT_THROW(craft_forced_patch(*m, stream, kCorner, FeatureTargetSpec::single("block3", ChannelSet::Of({})),
                                  small_cfg()),
               ValidationError);
  EXPECT_THROW(craft_forced_patch(*m, stream, kCorner, FeatureTargetSpec::single("block3", ChannelSet::Of({64})),
                                  small_cfg()),
               ValidationError);
  NoiseCraftConfig n;
  n.steps = 1;
  EXPECT_THROW(craft_forced_noise(*m, stream, FeatureTargetSpec::single("block3", ChannelSet::Of({})), n),
               ValidationError);
}
