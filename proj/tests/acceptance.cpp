// End-to-end acceptance run on the toy backbone. Prints one PASS/FAIL line
// per criterion and exits non-zero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "carpet/attack/forge.hpp"
#include "carpet/eval/harness.hpp"
#include "carpet/experiment/runner.hpp"
#include "carpet/experiment/toy_dataset.hpp"
#include "carpet/forensics/forensics.hpp"
#include "support.hpp"

using namespace carpet;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Fixture {
  std::shared_ptr<const toy::ToyNetwork> net;
  ModelHandle cls, seg;
  std::vector<toy::ToySample> test;
  std::vector<Image> test_images, attack_images;
  std::vector<int> test_labels;
  std::vector<std::vector<int>> test_masks;
  Placement placement = Placement::top_left(1, 1, 10, 10);  // 100 of 1024 pixels
  FeatureTargetSpec spec = FeatureTargetSpec::single("block3");
  CraftConfig craft;
  std::optional<Patch> carpet;  // crafted in criterion 4, reused later
};

Fixture make_fixture() {
  Fixture f;
  toy::ToyDataConfig dc;
  dc.seed = 1;
  const auto train = toy::make_toy_dataset(4000, dc);
  auto net = std::make_shared<toy::ToyNetwork>(toy::ToyConfig{});
  toy::TrainConfig tc;
  tc.epochs = 3;
  toy::train_classifier(*net, train, tc);
  tc.epochs = 10;
  toy::train_dense_heads(*net, train, tc);
  f.net = net;
  f.cls = ToyModel::make(net, TaskKind::classification);
  f.seg = ToyModel::make(net, TaskKind::segmentation);
  dc.seed = 2;
  f.test = toy::make_toy_dataset(1000, dc);
  f.test_images = toy::images_of(f.test);
  f.test_labels = toy::labels_of(f.test);
  for (const auto& s : f.test) f.test_masks.push_back(s.mask);
  dc.seed = 3;
  f.attack_images = toy::images_of(toy::make_toy_dataset(2000, dc));
  f.craft.steps = 20;
  f.craft.seed = 17;
  return f;
}

double top1(const Fixture& f, const Perturbation& p) {
  return eval_classification(*f.cls, f.test_images, f.test_labels, p).attacked.at("top1");
}

Patch uniform_random_patch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Patch(carpet::testing::random_tensor(rng, 3, 10, 10));
}

Tensor3 features(const Model& m, const Image& x) {
  const LayerId l[] = {LayerId{"block3"}};
  return m.extract_features(x, l).at("block3");
}

bool rel_close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), 1e-12});
}

// 1. Gradient of the feature loss against central differences.
Verdict gradient_check(Fixture& f) {
  std::mt19937_64 rng(101);
  // toy scene squeezed into [0.05, 0.95] so +-h stays a valid image
  Tensor3 t = f.test_images[0].tensor();
  for (double& v : t.values()) v = 0.05 + 0.9 * v;
  const Image x(t);
  const Image x_adv = apply_patch(x, Patch(carpet::testing::random_tensor(rng, 3, 10, 10, 0.05, 0.95)), f.placement);
  const auto masks = make_feature_masks(*f.cls, f.spec, x.shape(), f.placement);
  const LayerId l[] = {LayerId{"block3"}};
  const auto clean = std::make_shared<const FeatureMapSet>(f.cls->extract_features(x, l));
  const auto g = f.cls->input_gradient(x_adv, feature_objective(clean, f.spec, masks));
  const auto s = carpet::testing::finite_difference_check(
      *f.net, x_adv, g.grad, [&](const Image& z) { return feature_loss(*f.cls, x, z, f.spec, masks); }, rng, 20, 1e-3);
  return {s.checked == 20 && s.norm_rel < 1e-3,
          fmt("rel err %.2e over %zu coords, worst single coord %.2e (%zu redrawn across kinks)", s.norm_rel, s.checked,
              s.max_rel, s.resampled)};
}

// 2. Identity gives zero; an all-zero mask gives zero.
Verdict identity_zero(Fixture& f) {
  std::mt19937_64 rng(102);
  FeatureTargetSpec all{{{LayerId{"input"}}, {LayerId{"block1"}}, {LayerId{"block2"}}, {LayerId{"block3"}}}, false};
  double worst_identity = 0.0, worst_zero_mask = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Image& x = f.test_images[static_cast<std::size_t>(i)];
    auto masks = make_feature_masks(*f.cls, all, x.shape(), f.placement);
    worst_identity = std::max(worst_identity, feature_loss(*f.cls, x, x, all, masks));
    for (auto& [_, m] : masks) std::fill(m.data.begin(), m.data.end(), 0);
    const Image other = carpet::testing::random_image(rng);
    worst_zero_mask = std::max(worst_zero_mask, feature_loss(*f.cls, x, other, all, masks));
  }
  return {worst_identity <= 1e-9 && worst_zero_mask == 0.0,
          fmt("max L(x,x) = %.1e, max zero-mask loss = %.1e", worst_identity, worst_zero_mask)};
}

// 3. Patch compositing partition and feature-mask footprint oracles.
Verdict compositing(Fixture&) {
  std::mt19937_64 rng(103);
  std::size_t bad_partition = 0, bad_masks = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t H = 1 + rng() % 40, W = 1 + rng() % 40, h = 1 + rng() % H, w = 1 + rng() % W;
    const std::size_t r = rng() % (H - h + 1), c = rng() % (W - w + 1);
    const Image x = carpet::testing::random_image(rng, H, W);
    const Patch d(carpet::testing::random_tensor(rng, 3, h, w));
    const Image out = apply_patch(x, d, Placement::top_left(static_cast<long>(r), static_cast<long>(c), h, w));
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t xx = 0; xx < W; ++xx) {
          const bool in = y >= r && y < r + h && xx >= c && xx < c + w;
          const double want = in ? d.tensor()(ch, y - r, xx - c) : x(ch, y, xx);
          bad_partition += out(ch, y, xx) != want;
        }
      }
    }
  }
  for (int t = 0; t < 50; ++t) {
    const std::size_t H = 8 + rng() % 60, W = 8 + rng() % 60, h = 1 + rng() % H, w = 1 + rng() % W;
    const std::size_t r = rng() % (H - h + 1), c = rng() % (W - w + 1);
    const std::size_t hl = 1 + rng() % H, wl = 1 + rng() % W;
    const auto pm = make_pixel_mask({H, W}, Placement::top_left(static_cast<long>(r), static_cast<long>(c), h, w));
    const auto got = derive_feature_mask(pm, {hl, wl});
    for (std::size_t i = 0; i < hl; ++i) {
      for (std::size_t j = 0; j < wl; ++j) {
        // cell (i, j) spans rows [i H/hl, (i+1) H/hl) and cols likewise
        const double r0 = static_cast<double>(i * H) / hl, r1 = static_cast<double>((i + 1) * H) / hl;
        const double c0 = static_cast<double>(j * W) / wl, c1 = static_cast<double>((j + 1) * W) / wl;
        bool hit = false;
        for (std::size_t y = r; y < r + h; ++y) {
          for (std::size_t xx = c; xx < c + w; ++xx) hit = hit || (y < r1 && y + 1 > r0 && xx < c1 && xx + 1 > c0);
        }
        bad_masks += got.data[i * wl + j] != (hit ? 0 : 1);
      }
    }
  }
  return {bad_partition == 0 && bad_masks == 0,
          fmt("%zu partition mismatches on 100 triples, %zu mask-cell mismatches on 50 placements", bad_partition,
              bad_masks)};
}

// 4. Carpet patch vs random patch on the classifier.
Verdict carpet_efficacy(Fixture& f) {
  const auto r = craft_carpet_patch(*f.cls, f.attack_images, f.placement, f.spec, f.craft);
  f.carpet = r.patch;
  const double clean = top1(f, Perturbation::none());
  const double carpet = top1(f, Perturbation::of(*f.carpet, f.placement));
  const double random = top1(f, Perturbation::of(uniform_random_patch(104), f.placement));
  const double area = 100.0 * 100.0 / 1024.0;
  return {clean >= 80.0 && clean - carpet >= 30.0 && clean - random < 10.0 && area <= 10.0,
          fmt("clean %.2f, carpet %.2f (drop %.2f), random %.2f (drop %.2f), patch area %.2f%%", clean, carpet,
              clean - carpet, random, clean - random, area)};
}

// 5. The same patch against the segmentation head.
Verdict task_agnostic(Fixture& f) {
  const Perturbation p = Perturbation::of(*f.carpet, f.placement);
  const double clean = top1(f, Perturbation::none()), adv = top1(f, p);
  const auto seg = eval_segmentation(*f.seg, f.test_images, f.test_masks, p);
  const double drop = seg.clean.at("mAcc") - seg.attacked.at("mAcc");
  return {clean - adv >= 30.0 && drop >= 15.0,
          fmt("classifier drop %.2f, segmentation mAcc %.2f -> %.2f (drop %.2f, mIoU %.2f -> %.2f)", clean - adv,
              seg.clean.at("mAcc"), seg.attacked.at("mAcc"), drop, seg.clean.at("mIoU"), seg.attacked.at("mIoU"))};
}

// 6. Crafted on a color/texture shifted dataset, evaluated on the original.
Verdict proxy_dataset(Fixture& f) {
  toy::ToyDataConfig dc;
  dc.seed = 3;
  dc.shift = toy::DomainShift::color_texture;
  const auto proxy = toy::images_of(toy::make_toy_dataset(2000, dc));
  const auto r = craft_carpet_patch(*f.cls, proxy, f.placement, f.spec, f.craft);
  const double clean = top1(f, Perturbation::none()), adv = top1(f, Perturbation::of(r.patch, f.placement));
  return {clean - adv >= 15.0, fmt("clean %.2f, proxy-crafted patch %.2f (drop %.2f)", clean, adv, clean - adv)};
}

// 7. Forensics against brute-force loops on 16 images.
Verdict forensics_oracles(Fixture& f) {
  const std::span<const Image> images(f.test_images.data(), 16);
  const auto attack = patch_attack(*f.carpet, f.placement);
  const LayerId layer{"block3"};
  std::size_t bad = 0;
  std::vector<double> mean(64, 0.0);
  std::vector<double> cells(16, 0.0);
  for (const auto& x : images) {
    const Tensor3 a = features(*f.cls, x), b = features(*f.cls, attack(x));
    std::vector<double> d(64, 0.0);
    for (std::size_t k = 0; k < 64; ++k) {
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) d[k] += (b(k, i, j) - a(k, i, j)) * (b(k, i, j) - a(k, i, j));
      }
      d[k] = std::sqrt(d[k]);
      mean[k] += d[k] / 16.0;
    }
    for (std::size_t p = 0; p < 16; ++p) {
      double sq = 0.0;
      for (std::size_t k = 0; k < 64; ++k) sq += std::pow(b(k, p / 4, p % 4) - a(k, p / 4, p % 4), 2);
      cells[p] += std::sqrt(sq) / 16.0;
    }
    // top-50: descending oracle distances, and nothing left out beats the last one kept
    const auto top = top_attacked_channels(*f.cls, layer, x, attack(x), 50);
    std::vector<bool> in(64, false);
    for (std::size_t n = 0; n < top.size(); ++n) {
      in[top[n]] = true;
      if (n > 0 && d[top[n]] > d[top[n - 1]] * (1 + 1e-6)) ++bad;
    }
    for (std::size_t k = 0; k < 64; ++k) {
      if (!in[k] && d[k] > d[top.back()] * (1 + 1e-6)) ++bad;
    }
  }
  const auto profile = channel_distance_profile(*f.cls, layer, images, attack);
  for (std::size_t k = 0; k < 64; ++k) bad += !rel_close(profile.mean_distance[k], mean[k], 1e-6);
  const auto map = spatial_impact_map(*f.cls, layer, images, attack);
  for (std::size_t p = 0; p < 16; ++p) bad += !rel_close(map.values[p], cells[p], 1e-6);
  const auto bins = frequency_bins(*f.cls, layer, images, attack, 50, 0.5);
  const bool partition = bins.frequent + bins.occasional + bins.not_selected == 64;
  return {bad == 0 && partition, fmt("%zu oracle mismatches; bins %zu/%zu/%zu sum to 64: %s", bad, bins.frequent,
                                     bins.occasional, bins.not_selected, partition ? "yes" : "no")};
}

// 8. Forcing the patch onto the channels the unforced patch leaves alone.
Verdict forced_direction(Fixture& f) {
  const std::span<const Image> images(f.test_images.data(), 200);
  const LayerId layer{"block3"};
  const auto unforced = channel_distance_profile(*f.cls, layer, images, patch_attack(*f.carpet, f.placement));
  const auto order = top_k_indices(unforced.mean_distance, 64);
  const std::vector<std::size_t> bottom(order.end() - 16, order.end());
  const std::vector<std::size_t> top(order.begin(), order.begin() + 48);
  const auto spec = FeatureTargetSpec::single("block3", ChannelSet::Of(bottom));
  const auto r = craft_forced_patch(*f.cls, f.attack_images, f.placement, spec, f.craft);
  const auto forced = channel_distance_profile(*f.cls, layer, images, patch_attack(r.patch, f.placement));
  const double ratio = forced.mean_over(bottom) / unforced.mean_over(bottom);
  return {ratio >= 2.0, fmt("mean distance on the 16 least-attacked channels (disjoint from the unforced top-48): "
                            "unforced %.4f, forced %.4f, ratio %.2f",
                            unforced.mean_over(bottom), forced.mean_over(bottom), ratio)};
}

// 9. Detection primitives on fixed suites.
Verdict detection_suites(Fixture&) {
  std::size_t bad = 0;
  const auto B = [](double a, double b, double c, double d, int k = 0, double conf = 1.0) {
    return Box{a, b, c, d, k, conf};
  };
  bad += std::abs(iou(B(0, 0, 2, 2), B(1, 1, 3, 3)) - 1.0 / 7.0) > 1e-15;
  bad += iou(B(0, 0, 2, 2), B(0, 0, 2, 2)) != 1.0;
  bad += iou(B(0, 0, 2, 2), B(5, 5, 6, 6)) != 0.0;
  const std::vector<Box> dup{B(0, 0, 2, 2, 0, 0.8), B(0, 0, 2, 2, 0, 0.9)};
  const auto kept = nms(dup, 0.45);
  bad += !(kept.size() == 1 && kept[0].confidence == 0.9);
  const std::vector<Box> chain{B(0, 0, 10, 10, 0, 0.9), B(1, 0, 11, 10, 0, 0.8), B(20, 0, 30, 10, 0, 0.7),
                               B(0, 0, 10, 10, 1, 0.6)};
  bad += nms(chain, 0.45).size() != 3;
  const std::vector<std::vector<Box>> gt{{B(0, 0, 10, 10), B(20, 20, 30, 30)}};
  const std::vector<std::vector<Box>> pr{{B(0, 0, 10, 10, 0, 0.9), B(40, 40, 45, 45, 0, 0.8), B(20, 20, 30, 31, 0, 0.7)}};
  bad += std::abs(average_precision(pr, gt).mean - (0.5 + 0.5 * 2.0 / 3.0)) > 1e-12;
  bad += average_precision(std::vector<std::vector<Box>>{{B(0, 0, 10, 10, 0, 0.5)}},
                           std::vector<std::vector<Box>>{{B(0, 0, 10, 10)}}).mean != 1.0;
  bad += average_precision(std::vector<std::vector<Box>>{{B(50, 50, 60, 60, 0, 0.5)}},
                           std::vector<std::vector<Box>>{{B(0, 0, 10, 10)}}).mean != 0.0;
  // patch region [10,20)x[10,20): boxes 0 and 2 overlap, 1 only touches an edge, 3 is far
  const Box region = to_box(Placement::top_left(10, 10, 10, 10).resolve({64, 64}));
  const std::vector<Box> preds{B(15, 15, 25, 25), B(0, 10, 10, 20), B(19.5, 0, 30, 10.5), B(40, 40, 50, 50)};
  const auto survivors = drop_overlapping(preds, region);
  bad += survivors != std::vector<Box>{preds[1], preds[3]};
  return {bad == 0, fmt("%zu mismatches against hand-computed IoU/NMS/AP/filter values", bad)};
}

// 10. Two identical runs through the experiment runner.
Verdict determinism(Fixture& f) {
  const fs::path root = fs::temp_directory_path() / "carpet-acceptance";
  fs::remove_all(root);
  toy::write_toy_dataset(root / "data", 200, 32, 7);
  toy::save_checkpoint(*f.net, root / "toy.ckpt");
  const auto raw = nlohmann::json::parse(R"({
    "seed": 23,
    "model": {"checkpoint": "toy.ckpt", "task": "classification"},
    "attack": "carpet_patch",
    "target": {"layers": [{"name": "block3"}]},
    "placement": {"offset": [1, 1], "size": [10, 10]},
    "craft": {"steps": 2, "iterations_per_step": 200},
    "train": {"manifest": "data/classification.jsonl", "split": "train_attack"},
    "eval": {"manifest": "data/classification.jsonl", "split": "eval"},
    "forensics": {"images": 16}
  })");
  const auto cfg = parse_config(raw, root);
  std::ostringstream log;
  std::size_t compared = 0, differing = 0;
  for (const char* run : {"a", "b"}) {
    run_craft(cfg, root / run, false, log);
    run_forensics(cfg, root / run / "patch.cbp", std::nullopt, root / run, false, log);
  }
  const auto bundle = nlohmann::json::parse(detail::read_file_bytes(root / "a/forensics/bundle.json"));
  std::vector<fs::path> files{"patch.cbp", "forensics/bundle.json"};
  for (const auto& [name, _] : bundle.at("files").items()) files.push_back(fs::path("forensics") / name);
  for (const auto& rel : files) {
    ++compared;
    differing += detail::read_file_bytes(root / "a" / rel) != detail::read_file_bytes(root / "b" / rel);
  }
  return {differing == 0 && compared >= 6,
          fmt("%zu of %zu artifact files differ between two runs", differing, compared)};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto since = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };
  Fixture f = make_fixture();
  std::printf("setup: toy model trained in %.1fs\n", since());
  std::fflush(stdout);

  const std::vector<std::pair<const char*, Verdict (*)(Fixture&)>> criteria{
      {"gradient correctness", gradient_check},   {"identity zero", identity_zero},
      {"compositing exactness", compositing},     {"carpet efficacy", carpet_efficacy},
      {"task agnosticism", task_agnostic},        {"proxy dataset", proxy_dataset},
      {"forensics oracles", forensics_oracles},   {"forced direction", forced_direction},
      {"detection harness", detection_suites},    {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const double start = since();
    Verdict v;
    try {
      v = criteria[i].second(f);
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %2zu %-22s %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str(),
                since() - start);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed, total %.1fs\n", failed, criteria.size(), since());
  return failed == 0 ? 0 : 1;
}
