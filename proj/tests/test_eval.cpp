#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "carpet/eval/harness.hpp"
#include "support.hpp"

using namespace carpet;
using carpet::testing::random_image;
using carpet::testing::random_tensor;

namespace {

/// Head-only model whose outputs are scripted from the input image.
class ScriptedModel : public Model {
 public:
  ScriptedModel(TaskKind kind, std::function<TaskOutput(const Image&)> f, std::size_t classes = 2)
      : kind_(kind), f_(std::move(f)), classes_(classes) {}

  std::string backbone_id() const override { return "scripted"; }
  TaskKind task_kind() const override { return kind_; }
  std::vector<LayerId> layers() const override { return {}; }
  std::string preprocessing() const override { return "none"; }
  bool trainable() const override { return false; }
  std::size_t num_classes() const override { return classes_; }
  std::string digest() const override { return "scripted"; }
  LayerShape layer_shape(const LayerId&, Shape2) const override { throw ValidationError("no layers"); }
  FeatureMapSet extract_features(const Image&, std::span<const LayerId>) const override { return {}; }
  TaskOutput task_forward(const Image& x) const override {
    TaskOutput o = f_(x);
    o.kind = kind_;
    return o;
  }
  LossGradient input_gradient(const Image&, const Objective&) const override { throw ValidationError("no gradient"); }

 private:
  TaskKind kind_;
  std::function<TaskOutput(const Image&)> f_;
  std::size_t classes_;
};

Box box(double x0, double y0, double x1, double y1, int cls = 0, double conf = 1.0) {
  return {x0, y0, x1, y1, cls, conf};
}

Box random_box(std::mt19937_64& rng, int classes = 2) {
  std::uniform_real_distribution<double> u(0.0, 20.0), s(2.0, 10.0);
  const double x = u(rng), y = u(rng);
  const double conf = static_cast<double>(rng() % 4) / 4.0 + 0.1;  // coarse, so ties happen
  return {x, y, x + s(rng), y + s(rng), static_cast<int>(rng() % classes), conf};
}

// Textbook greedy: take the best remaining box, delete everything it covers.
std::vector<Box> nms_oracle(std::vector<Box> boxes, double thr) {
  std::vector<std::pair<Box, std::size_t>> rest;
  for (std::size_t i = 0; i < boxes.size(); ++i) rest.emplace_back(boxes[i], i);
  std::vector<Box> out;
  while (!rest.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < rest.size(); ++i) {
      const auto& [b, idx] = rest[i];
      if (b.confidence > rest[best].first.confidence ||
          (b.confidence == rest[best].first.confidence && idx < rest[best].second)) {
        best = i;
      }
    }
    const Box top = rest[best].first;
    out.push_back(top);
    std::vector<std::pair<Box, std::size_t>> next;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      if (i == best) continue;
      if (rest[i].first.class_id == top.class_id && iou(rest[i].first, top) > thr) continue;
      next.push_back(rest[i]);
    }
    rest = std::move(next);
  }
  return out;
}

// All-points AP as the mean over GT of the best precision reached at or
// after each true positive.
double ap_oracle(const std::vector<std::vector<Box>>& preds, const std::vector<std::vector<Box>>& gts, int cls,
                 double match) {
  struct D {
    Box b;
    std::size_t img, order;
  };
  std::vector<D> ds;
  std::size_t order = 0, n_gt = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (const Box& b : preds[i]) {
      if (b.class_id == cls) ds.push_back({b, i, order});
      ++order;
    }
    for (const Box& g : gts[i]) n_gt += g.class_id == cls;
  }
  std::sort(ds.begin(), ds.end(), [](const D& a, const D& b) {
    return a.b.confidence != b.b.confidence ? a.b.confidence > b.b.confidence : a.order < b.order;
  });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<bool> is_tp;
  std::vector<double> prec;
  std::size_t tp = 0;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    double best = -1;
    std::size_t bg = 0;
    for (std::size_t g = 0; g < gts[ds[n].img].size(); ++g) {
      if (gts[ds[n].img][g].class_id != cls) continue;
      const double o = iou(ds[n].b, gts[ds[n].img][g]);
      if (o > best) best = o, bg = g;
    }
    const bool hit = best >= match && !used[ds[n].img][bg];
    if (hit) used[ds[n].img][bg] = true;
    tp += hit;
    is_tp.push_back(hit);
    prec.push_back(static_cast<double>(tp) / static_cast<double>(n + 1));
  }
  double s = 0.0;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    if (!is_tp[n]) continue;
    s += *std::max_element(prec.begin() + static_cast<long>(n), prec.end());
  }
  return s / static_cast<double>(n_gt);
}

std::vector<Image> images(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Image> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(random_image(rng, 32, 32, std::to_string(i)));
  return v;
}

}  // namespace

TEST(Iou, Examples) {
  EXPECT_EQ(iou(box(0, 0, 2, 2), box(0, 0, 2, 2)), 1.0);
  EXPECT_EQ(iou(box(0, 0, 2, 2), box(3, 3, 4, 4)), 0.0);
  EXPECT_EQ(iou(box(0, 0, 2, 2), box(2, 0, 4, 2)), 0.0);
  EXPECT_DOUBLE_EQ(iou(box(0, 0, 2, 2), box(1, 1, 3, 3)), 1.0 / 7.0);
  EXPECT_THROW(iou(box(0, 0, 0, 2), box(0, 0, 1, 1)), ValidationError);
}

TEST(Nms, Examples) {
  const std::vector<Box> one{box(0, 0, 2, 2, 0, 0.3)};
  EXPECT_EQ(nms(one, 0.45), one);
  const std::vector<Box> pair{box(0, 0, 2, 2, 0, 0.8), box(0, 0, 2, 2, 0, 0.9)};
  EXPECT_EQ(nms(pair, 0.45), (std::vector<Box>{pair[1]}));
  const std::vector<Box> classes{box(0, 0, 2, 2, 0, 0.8), box(0, 0, 2, 2, 1, 0.9)};
  EXPECT_EQ(nms(classes, 0.45).size(), 2u);
  // IoU exactly at the threshold is kept
  const std::vector<Box> edge{box(0, 0, 2, 2, 0, 0.9), box(0, 0, 2, 1, 0, 0.5)};
  EXPECT_EQ(nms(edge, 0.5).size(), 2u);
}

TEST(Nms, MatchesBruteForceOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 300; ++t) {
    std::vector<Box> bs;
    for (int i = 0; i < 5; ++i) bs.push_back(random_box(rng));
    EXPECT_EQ(nms(bs, 0.3), nms_oracle(bs, 0.3));
  }
}

TEST(AveragePrecision, TrivialCases) {
  const std::vector<std::vector<Box>> gt{{box(0, 0, 10, 10)}};
  EXPECT_DOUBLE_EQ(average_precision(std::vector<std::vector<Box>>{{box(0, 0, 10, 10, 0, 0.9)}}, gt).mean, 1.0);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<std::vector<Box>>{{box(20, 20, 30, 30, 0, 0.9)}}, gt).mean, 0.0);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<std::vector<Box>>{{}}, gt).mean, 0.0);
  EXPECT_THROW(average_precision(std::vector<std::vector<Box>>{{}}, std::vector<std::vector<Box>>{{}}),
               ValidationError);
}

TEST(AveragePrecision, HandComputedThreePredsTwoGt) {
  // TP (0.9), FP (0.8), TP (0.7): recall .5 .5 1, precision 1 .5 2/3
  const std::vector<std::vector<Box>> gt{{box(0, 0, 10, 10), box(20, 20, 30, 30)}};
  const std::vector<std::vector<Box>> pr{
      {box(0, 0, 10, 10, 0, 0.9), box(40, 40, 45, 45, 0, 0.8), box(20, 20, 30, 31, 0, 0.7)}};
  EXPECT_NEAR(average_precision(pr, gt).mean, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-12);
  EXPECT_NEAR(average_precision(pr, gt, 0.5, ApInterpolation::eleven_point).mean, (6.0 + 5.0 * 2.0 / 3.0) / 11.0,
              1e-12);
}

TEST(AveragePrecision, DuplicateMatchesCountOnce) {
  const std::vector<std::vector<Box>> gt{{box(0, 0, 10, 10)}};
  const std::vector<std::vector<Box>> pr{{box(0, 0, 10, 10, 0, 0.9), box(0, 0, 10, 10, 0, 0.8)}};
  // TP then FP: precision 1 at recall 1
  EXPECT_DOUBLE_EQ(average_precision(pr, gt).mean, 1.0);
  const std::vector<std::vector<Box>> late{{box(0, 0, 10, 10, 0, 0.8), box(50, 50, 60, 60, 0, 0.9)}};
  EXPECT_DOUBLE_EQ(average_precision(late, gt).mean, 0.5);
}

TEST(AveragePrecision, ClassWithoutGtExcluded) {
  const std::vector<std::vector<Box>> gt{{box(0, 0, 10, 10, 0)}};
  const std::vector<std::vector<Box>> pr{{box(0, 0, 10, 10, 0, 0.9), box(0, 0, 10, 10, 3, 0.9)}};
  const auto r = average_precision(pr, gt);
  EXPECT_EQ(r.excluded, std::vector<int>{3});
  EXPECT_EQ(r.per_class.size(), 1u);
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n_img = 1 + rng() % 2;
    std::vector<std::vector<Box>> gts(n_img), preds(n_img);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n_img; ++i) {
      const std::size_t ng = 1 + rng() % 3, np = rng() % 4;
      for (std::size_t g = 0; g < ng; ++g) gts[i].push_back(random_box(rng));
      for (std::size_t p = 0; p < np; ++p) {
        Box b = rng() % 2 ? gts[i][rng() % ng] : random_box(rng);  // some near-exact hits
        b.xmax += static_cast<double>(rng() % 3);
        b.confidence = static_cast<double>(rng() % 4) / 4.0 + 0.1;
        preds[i].push_back(b);
      }
      total += ng + np;
    }
    ASSERT_LE(total, 10u + 2u);
    const auto r = average_precision(preds, gts);
    double mean = 0.0;
    for (const auto& [cls, ap] : r.per_class) {
      EXPECT_NEAR(ap, ap_oracle(preds, gts, cls, 0.5), 1e-12);
      mean += ap / static_cast<double>(r.per_class.size());
    }
    EXPECT_NEAR(r.mean, mean, 1e-12);
  }
}

TEST(Classification, CleanMatchesTrainingHarnessAndIdentityPatchIsBitIdentical) {
  const auto m = carpet::testing::trained_model();
  toy::ToyDataConfig dc;
  dc.seed = 70;
  const auto data = toy::make_toy_dataset(200, dc);
  const auto xs = toy::images_of(data);
  const auto ys = toy::labels_of(data);
  const auto clean = eval_classification(*m, xs, ys, Perturbation::none());
  EXPECT_EQ(clean.clean.at("top1"), round2(100.0 * toy::accuracy(*m, xs, ys)));
  EXPECT_EQ(clean.attacked.at("top1"), clean.clean.at("top1"));

  // a "patch" copied from the pixels it covers, per image
  const Placement pl = Placement::top_left(5, 5, 8, 8);
  for (std::size_t i = 0; i < 5; ++i) {
    Tensor3 t(3, 8, 8);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) t(c, y, x) = xs[i].tensor()(c, 5 + y, 5 + x);
      }
    }
    const Perturbation same = Perturbation::of(Patch(t), pl);
    EXPECT_TRUE(same.apply(xs[i]).tensor() == xs[i].tensor());
    const auto one = std::span(xs).subspan(i, 1);
    const auto yi = std::span(ys).subspan(i, 1);
    EXPECT_EQ(nlohmann::json(eval_classification(*m, one, yi, same)).dump(),
              nlohmann::json(eval_classification(*m, one, yi, Perturbation::none())).dump());
  }
  EXPECT_THROW(eval_classification(*m, xs, std::span(ys).first(10), Perturbation::none()), ValidationError);
}

TEST(ContextualDetection, FiltersImagesAndPatchBoxes) {
  // each image has one object; image i's object starts at column 4*i
  std::vector<std::vector<Box>> gts;
  for (int i = 0; i < 6; ++i) gts.push_back({box(4.0 * i, 5, 4.0 * i + 6, 13, 0)});
  const auto xs = images(6, 3);
  const Placement pl = Placement::top_left(0, 0, 10, 10);  // covers cols 0..9, rows 0..9
  std::size_t calls = 0;
  const ScriptedModel det(TaskKind::detection, [&](const Image& x) {
    ++calls;
    TaskOutput o;
    const int i = std::stoi(x.id().empty() ? "0" : x.id());
    o.detections = {gts[static_cast<std::size_t>(i)][0]};
    o.detections[0].confidence = 0.5;
    o.detections.push_back(box(2, 2, 6, 6, 0, 0.99));  // sits on the patch
    return o;
  });
  std::mt19937_64 rng(4);
  const auto attack = Perturbation::of(Patch(random_tensor(rng, 3, 10, 10)), pl);
  const auto r = eval_detection_contextual(det, xs, gts, attack);
  // GT columns [0,6) [4,10) intersect the patch; [8,14) too; from i = 3 on they are clear
  EXPECT_EQ(r.n_images, 3u);
  EXPECT_EQ(r.clean.at("mAP"), 100.0);
  EXPECT_EQ(r.attacked.at("mAP"), 100.0);

  // without a patch nothing is filtered and the stray box costs precision
  const auto plain = eval_detection_contextual(det, xs, gts, Perturbation::none());
  EXPECT_EQ(plain.n_images, 6u);
  EXPECT_LT(plain.clean.at("mAP"), 100.0);

  std::vector<std::vector<Box>> blocked(6, {box(1, 1, 3, 3)});
  EXPECT_THROW(eval_detection_contextual(det, xs, blocked, attack), ValidationError);
}

TEST(ContextualDetection, PredictionsInsidePatchNeverMatter) {
  std::mt19937_64 rng(5);
  std::vector<std::vector<Box>> gts;
  for (int i = 0; i < 8; ++i) gts.push_back({box(16, 16, 26, 26, i % 2), box(12, 2, 30, 8, 1)});
  const auto xs = images(8, 6);
  const Placement pl = Placement::top_left(20, 0, 10, 10);  // rows 20..29, cols 0..9
  const auto make = [&](std::uint64_t salt) {
    return ScriptedModel(TaskKind::detection, [&, salt](const Image& x) {
      TaskOutput o;
      std::mt19937_64 r(std::hash<std::string>{}(x.id()) ^ 77);
      for (int k = 0; k < 6; ++k) o.detections.push_back(random_box(r));
      std::mt19937_64 noise(salt ^ static_cast<std::uint64_t>(x.tensor()(0, 25, 5) * 1e9));
      std::uniform_real_distribution<double> u(0.0, 8.0);
      for (int k = 0; k < 4; ++k) {
        const double a = u(noise), b = 20 + u(noise);
        o.detections.push_back(box(a, b, a + 2, b + 2, static_cast<int>(noise() % 2), 0.01 + u(noise) / 8.0));
      }
      return o;
    });
  };
  const auto attack = Perturbation::of(Patch(random_tensor(rng, 3, 10, 10)), pl);
  const auto a = eval_detection_contextual(make(1), xs, gts, attack);
  const auto b = eval_detection_contextual(make(2), xs, gts, attack);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
}

TEST(Segmentation, PerfectComplementAndExclusion) {
  const auto xs = images(3, 7);
  std::vector<std::vector<int>> gt;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<int> m(32 * 32);
    for (std::size_t p = 0; p < m.size(); ++p) m[p] = ((p / 32) + i) % 5 == 0;
    gt.push_back(m);
  }
  const auto seg = [&](std::function<int(std::size_t img, std::size_t p, const Image&)> f) {
    return ScriptedModel(TaskKind::segmentation, [&, f](const Image& x) {
      TaskOutput o;
      o.height = o.width = 32;
      o.class_map.resize(32 * 32);
      for (std::size_t p = 0; p < 1024; ++p) o.class_map[p] = f(std::stoul(x.id()), p, x);
      return o;
    });
  };
  const auto perfect = eval_segmentation(seg([&](std::size_t i, std::size_t p, const Image&) { return gt[i][p]; }),
                                         xs, gt, Perturbation::none());
  EXPECT_EQ(perfect.clean.at("mIoU"), 100.0);
  EXPECT_EQ(perfect.clean.at("mAcc"), 100.0);
  const auto flipped =
      eval_segmentation(seg([&](std::size_t i, std::size_t p, const Image&) { return 1 - gt[i][p]; }), xs, gt,
                        Perturbation::none());
  EXPECT_EQ(flipped.clean.at("mIoU"), 0.0);

  // inside the patch the scripted model reads the pixels; outside it is perfect
  std::mt19937_64 rng(8);
  const Placement pl = Placement::centered(8, 8);
  const Rect rect = pl.resolve({32, 32});
  const auto attack = Perturbation::of(Patch(random_tensor(rng, 3, 8, 8)), pl);
  const auto local = seg([&](std::size_t i, std::size_t p, const Image& x) {
    if (rect.contains(p / 32, p % 32)) return x.tensor()(0, p / 32, p % 32) > 0.5 ? 1 : 0;
    return gt[i][p];
  });
  const auto r = eval_segmentation(local, xs, gt, attack);
  EXPECT_EQ(r.clean.at("mIoU"), 100.0);
  EXPECT_EQ(r.attacked.at("mIoU"), 100.0);
  EXPECT_EQ(r.attacked.at("mAcc"), 100.0);
}

TEST(Segmentation, IgnoreLabelAndAbsentClasses) {
  SegmentationCounts c(3);
  const std::vector<int> truth{0, 0, 1, kIgnoreLabel}, pred{0, 1, 1, 2};
  c.add(pred, truth, 2, std::nullopt);
  // class 0: tp 1, gt 2, pred 1 -> 1/2; class 1: tp 1, gt 1, pred 2 -> 1/2; class 2 absent
  EXPECT_DOUBLE_EQ(c.miou(), 0.5);
  EXPECT_DOUBLE_EQ(c.macc(), 0.75);
  EXPECT_EQ(c.absent_classes(), 1u);
  const std::vector<int> bad{7, 0, 0, 0};
  EXPECT_THROW(c.add(pred, bad, 2, std::nullopt), ValidationError);
}

TEST(EvalReport, JsonRoundTripAndRounding) {
  EXPECT_EQ(round2(12.345678), 12.35);
  EXPECT_EQ(round2(0.004), 0.0);
  EvalReport r;
  r.task = TaskKind::segmentation;
  r.clean = {{"mIoU", 69.0}, {"mAcc", 78.0}};
  r.attacked = {{"mIoU", 43.11}, {"mAcc", 54.81}};
  r.n_images = 12;
  r.config_digest = "abc";
  r.attack_digest = "def";
  const nlohmann::json j = r;
  const EvalReport back = j.get<EvalReport>();
  EXPECT_EQ(nlohmann::json(back), j);
  for (const char* k : {"task", "clean", "attacked", "n_images", "config_digest", "attack_digest"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
}

TEST(EvalConfig, Validation) {
  EvalConfig c;
  EXPECT_NO_THROW(c.validate());
  c.nms_iou = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(parse_ap_interpolation("coco"), ValidationError);
  EXPECT_EQ(parse_ap_interpolation(to_string(ApInterpolation::eleven_point)), ApInterpolation::eleven_point);
}
