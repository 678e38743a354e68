#include <gtest/gtest.h>

#include "lcrp/canonize.hpp"
#include "lcrp/fixtures.hpp"
#include "lcrp/forward.hpp"

using namespace lcrp;

namespace {

FixtureSpec three_class(std::uint64_t seed) {
  FixtureSpec s;
  s.classes = {ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle};
  s.seed = seed;
  s.count = 20;
  return s;
}

}  // namespace

TEST(Scenes, DeterministicPerSeedAndIndex) {
  const auto spec = three_class(5);
  const auto a = generate_scene(spec, 3), b = generate_scene(spec, 3), c = generate_scene(spec, 4);
  EXPECT_EQ(a.image.vec(), b.image.vec());
  EXPECT_NE(a.image.vec(), c.image.vec());
  auto other = spec;
  other.seed = 6;
  EXPECT_NE(generate_scene(other, 3).image.vec(), a.image.vec());
}

TEST(Scenes, BoxesAreTightAndMasksDisjoint) {
  auto spec = three_class(1);
  spec.rules = {BiasRule{0, std::nullopt, 2, 1.0}};
  for (const auto& s : generate_scenes(spec)) {
    const int S = spec.image_size;
    Tensor seen(Shape{S, S});
    for (const auto& o : s.objects) {
      int x0 = S, y0 = S, x1 = -1, y1 = -1;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * S + x;
          if (o.mask[p] == 0.0f) continue;
          EXPECT_EQ(seen[p], 0.0f);
          seen[p] = 1.0f;
          x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
        }
      EXPECT_EQ(o.box, (Box{x0, y0, x1, y1}));
    }
    for (float v : s.image.vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Scenes, CertainRuleAlwaysFires) {
  auto spec = three_class(2);
  spec.count = 60;
  spec.rules = {BiasRule{0, Texture::Stripes, std::nullopt, 1.0}};
  int disks = 0;
  for (const auto& s : generate_scenes(spec)) {
    if (s.objects[0].cls == 0) {
      ++disks;
      EXPECT_EQ(s.texture, Texture::Stripes);
      EXPECT_TRUE(s.cooccurrence);
    } else {
      EXPECT_NE(s.texture, Texture::Stripes);  // reserved for the rule's class
    }
  }
  EXPECT_GT(disks, 0);
}

TEST(Scenes, CooccurrenceRuleAddsObject) {
  auto spec = three_class(3);
  spec.rules = {BiasRule{1, std::nullopt, 2, 1.0}};
  for (const auto& s : generate_scenes(spec)) {
    if (s.objects[0].cls != 1) {
      EXPECT_EQ(s.objects.size(), 1u);
      continue;
    }
    ASSERT_EQ(s.objects.size(), 2u);
    EXPECT_EQ(s.objects[1].cls, 2);
  }
}

// Monte-Carlo check of the rule probability.
TEST(Scenes, RuleFrequencyMatchesProbability) {
  auto spec = three_class(11);
  spec.classes = {ShapeKind::Disk};
  spec.count = 2000;
  spec.min_size = 4;
  spec.max_size = 6;
  spec.rules = {BiasRule{0, Texture::Stripes, std::nullopt, 0.9}};
  int fired = 0;
  for (const auto& s : generate_scenes(spec)) fired += s.texture == Texture::Stripes;
  const double f = fired / 2000.0;
  EXPECT_GT(f, 0.86);
  EXPECT_LT(f, 0.94);
}

TEST(Scenes, InvalidSpecsRejected) {
  auto spec = three_class(0);
  spec.max_size = 40;
  EXPECT_THROW(generate_scene(spec, 0), ValidationError);
  spec = three_class(0);
  spec.rules = {BiasRule{0, Texture::Dots, 1, 0.5}};
  EXPECT_THROW(generate_scene(spec, 0), ValidationError);
  spec.rules = {BiasRule{0, Texture::Dots, std::nullopt, 1.5}};
  EXPECT_THROW(generate_scene(spec, 0), ValidationError);
  EXPECT_THROW(shape_from_name("hexagon"), ValidationError);
}

TEST(Scenes, LabelsAndBackground) {
  const auto s = generate_scene(three_class(4), 0);
  const auto labels = s.labels();
  const Tensor bg = s.background_mask();
  const Tensor outside = s.box_background(0);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    EXPECT_EQ(labels[p] == 0, bg[p] == 1.0f);
    if (labels[p] != 0) EXPECT_EQ(outside[p], 0.0f);
  }
}

TEST(ToyModels, OutputShapes) {
  ToyOptions o;
  o.num_classes = 3;
  const Graph seg = build_toy_model(ToyPreset::SegSmall, 1, o);
  const Graph det = build_toy_model(ToyPreset::DetSmall, 1, ToyOptions{8, true, true, 2, 32});
  const Tensor x(Shape{3, 32, 32}, 0.5f);
  EXPECT_EQ(forward(seg, x).output().shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(forward(det, x).output().shape(), (Shape{64, 6}));
  EXPECT_EQ(det.head().grid_width, 8);
  EXPECT_EQ(seg.head().background_class, 0);
}

TEST(ToyModels, CanonizedModelIsEquivalent) {
  for (auto preset : {ToyPreset::SegSmall, ToyPreset::DetSmall}) {
    Graph g = build_toy_model(preset, 7);
    // make batchnorm non-trivial
    for (const auto& n : g.nodes())
      if (n.op == OpKind::BatchNorm2d) {
        auto var = g.mutable_weight(g.index_of(n.id), "var");
        for (auto& v : var) v = 2.0f;
      }
    const auto [f, report] = canonize(g);
    EXPECT_FALSE(report.fused_pairs.empty());
    const auto scene = generate_scene(FixtureSpec{}, 0);
    const Tensor a = forward(g, scene.image).output(), b = forward(f, scene.image).output();
    EXPECT_LT(max_abs_diff(a, b), 1e-4 * std::max(1.0f, a.max_abs()));
  }
}

TEST(CellTargets, CentreCellAndOffsets) {
  const Graph det = build_toy_model(ToyPreset::DetSmall, 1, ToyOptions{8, true, true, 2, 32});
  FixtureSpec spec;
  spec.count = 10;
  for (const auto& s : generate_scenes(spec)) {
    const auto t = cell_targets(s, det.head());
    ASSERT_EQ(t.size(), 1u);
    const Box& b = s.objects[0].box;
    const double cx = (b.x0 + b.x1 + 1) / 2.0, cy = (b.y0 + b.y1 + 1) / 2.0;
    EXPECT_EQ(t[0].cell, static_cast<int>(cy / 4) * 8 + static_cast<int>(cx / 4));
    EXPECT_GE(t[0].box[0], 0.0f);
    EXPECT_LT(t[0].box[0], 1.0f);
    EXPECT_FLOAT_EQ(t[0].box[2], b.width() / 32.0f);
  }
}

TEST(Training, ZeroLearningRateLeavesWeights) {
  Graph g = build_toy_model(ToyPreset::DetSmall, 2, ToyOptions{4, true, true, 2, 32});
  const auto before = g.weights();
  FixtureSpec spec;
  spec.count = 4;
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 1;
  const auto h = train_fixture(g, generate_scenes(spec), cfg);
  EXPECT_EQ(g.weights(), before);
  ASSERT_EQ(h.epochs.size(), 1u);
  EXPECT_GT(h.epochs[0].loss, 0.0);
}

TEST(Training, StepFollowsNegativeGradient) {
  // One batch: w' = w - lr * mean gradient, running statistics untouched.
  Graph g = build_toy_model(ToyPreset::SegSmall, 3, ToyOptions{4, true, true, 3, 32});
  FixtureSpec spec;
  spec.count = 2;
  const auto scenes = generate_scenes(spec);
  std::vector<float> grad(g.weights().size(), 0.0f);
  for (const auto& s : scenes) {
    const auto cache = forward(g, s.image);
    Tensor dout;
    detail::seg_loss(cache.output(), s.labels(), dout);
    gradient(g, cache, dout, grad);
  }
  const auto before = g.weights();
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  train_fixture(g, scenes, cfg);
  const auto trainable = detail::trainable_mask(g);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const float expect = trainable[i] ? before[i] - 0.1f * grad[i] / 2.0f : before[i];
    EXPECT_NEAR(g.weights()[i], expect, 1e-6f + 1e-5f * std::fabs(expect));
  }
}

TEST(Training, DivergenceReportsStep) {
  Graph g = build_toy_model(ToyPreset::SegSmall, 3, ToyOptions{4, true, true, 3, 32});
  FixtureSpec spec;
  spec.count = 4;
  TrainConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.epochs = 3;
  cfg.batch_size = 1;
  try {
    train_fixture(g, generate_scenes(spec), cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.step(), 1u);
  }
}

// Seg loss gradient agrees with finite differences of the loss.
TEST(Training, SegLossGradient) {
  Rng rng(4);
  Tensor out(Shape{3, 2, 2});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(rng.normal());
  const std::vector<int> labels{0, 2, 1, 1};
  Tensor g, scratch;
  detail::seg_loss(out, labels, g);
  for (std::size_t i = 0; i < out.size(); ++i) {
    Tensor p = out, m = out;
    p[i] += 1e-3f;
    m[i] -= 1e-3f;
    const double fd = (detail::seg_loss(p, labels, scratch) - detail::seg_loss(m, labels, scratch)) / 2e-3;
    EXPECT_NEAR(g[i], fd, 1e-3);
  }
}

TEST(Training, DetLossGradient) {
  const HeadSpec head{HeadKind::Detection, 2, 4, -1, 2};
  Rng rng(8);
  Tensor out(Shape{4, 6});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(rng.normal());
  const std::vector<CellTarget> targets{{1, 0, {0.5f, 0.25f, 0.3f, 0.2f}}, {2, 1, {0.1f, 0.9f, 0.1f, 0.4f}}};
  TrainConfig cfg;
  Tensor g, scratch;
  detail::det_loss(out, head, targets, cfg, g);
  for (std::size_t i = 0; i < out.size(); ++i) {
    Tensor p = out, m = out;
    p[i] += 1e-3f;
    m[i] -= 1e-3f;
    const double fd =
        (detail::det_loss(p, head, targets, cfg, scratch) - detail::det_loss(m, head, targets, cfg, scratch)) / 2e-3;
    EXPECT_NEAR(g[i], fd, 2e-3) << i;
  }
}
