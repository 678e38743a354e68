#include <gtest/gtest.h>

#include <cmath>

#include "generators.hpp"
#include "lcrp/builder.hpp"
#include "lcrp/concept_viz.hpp"
#include "lcrp/context.hpp"
#include "lcrp/fixtures.hpp"

using namespace lcrp;

namespace {

Tensor map2(std::vector<float> v) { return Tensor(Shape{2, 2}, std::move(v)); }

// Bias-free det model so channel relevances are conserved.
Graph plain_det(std::uint64_t seed) {
  return build_toy_model(ToyPreset::DetSmall, seed, ToyOptions{6, false, false, 2, 32});
}

int channels_of(const Graph& g, const std::string& id) {
  return infer_shapes(g)[static_cast<std::size_t>(g.index_of(id))].channels();
}

std::vector<ContextSample> det_items(const Graph& g, int n, std::uint64_t seed) {
  FixtureSpec spec;
  spec.count = n;
  spec.seed = seed;
  std::vector<ContextSample> items;
  // untrained models: explain whatever the model detects most strongly
  for (const auto& s : generate_scenes(spec))
    if (const auto t = choose_target(g.head(), forward(g, s.image).output(), TargetPolicy::Predicted))
      items.push_back({s.image, s.box_background(0), *t});
  return items;
}

}  // namespace

TEST(ContextScore, HandCases) {
  EXPECT_DOUBLE_EQ(context_score({map2({1, 1, 1, 1})}, {map2({1, 0, 0, 1})}).value, 0.5);
  EXPECT_DOUBLE_EQ(context_score({map2({-2, 1, 1, 2})}, {map2({1, 1, 0, 0})}).value, 0.25);
  EXPECT_DOUBLE_EQ(context_score({map2({0, 3, 0, 0})}, {map2({1, 0, 1, 1})}).value, 0.0);
}

TEST(ContextScore, ExcludesSamplesWithoutPositiveAttribution) {
  const auto c = context_score({map2({1, 1, 1, 1}), map2({-1, 0, 0, -3})}, {map2({1, 0, 0, 1}), map2({1, 1, 1, 1})});
  EXPECT_DOUBLE_EQ(c.value, 0.5);
  EXPECT_EQ(c.used, 1u);
  EXPECT_EQ(c.excluded, 1u);
  EXPECT_THROW(context_score({map2({1, 1, 1, 1})}, {Tensor(Shape{3, 3})}), ShapeError);
  EXPECT_THROW(context_score({map2({1, 1, 1, 1})}, {}), ValidationError);
}

TEST(ContextScore, BoundedAndScaleInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(6)), w = 1 + static_cast<int>(rng.below(6));
    std::vector<Tensor> maps, scaled, masks;
    for (int j = 0; j < 1 + static_cast<int>(rng.below(4)); ++j) {
      Tensor a = gen::random_tensor(rng, Shape{h, w}, -1, 1), m(Shape{h, w});
      for (auto& v : m.values()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      Tensor b = a;
      const float k = static_cast<float>(rng.uniform(0.1, 10.0));
      for (auto& v : b.values()) v *= k;
      maps.push_back(a), scaled.push_back(b), masks.push_back(m);
    }
    const auto c = context_score(maps, masks);
    EXPECT_GE(c.value, 0.0);
    EXPECT_LE(c.value, 1.0);
    EXPECT_NEAR(context_score(scaled, masks).value, c.value, 1e-6);
  }
}

TEST(ContextScore, NearestResizeKeepsBinarity) {
  const Tensor m(Shape{4, 4}, std::vector<float>{1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0});
  // samples pixel centres: (1,1), (1,3), (3,1), (3,3)
  EXPECT_EQ(resize_mask_nearest(m, 2, 2).vec(), (std::vector<float>{1, 0, 0, 0}));
  EXPECT_EQ(resize_mask_nearest(m, 4, 4).vec(), m.vec());
  Rng rng(1);
  Tensor big(Shape{32, 32});
  for (auto& v : big.values()) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
  const Tensor small = resize_mask_nearest(big, 8, 8);
  for (float v : small.vec()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(Perturb, FullGrayReplacesBackgroundOnly) {
  Rng rng(3);
  const Tensor img = gen::random_image(rng, Shape{3, 4, 4});
  Tensor bg(Shape{4, 4});
  for (std::size_t p = 0; p < 8; ++p) bg[p] = 1.0f;
  const Tensor out = perturb_background(img, bg, PerturbKind::GrayConstant, 1.0, 7);
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 16; ++p) {
      const std::size_t i = static_cast<std::size_t>(c) * 16 + p;
      if (p < 8)
        EXPECT_EQ(out[i], 0.5f);
      else
        EXPECT_EQ(out[i], img[i]);
    }
}

TEST(Perturb, HalfBlend) {
  const Tensor img(Shape{3, 1, 1}, 1.0f);
  const Tensor bg(Shape{1, 1}, 1.0f);
  EXPECT_EQ(perturb_background(img, bg, PerturbKind::GrayConstant, 0.5, 0).vec(), std::vector<float>(3, 0.75f));
}

TEST(Perturb, IdentityCasesAndDeterminism) {
  Rng rng(4);
  const Tensor img = gen::random_image(rng, Shape{3, 5, 5});
  Tensor bg(Shape{5, 5});
  for (auto& v : bg.values()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  for (const auto& p : perturbation_suite()) {
    EXPECT_EQ(perturb_background(img, Tensor(Shape{5, 5}), p.kind, p.alpha, 9).vec(), img.vec());
    EXPECT_EQ(perturb_background(img, bg, p.kind, 0.0, 9).vec(), img.vec());
    const Tensor a = perturb_background(img, bg, p.kind, p.alpha, 9);
    EXPECT_EQ(a.vec(), perturb_background(img, bg, p.kind, p.alpha, 9).vec());
    for (float v : a.vec()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  EXPECT_EQ(perturbation_suite().size(), 8u);
  EXPECT_THROW(perturb_background(img, Tensor(Shape{4, 5}), PerturbKind::GrayNoise, 1.0, 0), ShapeError);
}

TEST(Perturb, NoiseKinds) {
  const Tensor img(Shape{3, 8, 8}, 0.0f);
  const Tensor bg(Shape{8, 8}, 1.0f);
  const Tensor gray = perturb_background(img, bg, PerturbKind::GrayNoise, 1.0, 2);
  const Tensor rgb = perturb_background(img, bg, PerturbKind::RgbNoise, 1.0, 2);
  const Tensor color = perturb_background(img, bg, PerturbKind::RandomColor, 1.0, 2);
  bool rgb_differs = false, gray_varies = false;
  for (std::size_t p = 0; p < 64; ++p) {
    EXPECT_EQ(gray[p], gray[64 + p]);
    EXPECT_EQ(gray[p], gray[128 + p]);
    rgb_differs = rgb_differs || rgb[p] != rgb[64 + p];
    gray_varies = gray_varies || gray[p] != gray[0];
    for (int c = 0; c < 3; ++c) EXPECT_EQ(color[static_cast<std::size_t>(c) * 64 + p], color[static_cast<std::size_t>(c) * 64]);
  }
  EXPECT_TRUE(rgb_differs);
  EXPECT_TRUE(gray_varies);
}

TEST(Sensitivity, DistanceCases) {
  EXPECT_DOUBLE_EQ(relevance_distance(2, 1), 0.5);
  EXPECT_DOUBLE_EQ(relevance_distance(1.5, 1.5), 0.0);
  EXPECT_DOUBLE_EQ(relevance_distance(1, -1), 1.0);
  EXPECT_DOUBLE_EQ(relevance_distance(0, 0), 0.0);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double d = relevance_distance(rng.uniform(-5, 5), rng.uniform(-5, 5));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Sensitivity, TableAveraging) {
  SensitivityTable t;
  t.clean = {{2.0}, {1.0}};
  t.perturbed = {{std::vector<double>{1.0}, std::nullopt}, {std::vector<double>{-1.0}, std::vector<double>{1.0}}};
  const auto s = background_sensitivity(t, 0);
  EXPECT_DOUBLE_EQ(s.value, (0.5 + 1.0 + 0.0) / 3);
  EXPECT_EQ(s.pairs, 3u);
  EXPECT_EQ(s.skipped, 1u);
}

TEST(Sensitivity, EmptyBackgroundGivesZero) {
  const Graph g = plain_det(2);
  auto items = det_items(g, 4, 1);
  for (auto& it : items) it.background = Tensor(Shape{32, 32});
  for (int ch : {0, 3}) {
    const auto s = background_sensitivity(g, items, "r2", ch, 5);
    EXPECT_EQ(s.value, 0.0);
    EXPECT_EQ(s.pairs + s.skipped, 32u);
  }
}

TEST(Sensitivity, BoundedOnFixtures) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 3);
  const auto items = det_items(g, 6, 2);
  const auto table = sensitivity_table(g, items, "r3", RuleAssignment::preset("zplus"), 11);
  for (int ch = 0; ch < 8; ++ch) {
    const auto s = background_sensitivity(table, ch);
    EXPECT_GE(s.value, 0.0);
    EXPECT_LE(s.value, 1.0);
  }
  const auto again = sensitivity_table(g, items, "r3", RuleAssignment::preset("zplus"), 11, 3);
  EXPECT_EQ(again.clean, table.clean);
  EXPECT_EQ(again.perturbed, table.perturbed);
}

TEST(Agreement, IdentityAndAntiCorrelation) {
  const std::vector<double> c{0.1, 0.5, 0.3, 0.9};
  auto a = evaluate_context(c, c);
  EXPECT_NEAR(*a.rho, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(a.rmsd, 0.0);
  std::vector<double> s;
  for (double x : c) s.push_back(0.7 - x);
  EXPECT_NEAR(*evaluate_context(c, s).rho, -1.0, 1e-12);
  EXPECT_FALSE(evaluate_context(c, {0.2, 0.2, 0.2, 0.2}).rho.has_value());
  EXPECT_THROW(evaluate_context({0.1}, {0.1}), ValidationError);
  EXPECT_THROW(evaluate_context({0.1, 0.2}, {0.1}), ValidationError);
}

// Textbook formulas: sample covariance over sample standard deviations.
TEST(Agreement, MatchesTextbookFormula) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> c(n), s(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = rng.uniform(), s[i] = rng.uniform();
    double mc = 0, ms = 0;
    for (std::size_t i = 0; i < n; ++i) mc += c[i] / n, ms += s[i] / n;
    double cov = 0, vc = 0, vs = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cov += (c[i] - mc) * (s[i] - ms) / (n - 1.0);
      vc += (c[i] - mc) * (c[i] - mc) / (n - 1.0);
      vs += (s[i] - ms) * (s[i] - ms) / (n - 1.0);
      sq += (c[i] - s[i]) * (c[i] - s[i]);
    }
    const auto a = evaluate_context(c, s);
    EXPECT_NEAR(*a.rho, cov / std::sqrt(vc * vs), 1e-9);
    EXPECT_NEAR(a.rmsd, std::sqrt(sq / n), 1e-9);
  }
}

TEST(Flip, DeadChannelHasNoEffect) {
  GraphBuilder b("lin", Shape{2, 1, 1}, HeadSpec{HeadKind::Segmentation, 1});
  const auto r = b.relu("r", b.conv("c", "input", 2, 1, 1, 0, false, std::vector<float>{1, 0, 0, 1}));
  b.conv("out", r, 1, 1, 1, 0, false, std::vector<float>{1, 1});
  const Graph g = b.build();
  const Tensor x(Shape{2, 1, 1}, std::vector<float>{2.0f, -1.0f});
  const auto f = flip_concepts_forward(g, x, {Condition{"r", {1}}}, SegTarget{0});
  EXPECT_EQ(f.relative_delta, 0.0);
  EXPECT_EQ(f.original, 2.0);
  const auto f0 = flip_concepts_forward(g, x, {Condition{"r", {0}}}, SegTarget{0});
  EXPECT_EQ(f0.flipped, 0.0);
  EXPECT_EQ(f0.relative_delta, -1.0);
}

TEST(Flip, TotalAblationOfBiasFreeNet) {
  const Graph g = plain_det(4);
  const auto items = det_items(g, 10, 3);
  std::vector<int> all(static_cast<std::size_t>(channels_of(g, "r4")));
  std::iota(all.begin(), all.end(), 0);
  int checked = 0;
  for (const auto& it : items) {
    const auto& t = std::get<DetTarget>(it.target);
    const auto out = forward(g, it.image).output();
    if (out[static_cast<std::size_t>(t.box) * 6 + t.cls] <= 0.0f) {
      EXPECT_THROW(flip_concepts_forward(g, it.image, {Condition{"r4", all}}, it.target), TargetError);
      continue;
    }
    EXPECT_EQ(flip_concepts_forward(g, it.image, {Condition{"r4", all}}, it.target).flipped, 0.0);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

// Direct re-evaluation with an explicit channel scaling.
TEST(Flip, MatchesEditedForward) {
  const Graph g = build_toy_model(ToyPreset::SegSmall, 2);
  const auto scene = generate_scene(FixtureSpec{}, 3);
  const auto out = forward(g, scene.image).output();
  const int cls = argmax_class(out, 0);
  std::vector<float> scale(static_cast<std::size_t>(channels_of(g, "r2")), 1.0f);
  scale[2] = scale[5] = 0.0f;
  const ChannelScaling e{g.index_of("r2"), scale};
  const auto edited = forward(g, scene.image, std::span<const ChannelScaling>(&e, 1)).output();
  const auto q = TargetQuantity::make(g.head(), out, SegTarget{cls});
  const auto f = flip_concepts_forward(g, scene.image, {Condition{"r2", {2, 5}}}, SegTarget{cls});
  EXPECT_EQ(f.original, q.evaluate(out));
  EXPECT_EQ(f.flipped, q.evaluate(edited));
  EXPECT_THROW(flip_concepts_forward(g, scene.image, {Condition{"r2", {channels_of(g, "r2")}}}, SegTarget{cls}), ValidationError);
  EXPECT_THROW(flip_concepts_forward(g, scene.image, {Condition{"zz", {0}}}, SegTarget{cls}), ValidationError);
}

TEST(Selection, RankingAndClamping) {
  const auto sel = select_concepts({{0.9, 0.1}, {0.7, 0.3}}, 50, 15);
  EXPECT_EQ(sel.concepts, (std::vector<int>{0, 1}));
  EXPECT_EQ(sel.samples[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sel.samples[1], (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(select_concepts({{0.1, 0.1, 0.5}}, 2, 1).concepts, (std::vector<int>{2, 0}));
  try {
    select_concepts({}, 50, 15);
    FAIL();
  } catch (const TargetError& e) {
    EXPECT_NE(std::string(e.what()).find("class not predicted"), std::string::npos);
  }
}

// Brute force: each channel's relevance from the sum of its conditional
// heatmap, then pairwise rank counting.
TEST(Selection, MatchesExhaustiveRanking) {
  const Graph g = plain_det(5);
  auto items = det_items(g, 30, 4);
  ASSERT_GE(items.size(), 20u);
  items.resize(20);
  const int C = channels_of(g, "r3");
  const auto sel = select_concepts_for_context(g, items, "r3", 50, 15);
  const auto rules = RuleAssignment::preset("zplus");
  std::vector<int> all(static_cast<std::size_t>(C));
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::vector<double>> rel(items.size(), std::vector<double>(static_cast<std::size_t>(C)));
  for (std::size_t j = 0; j < items.size(); ++j) {
    const auto cache = forward(g, items[j].image);
    const Tensor init = target_init(g.head(), cache.output(), items[j].target);
    const auto heats = conditional_heatmaps(g, cache, init, rules, "r3", all);
    for (int c = 0; c < C; ++c) rel[j][c] = heats[static_cast<std::size_t>(c)].sum();
  }
  std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
  for (const auto& r : rel)
    for (int c = 0; c < C; ++c) mean[c] += r[c] / 20.0;
  ASSERT_EQ(sel.concepts.size(), static_cast<std::size_t>(C));
  for (int k = 0; k < C; ++k) {
    const int c = sel.concepts[static_cast<std::size_t>(k)];
    int better = 0, tied = 0;
    for (int o = 0; o < C; ++o) {
      better += mean[o] > mean[c] + 1e-6;
      tied += o != c && std::fabs(mean[o] - mean[c]) <= 1e-6;
    }
    EXPECT_LE(better, k);
    EXPECT_GE(better + tied, k);
    EXPECT_NEAR(sel.mean_relevance[c], mean[c], 1e-5);
    const auto& top = sel.samples[static_cast<std::size_t>(k)];
    ASSERT_EQ(top.size(), 15u);
    for (std::size_t i = 1; i < top.size(); ++i) EXPECT_GE(rel[top[i - 1]][c], rel[top[i]][c] - 1e-6);
    int beaten = 0;
    for (std::size_t j = 0; j < 20; ++j)
      beaten += std::find(top.begin(), top.end(), j) == top.end() && rel[j][c] > rel[top.back()][c] + 1e-6;
    EXPECT_EQ(beaten, 0);
  }
}

TEST(Suite, ShapesAndBounds) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 6);
  const auto items = det_items(g, 12, 5);
  ContextSuiteConfig cfg;
  cfg.top_concepts = 4;
  cfg.top_samples = 5;
  cfg.sensitivity_samples = 6;
  const auto suite = run_context_suite(g, items, "r2", cfg);
  ASSERT_EQ(suite.concepts.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& cc = suite.concepts[k];
    EXPECT_EQ(cc.rank, static_cast<int>(k));
    for (double c : cc.context) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
    EXPECT_LE(cc.context_samples, 5u);
    EXPECT_EQ(cc.sensitivity.pairs + cc.sensitivity.skipped, 48u);
  }
  cfg.threads = 2;
  const auto again = run_context_suite(g, items, "r2", cfg);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(again.concepts[k].channel, suite.concepts[k].channel);
    EXPECT_EQ(again.concepts[k].sensitivity.value, suite.concepts[k].sensitivity.value);
    EXPECT_EQ(again.concepts[k].context[0], suite.concepts[k].context[0]);
  }
  EXPECT_THROW(run_context_suite(g, {}, "r2", cfg), TargetError);
}
