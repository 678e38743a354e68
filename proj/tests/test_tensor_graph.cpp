#include <gtest/gtest.h>

#include <cmath>

#include "generators.hpp"
#include "lcrp/builder.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/gradient.hpp"
#include "lcrp/graph.hpp"
#include "oracle.hpp"

using namespace lcrp;

TEST(Shapes, ConvSamePadding) {
  GraphBuilder b("g", Shape{3, 32, 32}, HeadSpec{}, 1);
  b.conv("c", "input", 8, 3, 1, 1);
  EXPECT_EQ(b.shape("c"), (Shape{8, 32, 32}));
}

TEST(Shapes, PoolUpsampleFlatten) {
  GraphBuilder b("g", Shape{4, 8, 8}, HeadSpec{}, 1);
  b.maxpool("p", "input", 2, 2);
  b.upsample("u", "p", 2);
  b.global_avgpool("gap", "u");
  b.flatten("fc", "u", true);
  EXPECT_EQ(b.shape("p"), (Shape{4, 4, 4}));
  EXPECT_EQ(b.shape("u"), (Shape{4, 8, 8}));
  EXPECT_EQ(b.shape("gap"), (Shape{4}));
  EXPECT_EQ(b.shape("fc"), (Shape{64, 4}));
}

TEST(Shapes, AddMismatchNamesNode) {
  GraphBuilder b("g", Shape{3, 8, 8}, HeadSpec{}, 1);
  b.conv("a", "input", 4, 3, 1, 1);
  b.conv("b", "input", 5, 3, 1, 1);
  try {
    b.add_junction("sum", {"a", "b"});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'sum'"), std::string::npos);
  }
}

TEST(Graph, UnknownInputRejected) {
  Graph g("g", Shape{1, 2, 2}, HeadSpec{});
  NodeSpec n;
  n.id = "r";
  n.op = OpKind::Relu;
  n.inputs = {"missing"};
  EXPECT_THROW(g.add_node(n), ValidationError);
}

TEST(Graph, DuplicateIdRejected) {
  Graph g("g", Shape{1, 2, 2}, HeadSpec{});
  NodeSpec n;
  n.id = "r";
  n.op = OpKind::Relu;
  n.inputs = {"input"};
  g.add_node(n);
  EXPECT_THROW(g.add_node(n), ValidationError);
}

TEST(Graph, WeightLengthChecked) {
  GraphBuilder b("g", Shape{2, 4, 4}, HeadSpec{}, 1);
  EXPECT_THROW(b.conv("c", "input", 3, 3, 1, 1, true, std::vector<float>(5, 1.0f)), ShapeError);
}

TEST(Graph, HeadContract) {
  HeadSpec seg{HeadKind::Segmentation, 3};
  GraphBuilder b("g", Shape{3, 8, 8}, seg, 1);
  b.conv("c", "input", 2, 1);
  EXPECT_THROW(b.build(), ShapeError);

  HeadSpec det{HeadKind::Detection, 2, 16, -1, 4};
  GraphBuilder d("d", Shape{3, 8, 8}, det, 1);
  d.maxpool("p", "input", 2, 2);
  d.conv("c", "p", 6, 1);
  d.flatten("f", "c", true);
  EXPECT_EQ(d.build().size(), 3u);
}

TEST(Ops, DenseDoublesInput) {
  GraphBuilder b("g", Shape{1}, HeadSpec{}, 1);
  b.dense("d", "input", 1, false, std::vector<float>{2.0f});
  const Graph g = b.build();
  const auto c = forward(g, Tensor(Shape{1}, std::vector<float>{3.0f}));
  EXPECT_FLOAT_EQ(c.output()[0], 6.0f);
}

TEST(Ops, MaxPoolTieGoesToFirst) {
  GraphBuilder b("g", Shape{1, 2, 2}, HeadSpec{}, 1);
  b.maxpool("p", "input", 2, 2);
  const Graph g = b.build();
  const Tensor x(Shape{1, 2, 2}, std::vector<float>{1, 1, 0, 1});
  const auto c = forward(g, x);
  const auto gr = gradient(g, c, Tensor(Shape{1, 1, 1}, 1.0f));
  EXPECT_EQ(gr.input.vec(), (std::vector<float>{1, 0, 0, 0}));
}

TEST(Ops, ReluDerivativeAtZeroIsZero) {
  GraphBuilder b("g", Shape{1, 1, 2}, HeadSpec{}, 1);
  b.relu("r", "input");
  const Graph g = b.build();
  const auto c = forward(g, Tensor(Shape{1, 1, 2}, std::vector<float>{0.0f, 1.0f}));
  const auto gr = gradient(g, c, Tensor(Shape{1, 1, 2}, 1.0f));
  EXPECT_EQ(gr.input.vec(), (std::vector<float>{0.0f, 1.0f}));
}

TEST(Forward, NonFiniteNamesNode) {
  GraphBuilder b("g", Shape{1}, HeadSpec{}, 1);
  b.dense("big", "input", 1, false, std::vector<float>{3e38f});
  const Graph g = b.build();
  try {
    forward(g, Tensor(Shape{1}, std::vector<float>{10.0f}));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.node(), "big");
  }
}

TEST(Forward, InputShapeChecked) {
  const Graph g = gen::chain(1, 4);
  EXPECT_THROW(forward(g, Tensor(Shape{3, 4, 4})), ShapeError);
}

// Property: the float engine agrees with the double-precision reference on
// random graphs drawn from the full op set.
TEST(Forward, MatchesReferenceOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Graph g = gen::random_graph(seed);
    Rng rng(seed);
    const Tensor x = gen::random_image(rng, g.input_shape());
    const auto c = forward(g, x);
    const auto ref = oracle::forward(g, x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double scale = std::max(1.0, oracle::max_abs(ref.out[i]));
      EXPECT_LT(oracle::max_abs_diff(c.outputs[i], ref.out[i]), 1e-5 * scale)
          << "seed " << seed << " node " << g.node(static_cast<int>(i)).id;
    }
  }
}

TEST(Forward, ForwardFromMatchesScaledForward) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Graph g = gen::random_graph(seed);
    Rng rng(seed + 100);
    const Tensor x = gen::random_image(rng, g.input_shape());
    const auto base = forward(g, x);
    const int node = 1;
    const int C = base.value(node).shape().channels();
    std::vector<float> scale(static_cast<std::size_t>(C), 1.0f);
    scale[0] = 0.0f;
    const ChannelScaling edit{node, scale};
    const auto full = forward(g, x, std::span<const ChannelScaling>(&edit, 1));
    Tensor replaced = base.value(node);
    std::fill(replaced.channel(0).begin(), replaced.channel(0).end(), 0.0f);
    const auto part = forward_from(g, base, node, replaced);
    EXPECT_EQ(part.output(), full.output()) << "seed " << seed;
  }
}

// Property: analytic gradients agree with central finite differences.
TEST(Gradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    gen::GraphOptions o;
    o.size = 4;
    o.pools = seed % 2 == 0;
    const Graph g = gen::random_graph(seed, o);
    Rng rng(seed + 7);
    const Tensor x = gen::random_image(rng, g.input_shape());
    const auto c = forward(g, x);
    const Tensor seed_t = gen::random_tensor(rng, c.output().shape());
    auto f = [&](const Tensor& in) {
      const auto r = oracle::forward(g, in);
      double s = 0;
      for (std::size_t i = 0; i < seed_t.size(); ++i) s += seed_t[i] * r.out.back()[i];
      return s;
    };
    const auto fd = oracle::finite_difference(f, x, 1e-4);
    const auto gr = gradient(g, c, seed_t);
    // Kinks (relu at 0, maxpool ties) are measure-zero; compare with a relative bound.
    const double scale = std::max(1.0, oracle::max_abs(fd));
    EXPECT_LT(oracle::max_abs_diff(gr.input, fd), 1e-2 * scale) << "seed " << seed;
  }
}

TEST(Gradient, WeightGradientMatchesFiniteDifferences) {
  GraphBuilder b("g", Shape{2, 5, 5}, HeadSpec{}, 3);
  auto x = b.conv("c1", "input", 3, 3, 1, 1);
  x = b.batchnorm("bn", x);
  x = b.relu("r", x);
  x = b.global_avgpool("gap", x);
  b.dense("fc", x, 2);
  Graph g = b.build();
  Rng rng(5);
  const Tensor in = gen::random_image(rng, g.input_shape());
  const Tensor seed_t(Shape{2}, std::vector<float>{1.0f, -0.5f});
  std::vector<float> wg(g.weights().size(), 0.0f);
  gradient(g, forward(g, in), seed_t, wg);

  // Running mean and variance are not trainable.
  const int bn = g.index_of("bn");
  std::vector<std::size_t> frozen;
  for (const char* nm : {"mean", "var"}) {
    const auto r = g.node(bn).weights.at(nm);
    for (std::size_t k = 0; k < r.length; ++k) frozen.push_back(r.offset + k);
  }
  for (std::size_t k = 0; k < g.weights().size(); ++k) {
    if (std::find(frozen.begin(), frozen.end(), k) != frozen.end()) {
      EXPECT_EQ(wg[k], 0.0f);
      continue;
    }
    const float w0 = g.weights()[k];
    auto eval = [&](float w) {
      g.weights()[k] = w;
      const auto r = oracle::forward(g, in);
      g.weights()[k] = w0;
      return seed_t[0] * r.out.back()[0] + seed_t[1] * r.out.back()[1];
    };
    const double h = 1e-3;
    const double fd = (eval(w0 + static_cast<float>(h)) - eval(w0 - static_cast<float>(h))) / (2 * h);
    EXPECT_NEAR(wg[k], fd, 2e-3 * std::max(1.0, std::fabs(fd))) << "weight " << k;
  }
}

TEST(Random, StreamsAreDeterministic) {
  Rng a = Rng::stream(42, 7), b = Rng::stream(42, 7), c = Rng::stream(42, 8);
  const auto va = a.bits();
  EXPECT_EQ(va, b.bits());
  EXPECT_NE(va, c.bits());
  Rng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
}
