#include <catch_amalgamated.hpp>

#include <numeric>

#include "seammil/mil_head.hpp"
#include "test_util.hpp"

using namespace seammil;
using Catch::Approx;

namespace {

MilParams<double> random_params(Rng& rng, int l, int k, int d) {
  MilParams<double> p;
  p.fuse = testutil::random_matrix(rng, k, 2 * l);
  p.w1 = testutil::random_matrix(rng, d, 1);
  p.w2 = testutil::random_matrix(rng, d, k);
  p.classifier = testutil::random_matrix(rng, 2, k);
  p.bias = testutil::random_matrix(rng, 2, 1);
  return p;
}

MilParams<double> scalar_params(double w1, double w2) {
  MilParams<double> p;
  p.fuse = Matrix<double>::Ones(1, 2);
  p.w1 = Vector<double>::Constant(1, w1);
  p.w2 = Matrix<double>::Constant(1, 1, w2);
  p.classifier = Matrix<double>::Zero(2, 1);
  p.bias = Vector<double>::Zero(2);
  return p;
}

InstanceBag<double> bag_of(Grid<double> g) { return InstanceBag<double>{std::move(g)}; }

FeatureMap<double> fmap(Grid<double> g) { return FeatureMap<double>{std::move(g), 8}; }

}  // namespace

TEST_CASE("build_instance_bag: selector fuse returns f_orig", "[mil_head]") {
  Rng rng(1);
  const int l = 4;
  const auto f = fmap(testutil::random_grid(rng, l, 3, 3));
  MilParams<double> p = random_params(rng, l, l, 2);
  p.fuse = Matrix<double>::Zero(l, 2 * l);
  p.fuse.leftCols(l) = Matrix<double>::Identity(l, l);
  const auto bag = build_instance_bag(f, f, AffineSpec::identity(), p);
  CHECK(bag.k() == l);
  CHECK(bag.fused == f.data);
}

TEST_CASE("build_instance_bag: shape contract", "[mil_head]") {
  Rng rng(2);
  const auto f = fmap(testutil::random_grid(rng, 8, 16, 16));
  const auto af = fmap(apply_affine(f.data, AffineSpec::rescale(0.4)));
  const auto bag = build_instance_bag(f, af, AffineSpec::rescale(0.4), random_params(rng, 8, 32, 4));
  CHECK(bag.fused.channels() == 32);
  CHECK(bag.fused.height() == 16);
  CHECK(bag.fused.width() == 16);
  CHECK(bag.instances() == 256);
}

TEST_CASE("build_instance_bag matches a resize-then-project oracle", "[mil_head]") {
  Rng rng(3);
  const int l = 8;
  const int k = 5;
  const auto f = fmap(testutil::random_grid(rng, l, 20, 20));
  const auto af = fmap(testutil::random_grid(rng, l, 8, 8));
  const auto p = random_params(rng, l, k, 3);
  const auto bag = build_instance_bag(f, af, AffineSpec::rescale(0.4), p);
  const auto back = resize_bilinear(af.data, 20, 20);
  double worst = 0.0;
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x)
      for (int o = 0; o < k; ++o) {
        double s = 0.0;
        for (int c = 0; c < l; ++c) s += p.fuse(o, c) * f.data(c, y, x) + p.fuse(o, l + c) * back(c, y, x);
        worst = std::max(worst, std::abs(s - bag.fused(o, y, x)));
      }
  CHECK(worst < 1e-5);
}

TEST_CASE("build_instance_bag rejects channel mismatches", "[mil_head]") {
  Rng rng(4);
  const auto f = fmap(Grid<double>(4, 3, 3));
  CHECK_THROWS_AS(build_instance_bag(f, fmap(Grid<double>(5, 3, 3)), AffineSpec::identity(), random_params(rng, 4, 2, 2)),
                  DimensionError);
  CHECK_THROWS_AS(build_instance_bag(f, f, AffineSpec::identity(), random_params(rng, 3, 2, 2)), DimensionError);
}

TEST_CASE("attention_weights: hand cases", "[mil_head]") {
  SECTION("w1 = 0 gives 0.5 everywhere") {
    Rng rng(5);
    auto p = random_params(rng, 2, 3, 4);
    p.w1.setZero();
    const auto a = attention_weights(bag_of(testutil::random_grid(rng, 3, 2, 2)), p);
    for (Eigen::Index i = 0; i < a.weights.size(); ++i) CHECK(a.weights(i) == 0.5);
  }
  SECTION("relu clamps a negative instance") {
    const auto a = attention_weights(bag_of(Grid<double>(1, 1, 1, -5.0)), scalar_params(1, 1));
    CHECK(a.weights(0) == 0.5);
  }
  SECTION("sigmoid of 2") {
    const auto a = attention_weights(bag_of(Grid<double>(1, 1, 1, 2.0)), scalar_params(1, 1));
    CHECK(a.weights(0) == Approx(0.8808).margin(1e-4));
    CHECK(a.weights(0) == Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
  }
  SECTION("K mismatch") {
    Rng rng(6);
    CHECK_THROWS_AS(attention_weights(bag_of(Grid<double>(4, 2, 2)), random_params(rng, 2, 3, 2)), DimensionError);
  }
}

TEST_CASE("attention weights lie strictly inside (0, 1)", "[mil_head][property]") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_params(rng, 2, 4, 3);
    const auto a = attention_weights(bag_of(testutil::random_grid(rng, 4, 3, 3, -5.0, 5.0)), p);
    for (Eigen::Index i = 0; i < a.weights.size(); ++i) {
      REQUIRE(a.weights(i) > 0.0);
      REQUIRE(a.weights(i) < 1.0);
    }
  }
}

TEST_CASE("attention is monotone in the instance for positive w1, w2", "[mil_head][property]") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = scalar_params(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0));
    Grid<double> g(1, 1, 2);
    g(0, 0, 0) = rng.uniform(-3.0, 3.0);
    g(0, 0, 1) = rng.uniform(-3.0, 3.0);
    const auto a = attention_weights(bag_of(g), p);
    if (g(0, 0, 0) <= g(0, 0, 1)) {
      REQUIRE(a.weights(0) <= a.weights(1));
    } else {
      REQUIRE(a.weights(0) >= a.weights(1));
    }
  }
}

TEST_CASE("apply_attention: hand cases", "[mil_head]") {
  Rng rng(9);
  const auto bag = bag_of(testutil::random_grid(rng, 3, 2, 2));
  AttentionWeights<double> half{Vector<double>::Constant(4, 0.5)};
  const auto g = apply_attention(bag, half);
  for (std::size_t i = 0; i < g.fused.size(); ++i) CHECK(g.fused[i] == 0.5 * bag.fused[i]);

  AttentionWeights<double> q{Vector<double>::Constant(1, 0.25)};
  CHECK(apply_attention(bag_of(Grid<double>(1, 1, 1, 8.0)), q).fused(0, 0, 0) == 2.0);

  const auto b3 = bag_of(testutil::random_grid(rng, 3, 1, 4));
  AttentionWeights<double> a{testutil::random_matrix(rng, 4, 1, 0.0, 1.0)};
  const auto out = apply_attention(b3, a);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) CHECK(out.fused(c, 0, i) == Approx(b3.fused(c, 0, i) * a.weights(i)).margin(1e-7));

  CHECK_THROWS_AS(apply_attention(b3, AttentionWeights<double>{Vector<double>::Constant(3, 0.5)}), DimensionError);
}

TEST_CASE("mil_classify: hand cases", "[mil_head]") {
  Rng rng(10);
  auto p = random_params(rng, 2, 3, 2);
  p.classifier.setZero();
  p.bias.setZero();
  const auto gated = bag_of(testutil::random_grid(rng, 3, 2, 2));
  const auto probs = mil_classify(gated, p);
  CHECK(probs(0) == 0.5);
  CHECK(probs(1) == 0.5);

  p.bias << 10.0, -10.0;
  const auto sharp = mil_classify(gated, p);
  CHECK(sharp(0) == Approx(1.0).margin(1e-8));
  CHECK(sharp(1) == Approx(2.06e-9).epsilon(1e-2));
  CHECK(sharp(1) == Approx(std::exp(-20.0) / (1.0 + std::exp(-20.0))).epsilon(1e-12));

  for (int trial = 0; trial < 100; ++trial) {
    const auto q = random_params(rng, 2, 3, 2);
    const auto pr = mil_classify(bag_of(testutil::random_grid(rng, 3, 2, 3, -20.0, 20.0)), q);
    REQUIRE(pr.sum() == Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("permuting instances permutes attention and keeps the output", "[mil_head][property]") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_params(rng, 2, 4, 3);
    const auto g = testutil::random_grid(rng, 4, 1, 6);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    Grid<double> h(4, 1, 6);
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 6; ++i) h(c, 0, i) = g(c, 0, perm[static_cast<std::size_t>(i)]);
    const auto a = attention_weights(bag_of(g), p);
    const auto b = attention_weights(bag_of(h), p);
    for (int i = 0; i < 6; ++i) REQUIRE(b.weights(i) == a.weights(perm[static_cast<std::size_t>(i)]));
    const auto ya = mil_classify(apply_attention(bag_of(g), a), p);
    const auto yb = mil_classify(apply_attention(bag_of(h), b), p);
    REQUIRE(ya(1) == Approx(yb(1)).margin(1e-12));
  }
}
