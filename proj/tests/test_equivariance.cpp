#include <catch_amalgamated.hpp>

#include <cmath>

#include "seammil/equivariance.hpp"
#include "test_util.hpp"

using namespace seammil;
using Catch::Approx;

namespace {

ActivationMap<double> amap(Grid<double> g) { return ActivationMap<double>{std::move(g), CamKind::original, true}; }

// Direct half-pixel bilinear sample, written independently of the
// tap tables used by the library.
double bilinear_at(const Grid<double>& in, int c, double sy, double sx) {
  auto clampi = [](int v, int lo, int hi) { return std::max(lo, std::min(v, hi)); };
  sy = std::max(sy, 0.0);
  sx = std::max(sx, 0.0);
  const int y0 = clampi(static_cast<int>(sy), 0, in.height() - 1);
  const int x0 = clampi(static_cast<int>(sx), 0, in.width() - 1);
  const int y1 = std::min(y0 + 1, in.height() - 1);
  const int x1 = std::min(x0 + 1, in.width() - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  return (1 - fy) * ((1 - fx) * in(c, y0, x0) + fx * in(c, y0, x1)) + fy * ((1 - fx) * in(c, y1, x0) + fx * in(c, y1, x1));
}

Grid<double> oracle_resize(const Grid<double>& in, int oh, int ow) {
  Grid<double> out(in.channels(), oh, ow);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const double sy = (y + 0.5) * in.height() / oh - 0.5;
        const double sx = (x + 0.5) * in.width() / ow - 0.5;
        out(c, y, x) = bilinear_at(in, c, sy, sx);
      }
  return out;
}

Grid<double> two_by_two() {
  Grid<double> g(1, 2, 2);
  g(0, 0, 0) = 1;
  g(0, 0, 1) = 2;
  g(0, 1, 0) = 3;
  g(0, 1, 1) = 4;
  return g;
}

}  // namespace

TEST_CASE("apply_affine: identity is an equal copy", "[equivariance]") {
  Rng rng(1);
  const auto g = testutil::random_grid(rng, 3, 5, 7);
  CHECK(apply_affine(g, AffineSpec::identity()) == g);
}

TEST_CASE("apply_affine: hflip permutes columns", "[equivariance]") {
  const auto f = apply_affine(two_by_two(), AffineSpec::hflip());
  CHECK(f(0, 0, 0) == 2);
  CHECK(f(0, 0, 1) == 1);
  CHECK(f(0, 1, 0) == 4);
  CHECK(f(0, 1, 1) == 3);
}

TEST_CASE("apply_affine: vflip and quarter turns", "[equivariance]") {
  const auto v = apply_affine(two_by_two(), AffineSpec::vflip());
  CHECK(v(0, 0, 0) == 3);
  CHECK(v(0, 1, 1) == 2);
  // Counter-clockwise: the top-right value moves to the top-left.
  const auto r = apply_affine(two_by_two(), AffineSpec::rotation(90));
  CHECK(r(0, 0, 0) == 2);
  CHECK(r(0, 0, 1) == 4);
  CHECK(r(0, 1, 0) == 1);
  CHECK(r(0, 1, 1) == 3);
  Rng rng(2);
  const auto g = testutil::random_grid(rng, 2, 3, 5);
  const auto t = apply_affine(g, AffineSpec::rotation(90));
  CHECK(t.height() == 5);
  CHECK(t.width() == 3);
  CHECK(apply_affine(g, AffineSpec::rotation(-90)) == apply_affine(g, AffineSpec::rotation(270)));
}

TEST_CASE("apply_affine: rescale 0.4 of 512 gives 205", "[equivariance]") {
  CHECK(rescaled_size(512, 0.4) == 205);
  Grid<float> img(3, 512, 512, 0.25f);
  const auto out = apply_affine(img, AffineSpec::rescale(0.4));
  CHECK(out.height() == 205);
  CHECK(out.width() == 205);
  for (float v : out.values()) REQUIRE(v == Approx(0.25f));
}

TEST_CASE("rescale matches an independent bilinear oracle", "[equivariance]") {
  Rng rng(3);
  for (const auto& [h, w, s] : {std::tuple{512, 512, 0.4}, std::tuple{20, 13, 0.4}, std::tuple{7, 9, 2.0},
                                std::tuple{8, 8, 0.5}, std::tuple{5, 3, 2.5}}) {
    const auto g = testutil::random_grid(rng, 2, h, w);
    const auto out = apply_affine(g, AffineSpec::rescale(s));
    const auto ref = oracle_resize(g, rescaled_size(h, s), rescaled_size(w, s));
    REQUIRE(out.same_shape(ref));
    CHECK(testutil::max_abs_diff(out, ref) < 1e-12);
  }
}

TEST_CASE("apply_affine: collapsing rescales are rejected", "[equivariance]") {
  Grid<double> g(1, 2, 2);
  CHECK_THROWS_AS(apply_affine(g, AffineSpec::rescale(0.1)), InvalidSpecError);
  CHECK_THROWS_AS(AffineSpec::rescale(0.0).validate(), InvalidSpecError);
  CHECK_THROWS_AS(AffineSpec::rescale(-1.0).validate(), InvalidSpecError);
  CHECK_THROWS_AS(AffineSpec::rotation(45).validate(), InvalidSpecError);
}

TEST_CASE("flips and rotations are exact involutions", "[equivariance][property]") {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto g = testutil::random_grid(rng, rng.uniform_int(1, 3), rng.uniform_int(1, 9), rng.uniform_int(1, 9));
    REQUIRE(apply_affine(apply_affine(g, AffineSpec::hflip()), AffineSpec::hflip()) == g);
    REQUIRE(apply_affine(apply_affine(g, AffineSpec::vflip()), AffineSpec::vflip()) == g);
    Grid<double> r = g;
    for (int i = 0; i < 4; ++i) r = apply_affine(r, AffineSpec::rotation(90));
    REQUIRE(r == g);
    REQUIRE(apply_affine(apply_affine(g, AffineSpec::rotation(90)), AffineSpec::rotation(90).inverse()) == g);
  }
}

TEST_CASE("rescale round trip restores dims to within one cell", "[equivariance][property]") {
  for (double s : {0.4, 0.5, 2.0}) {
    for (int n = 3; n <= 600; ++n) {
      const int m = rescaled_size(n, s);
      const int back = rescaled_size(m, 1.0 / s);
      REQUIRE(std::abs(back - n) <= 1);
    }
  }
  // Exact cases come back exactly.
  CHECK(rescaled_size(rescaled_size(10, 0.4), 2.5) == 10);
  CHECK(rescaled_size(rescaled_size(64, 0.5), 2.0) == 64);
  Grid<double> g(1, 6, 6);
  const auto small = apply_affine(g, AffineSpec::rescale(0.4));
  const auto back = apply_affine(small, AffineSpec::rescale(0.4).inverse());
  CHECK(back.height() == 5);
  CHECK(match_dims(back, 6, 6).height() == 6);
}

TEST_CASE("match_dims crops or pads by at most one cell", "[equivariance]") {
  Rng rng(5);
  const auto g = testutil::random_grid(rng, 1, 5, 5);
  const auto c = match_dims(g, 4, 4);
  CHECK(c(0, 0, 0) == g(0, 0, 0));
  CHECK(c(0, 3, 3) == g(0, 3, 3));
  const auto p = match_dims(g, 6, 6);
  CHECK(p(0, 4, 4) == g(0, 4, 4));
  CHECK(p(0, 5, 5) == 0.0);
  CHECK_THROWS_AS(match_dims(g, 3, 5), DimensionError);
}

TEST_CASE("er_loss: hand cases", "[equivariance]") {
  Rng rng(6);
  const auto a = amap(testutil::random_grid(rng, 2, 3, 3, 0.0, 1.0));
  CHECK(er_loss(a, a, AffineSpec::identity()) == 0.0);

  Grid<double> x(1, 1, 1, 0.8);
  Grid<double> y(1, 1, 1, 0.3);
  CHECK(er_loss(amap(x), amap(y), AffineSpec::identity()) == Approx(0.5).epsilon(1e-15));

  const auto p = testutil::random_grid(rng, 2, 2, 2, 0.0, 1.0);
  const auto q = testutil::random_grid(rng, 2, 2, 2, 0.0, 1.0);
  double sum = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) sum += std::abs(p(c, i, 1 - j) - q(c, i, j));
  CHECK(er_loss(amap(p), amap(q), AffineSpec::hflip()) == Approx(sum / 8.0).margin(1e-7));

  CHECK_THROWS_AS(er_loss(amap(Grid<double>(2, 4, 4)), amap(Grid<double>(2, 2, 2)), AffineSpec::identity()),
                  DimensionError);
}

TEST_CASE("er_loss properties at the identity spec", "[equivariance][property]") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = amap(testutil::random_grid(rng, 2, 3, 4, 0.0, 1.0));
    auto b = a;
    if (trial % 2) b.data(rng.uniform_int(0, 1), rng.uniform_int(0, 2), rng.uniform_int(0, 3)) += 0.25;
    const double ab = er_loss(a, b, AffineSpec::identity());
    REQUIRE(ab == er_loss(b, a, AffineSpec::identity()));
    REQUIRE(ab >= 0.0);
    REQUIRE((ab == 0.0) == (a.data == b.data));
  }
}

TEST_CASE("ecr_loss: hand cases", "[equivariance]") {
  Rng rng(8);
  const auto a = amap(testutil::random_grid(rng, 2, 3, 3, 0.0, 1.0));
  CHECK(ecr_loss(a, a, a, a, AffineSpec::identity()) == 0.0);

  auto shifted = a;
  for (auto& v : shifted.data.values()) v += 0.1;
  CHECK(ecr_loss(a, a, a, shifted, AffineSpec::identity()) == Approx(0.1).epsilon(1e-12));

  const auto o = testutil::random_grid(rng, 2, 2, 3, 0.0, 1.0);
  const auto ro = testutil::random_grid(rng, 2, 2, 3, 0.0, 1.0);
  const auto f = testutil::random_grid(rng, 2, 2, 3, 0.0, 1.0);
  const auto rf = testutil::random_grid(rng, 2, 2, 3, 0.0, 1.0);
  double t1 = 0.0;
  double t2 = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        t1 += std::abs(o(c, 1 - i, j) - rf(c, i, j));
        t2 += std::abs(ro(c, 1 - i, j) - f(c, i, j));
      }
  CHECK(ecr_loss(amap(o), amap(ro), amap(f), amap(rf), AffineSpec::vflip()) == Approx((t1 + t2) / 12.0).margin(1e-7));
}

TEST_CASE("L1 subgradient at a tie is zero", "[equivariance]") {
  Rng rng(9);
  const auto a = amap(testutil::random_grid(rng, 2, 3, 3, 0.0, 1.0));
  const auto g = er_loss_backward(a, a, AffineSpec::identity());
  for (double v : g.d_orig.values()) CHECK(v == 0.0);
  for (double v : g.d_af.values()) CHECK(v == 0.0);
}

TEST_CASE("AffineSpec text round trip", "[equivariance]") {
  for (const auto& s : {AffineSpec::identity(), AffineSpec::rescale(0.4), AffineSpec::hflip(), AffineSpec::vflip(),
                        AffineSpec::rotation(270)}) {
    CHECK(AffineSpec::parse(s.to_string()) == s);
  }
  CHECK_THROWS_AS(AffineSpec::parse("shear:2"), InvalidSpecError);
  CHECK_THROWS_AS(AffineSpec::parse("rescale:abc"), InvalidSpecError);
}
