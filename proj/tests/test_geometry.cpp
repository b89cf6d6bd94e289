#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "flowe/flo.hpp"
#include "flowe/geometry.hpp"

using namespace flowe;
using namespace flowe::geom;

namespace {

Tensor<double> linear_map(std::size_t c, std::size_t h, std::size_t w, double a, double b, double k) {
  Tensor<double> t(Shape{c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        t.at(ch, y, x) = (a + ch) * static_cast<double>(x) + (b - ch) * static_cast<double>(y) + k;
  return t;
}

AffineMap random_affine(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  for (;;) {
    AffineMap a;
    for (double& v : a.m) v = d(rng);
    if (std::abs(a.det()) > 0.1) return a;
  }
}

}  // namespace

TEST_CASE("bilinear sampling") {
  Tensor<double> four(Shape{1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  CHECK(bilinear_sample(four, 0.5, 0.5).values[0] == doctest::Approx(1.5));

  auto f = linear_map(1, 6, 7, 3.0, 2.0, 0.0);
  auto at_node = bilinear_sample(f, 2.0, 3.0);
  CHECK(at_node.in_bounds);
  CHECK(at_node.values[0] == f.at(0, 3, 2));
  CHECK(std::abs(bilinear_sample(f, 1.25, 0.5).values[0] - 4.75) < 1e-12);

  auto out = bilinear_sample(f, -0.01, 2.0);
  CHECK_FALSE(out.in_bounds);
  CHECK(out.values[0] == 0.0);
  CHECK_FALSE(bilinear_sample(f, 6.0001, 0.0).in_bounds);
  CHECK(bilinear_sample(f, 6.0, 5.0).in_bounds);  // last pixel center is inside
}

TEST_CASE("bilinear sampling is exact on linear fields") {
  auto f = linear_map(3, 9, 11, 0.7, -1.3, 2.5);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ux(0.0, 10.0), uy(0.0, 8.0);
  for (int i = 0; i < 2000; ++i) {
    const double x = ux(rng), y = uy(rng);
    auto s = bilinear_sample(f, x, y);
    REQUIRE(s.in_bounds);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(s.values[c] - ((0.7 + c) * x + (-1.3 - c) * y + 2.5)) < 1e-9);
  }
}

TEST_CASE("affine maps") {
  auto p = AffineMap::identity().apply(5, 7);
  CHECK(p.x == 5.0);
  CHECK(p.y == 7.0);
  auto q = AffineMap::scaling(2.0).apply(3, 4);
  CHECK(q.x == 6.0);
  CHECK(q.y == 8.0);

  auto r = AffineMap::rotation(std::numbers::pi / 6);
  auto id = compose(r, invert(r));
  const std::array<double, 6> eye{1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) CHECK(std::abs(id.m[i] - eye[i]) < 1e-9);

  // y points down, so a positive angle turns +x toward +y.
  auto turned = AffineMap::rotation(std::numbers::pi / 2).apply(1, 0);
  CHECK(std::abs(turned.x) < 1e-15);
  CHECK(std::abs(turned.y - 1.0) < 1e-15);

  CHECK_THROWS_AS(invert(AffineMap::scaling(1.0, 0.0)), DegeneracyError);
  AffineMap tiny = AffineMap::scaling(1e-7, 1e-7);
  CHECK_THROWS_AS(require_invertible(tiny), DegeneracyError);
}

TEST_CASE("affine round trip and associativity on random maps") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> pt(-50.0, 50.0);
  for (int i = 0; i < 500; ++i) {
    auto a = random_affine(rng), b = random_affine(rng), c = random_affine(rng);
    const Point p{pt(rng), pt(rng)};
    auto back = invert(a).apply(a.apply(p));
    CHECK(std::abs(back.x - p.x) < 1e-9);
    CHECK(std::abs(back.y - p.y) < 1e-9);
    auto l = compose(compose(a, b), c).apply(p);
    auto r = compose(a, compose(b, c)).apply(p);
    CHECK(std::abs(l.x - r.x) < 1e-9 * (1 + std::abs(l.x)));
    CHECK(std::abs(l.y - r.y) < 1e-9 * (1 + std::abs(l.y)));
    auto direct = a.apply(b.apply(p));
    auto composed = compose(a, b).apply(p);
    CHECK(std::abs(direct.x - composed.x) < 1e-9 * (1 + std::abs(direct.x)));
  }
}

TEST_CASE("compose_transform examples") {
  const std::size_t h = 6, w = 9;
  SUBCASE("identity") {
    auto t = compose_transform(AffineMap::identity(), FlowField::constant(h, w, 0, 0), AffineMap::identity(), {h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        CHECK(t.valid(y, x));
        CHECK(t.tx(y, x) == x);
        CHECK(t.ty(y, x) == y);
      }
  }
  SUBCASE("constant flow invalidates the columns that exit") {
    auto t = compose_transform(AffineMap::identity(), FlowField::constant(h, w, 2, 0), AffineMap::identity(), {h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        CHECK(t.valid(y, x) == (x + 2 < w));
        if (t.valid(y, x)) CHECK(t.tx(y, x) == x + 2.0);
      }
  }
  SUBCASE("2x upscale halves coordinates") {
    // First view is 2h x 2w; y = x / 2 lands in the raw frame, flow 0, second
    // view is the raw frame itself.
    auto t = compose_transform(AffineMap::scaling(2.0), FlowField::constant(h, w, 0, 0), AffineMap::identity(),
                               {2 * h, 2 * w}, {h, w});
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x) {
        const bool inside = x <= 2 * (w - 1) && y <= 2 * (h - 1);
        CHECK(t.valid(y, x) == inside);
        if (inside) {
          CHECK(t.tx(y, x) == doctest::Approx(x / 2.0));
          CHECK(t.ty(y, x) == doctest::Approx(y / 2.0));
        }
      }
  }
  SUBCASE("invalid flow pixels propagate") {
    auto flow = FlowField::constant(h, w, 0, 0);
    flow.valid(2, 3) = 0;
    auto t = compose_transform(AffineMap::identity(), flow, AffineMap::identity(), {h, w});
    CHECK_FALSE(t.valid(2, 3));
    CHECK(t.valid(2, 4));
    // Half-pixel shift: x reads the flow at x + 0.5, touching columns x and x + 1.
    auto half = compose_transform(AffineMap::translation(-0.5, 0), flow, AffineMap::identity(), {h, w});
    CHECK_FALSE(half.valid(2, 2));
    CHECK_FALSE(half.valid(2, 3));
    CHECK(half.valid(2, 4));
    CHECK(half.valid(2, 1));
  }
}

TEST_CASE("compose_transform of affines only matches direct evaluation") {
  std::mt19937_64 rng(5);
  const std::size_t h = 24, w = 40;
  for (int i = 0; i < 20; ++i) {
    const double ang = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    const double s = std::uniform_real_distribution<double>(0.7, 1.4)(rng);
    auto a1 = compose(AffineMap::translation(3, -2), compose(AffineMap::rotation(ang), AffineMap::scaling(s)));
    auto a2 = compose(AffineMap::translation(-1, 4), AffineMap::scaling(1.0 / s));
    auto t = compose_transform(a1, FlowField::constant(h, w, 0, 0), a2, {h, w});
    auto direct = compose(a2, invert(a1));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        auto raw = invert(a1).apply(x, y);
        auto q = direct.apply(x, y);
        const bool expect = in_frame(w, h, raw.x, raw.y) && in_frame(w, h, q.x, q.y);
        CHECK(t.valid(y, x) == expect);
        if (expect) {
          CHECK(std::abs(t.tx(y, x) - q.x) < 1e-9);
          CHECK(std::abs(t.ty(y, x) - q.y) < 1e-9);
        }
      }
  }
}

TEST_CASE("mismatched shapes are rejected") {
  FlowField bad(4, 5);
  bad.v = Grid<double>(4, 6);
  CHECK_THROWS_AS(bad.check(), DimensionError);
  CHECK_THROWS_AS(compose_transform(AffineMap::identity(), bad, AffineMap::identity(), {4, 5}), DimensionError);
}

TEST_CASE("warp_features") {
  auto ramp = linear_map(1, 5, 10, 1.0, 0.0, 0.0);
  auto id = DenseCorrespondence::identity(5, 10);
  auto same = warp_features(ramp, id);
  CHECK(same.features == ramp);
  CHECK(count_set(same.mask) == 50);

  auto shift = compose_transform(AffineMap::identity(), FlowField::constant(5, 10, 2, 0), AffineMap::identity(), {5, 10});
  auto moved = warp_features(ramp, shift);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 10; ++x) {
      CHECK(moved.mask(y, x) == (x < 8));
      CHECK(moved.features.at(0, y, x) == (x < 8 ? x + 2.0 : 0.0));
    }

  // Delta at (3, 2) of an 8 x 6 map; the first grid is the 2x zoom, so the
  // delta shows up at (6, 4) with weight 1 and falls off linearly around it.
  Tensor<double> delta(Shape{1, 6, 8});
  delta.at(0, 2, 3) = 1.0;
  auto zoom = compose_transform(AffineMap::scaling(2.0), FlowField::constant(6, 8, 0, 0), AffineMap::identity(),
                                {12, 16}, {6, 8});
  auto up = warp_features(delta, zoom);
  CHECK(up.features.at(0, 4, 6) == 1.0);
  CHECK(up.features.at(0, 4, 7) == 0.5);
  CHECK(up.features.at(0, 5, 7) == 0.25);
  CHECK(up.features.at(0, 4, 8) == 0.0);
  double total = 0.0;
  for (double v : up.features.values()) total += v;
  CHECK(total == 4.0);
}

TEST_CASE("warp is linear on the shared mask") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n01;
  Tensor<double> f(Shape{2, 7, 9}), g(Shape{2, 7, 9});
  for (double& v : f.values()) v = n01(rng);
  for (double& v : g.values()) v = n01(rng);
  auto corr = compose_transform(AffineMap::rotation(0.2), FlowField::constant(7, 9, 0.3, -0.4),
                                AffineMap::translation(0.5, 0.25), {7, 9});
  Tensor<double> mix(Shape{2, 7, 9});
  for (std::size_t i = 0; i < mix.numel(); ++i) mix.values()[i] = 1.5 * f.values()[i] - 0.25 * g.values()[i];
  auto wm = warp_features(mix, corr), wf = warp_features(f, corr), wg = warp_features(g, corr);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 9; ++x)
        if (wm.mask(y, x))
          CHECK(std::abs(wm.features.at(c, y, x) - (1.5 * wf.features.at(c, y, x) - 0.25 * wg.features.at(c, y, x))) <
                1e-9);
}

TEST_CASE("warp then inverse warp restores linear maps") {
  const std::size_t h = 20, w = 30;
  auto f = linear_map(2, h, w, 0.4, 1.1, -3.0);
  auto fwd = compose(AffineMap::translation(2.5, 1.0), AffineMap::rotation(0.1));
  auto zero = FlowField::constant(h, w, 0, 0);
  auto t = compose_transform(AffineMap::identity(), zero, fwd, {h, w});
  auto t_inv = compose_transform(AffineMap::identity(), zero, invert(fwd), {h, w});
  auto once = warp_features(f, t_inv);  // once(x) = f(fwd^-1 x)
  auto twice = warp_features(once.features, t);
  std::size_t checked = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!twice.mask(y, x)) continue;
      // All four bilinear neighbors of fwd(x) must have been valid in `once`.
      auto tap = bilinear_tap(w, h, t.tx(y, x), t.ty(y, x));
      if (!(once.mask(tap.y0, tap.x0) && once.mask(tap.y0, tap.x1) && once.mask(tap.y1, tap.x0) &&
            once.mask(tap.y1, tap.x1)))
        continue;
      ++checked;
      for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(twice.features.at(c, y, x) - f.at(c, y, x)) < 1e-9);
    }
  CHECK(checked > 200);
}

TEST_CASE("fb_consistency") {
  const std::size_t h = 8, w = 12;
  auto zero = FlowField::constant(h, w, 0, 0);
  CHECK(count_set(fb_consistency(zero, zero)) == h * w);

  auto f = FlowField::constant(h, w, 3, 0), b = FlowField::constant(h, w, -3, 0);
  auto m = fb_consistency(f, b);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) CHECK(m(y, x) == (x + 3 < w));

  auto f5 = FlowField::constant(h, w, 5, 0);
  auto m5 = fb_consistency(f5, zero, 0.01, 0.5);
  CHECK(count_set(m5) == 0);
  // 25 <= alpha * 25 + 0.5 holds once alpha >= 0.98.
  CHECK(m5(0, 0) == 0);
  CHECK(fb_consistency(f5, zero, 0.98, 0.5)(0, 0) == 1);
}

TEST_CASE("upsample_bilinear and its adjoint") {
  Tensor<double> row(Shape{1, 1, 2}, std::vector<double>{0, 1});
  auto up = upsample_bilinear(row, 1, 4);
  CHECK(up.at(0, 0, 0) == 0.0);
  CHECK(up.at(0, 0, 1) == doctest::Approx(1.0 / 3));
  CHECK(up.at(0, 0, 2) == doctest::Approx(2.0 / 3));
  CHECK(up.at(0, 0, 3) == 1.0);

  Tensor<double> c(Shape{2, 3, 4}, 0.75);
  const auto cu = upsample_bilinear(c, 9, 10);
  for (double v : cu.values()) CHECK(std::abs(v - 0.75) < 1e-15);

  CHECK_THROWS_AS(upsample_bilinear(c, 2, 4), DimensionError);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  for (auto [h, w, H, W] : {std::array<std::size_t, 4>{4, 8, 32, 64}, {3, 5, 7, 11}, {1, 1, 5, 5}, {2, 3, 2, 3}}) {
    Tensor<double> a(Shape{3, h, w}), b(Shape{3, H, W});
    for (double& v : a.values()) v = n01(rng);
    for (double& v : b.values()) v = n01(rng);
    auto ua = upsample_bilinear(a, H, W);
    auto adj = upsample_bilinear_adjoint(b, h, w);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < ua.numel(); ++i) lhs += ua.values()[i] * b.values()[i];
    for (std::size_t i = 0; i < a.numel(); ++i) rhs += a.values()[i] * adj.values()[i];
    CHECK(std::abs(lhs - rhs) < 1e-10 * (1 + std::abs(lhs)));
  }
}

TEST_CASE("channel_normalize") {
  Tensor<double> f(Shape{2, 1, 3}, std::vector<double>{3, 1, 0, 4, 0, 0});
  auto n = channel_normalize(f);
  CHECK(n.at(0, 0, 0) == doctest::Approx(0.6));
  CHECK(n.at(1, 0, 0) == doctest::Approx(0.8));
  CHECK(n.at(0, 0, 1) == 1.0);
  CHECK(n.at(1, 0, 1) == 0.0);
  CHECK(n.at(0, 0, 2) == 0.0);
  CHECK(n.at(1, 0, 2) == 0.0);
}

TEST_CASE("flo format") {
  FlowField one(1, 1);
  one.u(0, 0) = 1.5;
  one.v(0, 0) = -2.0;
  one.valid(0, 0) = 1;
  auto bytes = flo::write(one);
  REQUIRE(bytes.size() == 20);
  // Oracle: hand-assembled little-endian layout.
  auto le32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[off + i];
    return v;
  };
  auto as_float = [](std::uint32_t bits) {
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  };
  CHECK(as_float(le32(0)) == 202021.25f);
  CHECK(le32(4) == 1u);
  CHECK(le32(8) == 1u);
  CHECK(as_float(le32(12)) == 1.5f);
  CHECK(as_float(le32(16)) == -2.0f);
  CHECK(flo::read(bytes) == one);

  CHECK_THROWS_AS(flo::read(std::vector<std::uint8_t>{}), FormatError);
  auto bad = bytes;
  std::fill(bad.begin(), bad.begin() + 4, 0);
  try {
    flo::read(bad);
    FAIL("bad magic accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  auto short_payload = bytes;
  short_payload.resize(17);
  try {
    flo::read(short_payload);
    FAIL("truncated payload accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() >= 12);
  }
  auto negative = bytes;
  negative[4] = 0xff, negative[5] = 0xff, negative[6] = 0xff, negative[7] = 0xff;
  CHECK_THROWS_AS(flo::read(negative), FormatError);
}

TEST_CASE("flo round trip is bit exact for arbitrary finite floats") {
  std::mt19937_64 rng(99);
  FlowField f(7, 13);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    for (double* dst : {&f.u.values[i], &f.v.values[i]}) {
      float x;
      do {
        std::uint32_t b = bits(rng);
        std::memcpy(&x, &b, 4);
      } while (!std::isfinite(x));
      *dst = x;
    }
    f.valid.values[i] = 1;
  }
  auto bytes = flo::write(f);
  auto back = flo::read(bytes);
  CHECK(back == f);
  CHECK(flo::write(back) == bytes);
}
