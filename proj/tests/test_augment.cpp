#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "flowe/augment.hpp"

using namespace flowe;
using namespace flowe::aug;
using geom::AffineMap;

namespace {

Tensor<double> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Tensor<double> t(Shape{3, h, w});
  for (double& v : t.values()) v = d(rng);
  return t;
}

AugmentConfig no_photometrics() {
  AugmentConfig cfg;
  cfg.color_strength = {0, 0, 0, 0};
  cfg.color_prob = 0;
  cfg.grayscale_prob = 0;
  cfg.blur_prob = 0;
  return cfg;
}

}  // namespace

TEST_CASE("sample_affine") {
  AugmentConfig cfg;
  SUBCASE("degenerate ranges give the identity") {
    cfg.scale = {1, 1};
    cfg.rotation_deg = {0, 0};
    Rng rng(1);
    auto a = sample_affine(rng, cfg, {20, 30}, {20, 30});
    const std::array<double, 6> eye{1, 0, 0, 0, 1, 0};
    for (int i = 0; i < 6; ++i) CHECK(std::abs(a.m[i] - eye[i]) < 1e-12);
  }
  SUBCASE("pure 2x scale has determinant 4") {
    cfg.scale = {2, 2};
    cfg.rotation_deg = {0, 0};
    Rng rng(2);
    CHECK(sample_affine(rng, cfg, {64, 128}, {32, 64}).det() == 4.0);
  }
  SUBCASE("draws stay inside the configured box and keep the crop inside") {
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
      auto a = sample_affine(rng, cfg, {64, 128}, {32, 64});
      const double s = std::sqrt(a.det());
      CHECK(s >= 0.5 - 1e-12);
      CHECK(s <= 2.0 + 1e-12);
      const double deg = std::atan2(a.m[3], a.m[0]) * 180.0 / std::numbers::pi;
      CHECK(deg >= -30.0 - 1e-9);
      CHECK(deg <= 30.0 + 1e-9);
      // The crop window lies inside the bounding box of the transformed frame.
      double min_x = 1e9, max_x = -1e9, min_y = 1e9, max_y = -1e9;
      for (double x : {0.0, 127.0})
        for (double y : {0.0, 63.0}) {
          auto p = a.apply(x, y);
          min_x = std::min(min_x, p.x), max_x = std::max(max_x, p.x);
          min_y = std::min(min_y, p.y), max_y = std::max(max_y, p.y);
        }
      CHECK(min_x <= 1e-9);
      CHECK(min_y <= 1e-9);
      CHECK(max_x >= 63.0 - 1e-9);
      CHECK(max_y >= 31.0 - 1e-9);
    }
  }
  SUBCASE("a crop that cannot fit is a configuration error") {
    cfg.scale = {0.25, 0.25};
    cfg.pad_to_crop = false;
    Rng rng(4);
    CHECK_THROWS_AS(sample_affine(rng, cfg, {64, 128}, {32, 64}), ConfigError);
  }
  SUBCASE("with padding a shrunken frame lands wholly inside the window") {
    cfg.scale = {0.5, 0.5};
    cfg.rotation_deg = {0, 0};
    cfg.pad_to_crop = true;
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
      auto a = sample_affine(rng, cfg, {64, 128}, {64, 128});
      for (double x : {0.0, 127.0})
        for (double y : {0.0, 63.0}) {
          auto p = a.apply(x, y);
          CHECK(p.x >= -1e-9);
          CHECK(p.x <= 127.0 + 1e-9);
          CHECK(p.y >= -1e-9);
          CHECK(p.y <= 63.0 + 1e-9);
        }
    }
  }
}

TEST_CASE("crop_affine padding") {
  CHECK_THROWS_AS(crop_affine(0.5, 0.0, 0.5, 0.5, {64, 128}, {64, 128}), ConfigError);
  // Offset 0 puts the shrunken frame at the window origin, offset 1 against the far corner.
  auto lo = crop_affine(0.5, 0.0, 0.0, 0.0, {64, 128}, {64, 128}, true);
  auto hi = crop_affine(0.5, 0.0, 1.0, 1.0, {64, 128}, {64, 128}, true);
  auto p = lo.apply(0, 0);
  CHECK(std::abs(p.x) < 1e-9);
  CHECK(std::abs(p.y) < 1e-9);
  auto q = hi.apply(127, 63);
  CHECK(std::abs(q.x - 127.0) < 1e-9);
  CHECK(std::abs(q.y - 63.0) < 1e-9);
  // A crop that already fits is unaffected by the flag.
  auto a = crop_affine(1.5, 0.1, 0.3, 0.7, {64, 128}, {32, 64});
  auto b = crop_affine(1.5, 0.1, 0.3, 0.7, {64, 128}, {32, 64}, true);
  for (int i = 0; i < 6; ++i) CHECK(a.m[i] == b.m[i]);
}

TEST_CASE("config validation") {
  AugmentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.color_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.scale = {2.0, 1.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.scale = {0.0, 1.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.crop_width = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("apply_affine_image") {
  auto img = random_image(6, 9, 5);
  CHECK(apply_affine_image(img, AffineMap::identity(), {6, 9}) == img);

  Tensor<double> ramp(Shape{3, 4, 8});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 8; ++x) ramp.at(c, y, x) = 0.1 * x + 0.05 * c;
  auto shifted = apply_affine_image(ramp, AffineMap::translation(1, 0), {4, 8});
  for (std::size_t y = 0; y < 4; ++y) {
    CHECK(shifted.at(0, y, 0) == 0.0);  // samples x = -1
    for (std::size_t x = 1; x < 8; ++x) CHECK(std::abs(shifted.at(2, y, x) - (0.1 * (x - 1.0) + 0.1)) < 1e-12);
  }

  // 2x zoom of a 2x2 checkerboard: out(x) = img(x / 2), so the 4x4 grid
  // holds the bilinear blend at half-pixel steps and zeros past the last
  // source pixel center (x / 2 > 1).
  Tensor<double> checker(Shape{3, 2, 2});
  for (std::size_t c = 0; c < 3; ++c) {
    checker.at(c, 0, 0) = 1, checker.at(c, 1, 1) = 1;
  }
  auto zoom = apply_affine_image(checker, AffineMap::scaling(2.0), {4, 4});
  const double expect[4][4] = {{1, 0.5, 0, 0}, {0.5, 0.5, 0.5, 0}, {0, 0.5, 1, 0}, {0, 0, 0, 0}};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) CHECK(zoom.at(1, y, x) == doctest::Approx(expect[y][x]));
}

TEST_CASE("photometric operations") {
  Tensor<double> red(Shape{3, 1, 1}, std::vector<double>{1, 0, 0});
  auto g = to_grayscale(red);
  for (std::size_t c = 0; c < 3; ++c) CHECK(g.at(c, 0, 0) == doctest::Approx(0.299));

  Tensor<double> grey(Shape{3, 1, 2}, 0.8);
  const auto bright = adjust_brightness(grey, 1.5);
  for (double v : bright.values()) CHECK(v == 1.0);
  const auto dim = adjust_brightness(grey, 0.5);
  for (double v : dim.values()) CHECK(v == doctest::Approx(0.4));

  auto img = random_image(5, 7, 6);
  const auto same_hue = adjust_hue(img, 0.0);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(same_hue.values()[i] - img.values()[i]) < 1e-12);
  auto full_turn = adjust_hue(adjust_hue(img, 0.5), -0.5);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(full_turn.values()[i] - img.values()[i]) < 1e-9);
  auto sat0 = adjust_saturation(img, 0.0);
  auto gray = to_grayscale(img);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(sat0.values()[i] - gray.values()[i]) < 1e-12);

  auto cfg = no_photometrics();
  Rng rng(7);
  CHECK(color_distort(img, rng, cfg) == img);

  Rng r2(8);
  for (int i = 0; i < 50; ++i) {
    auto out = color_distort(img, r2, AugmentConfig{});
    for (double v : out.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("gaussian blur") {
  Tensor<double> flat(Shape{3, 6, 5}, 0.3);
  for (double s : {0.3, 1.0, 2.0, 4.0}) {
    const auto blurred = gaussian_blur(flat, s);
    for (double v : blurred.values()) CHECK(std::abs(v - 0.3) < 1e-12);
  }

  // Unit impulse in the interior: the output is the outer product of the
  // normalized 1-D taps exp(-d^2 / 2) / sum, radius 3.
  Tensor<double> impulse(Shape{3, 11, 11});
  for (std::size_t c = 0; c < 3; ++c) impulse.at(c, 5, 5) = 1.0;
  auto out = gaussian_blur(impulse, 1.0);
  double taps[7], sum = 0.0;
  for (int d = -3; d <= 3; ++d) sum += taps[d + 3] = std::exp(-0.5 * d * d);
  for (double& t : taps) t /= sum;
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) CHECK(std::abs(out.at(0, 5 + dy, 5 + dx) - taps[dy + 3] * taps[dx + 3]) < 1e-14);
  CHECK(out.at(0, 5, 1) == 0.0);

  auto img = random_image(8, 8, 9);
  auto near = gaussian_blur(img, 0.05);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(near.values()[i] - img.values()[i]) < 1e-6);

  // Channel permutation commutes with blurring.
  Tensor<double> perm(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    std::copy(img.plane((c + 1) % 3).begin(), img.plane((c + 1) % 3).end(), perm.plane(c).begin());
  auto a = gaussian_blur(img, 1.3), b = gaussian_blur(perm, 1.3);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::equal(b.plane(c).begin(), b.plane(c).end(), a.plane((c + 1) % 3).begin()));

  CHECK_THROWS_AS(gaussian_blur(img, 0.0), ConfigError);
}

TEST_CASE("make_view_pair") {
  const std::size_t h = 64, w = 128;
  auto i1 = random_image(h, w, 10), i2 = random_image(h, w, 11);
  auto cfg = no_photometrics();
  cfg.scale = {1, 1};
  cfg.rotation_deg = {0, 0};
  cfg.crop_height = h;
  cfg.crop_width = w;

  SUBCASE("identity geometry") {
    auto r = make_view_pair(i1, i2, geom::FlowField::constant(h, w, 0, 0), 1, cfg);
    CHECK(r.views.v1 == i1);
    CHECK(r.views.v2 == i2);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        CHECK(r.corr.valid(y, x));
        CHECK(r.corr.tx(y, x) == x);
      }
  }
  SUBCASE("constant flow") {
    auto r = make_view_pair(i1, i2, geom::FlowField::constant(h, w, 4, 0), 1, cfg);
    for (std::size_t x = 0; x < w; ++x) {
      CHECK(r.corr.valid(10, x) == (x + 4 < w));
      if (x + 4 < w) CHECK(r.corr.tx(10, x) == x + 4.0);
    }
  }
  SUBCASE("determinism and geometric/photometric separation") {
    AugmentConfig full;
    auto flow = geom::FlowField::constant(h, w, 1.5, -0.5);
    auto a = make_view_pair(i1, i2, flow, 42, full);
    auto b = make_view_pair(i1, i2, flow, 42, full);
    CHECK(a.views.v1 == b.views.v1);
    CHECK(a.views.v2 == b.views.v2);
    CHECK(a.corr.tx == b.corr.tx);
    CHECK(a.corr.valid == b.corr.valid);
    // Turning photometrics off keeps the same correspondence.
    auto c = make_view_pair(i1, i2, flow, 42, full, ViewOptions{true, false});
    CHECK(c.corr.tx == a.corr.tx);
    CHECK(c.corr.ty == a.corr.ty);
    CHECK(c.corr.valid == a.corr.valid);
    CHECK(c.views.a1.m == a.views.a1.m);
    auto other = make_view_pair(i1, i2, flow, 43, full);
    CHECK_FALSE(other.views.a1.m == a.views.a1.m);
  }
  SUBCASE("without random affines both views share one translation") {
    AugmentConfig full;
    auto r = make_view_pair(i1, i2, geom::FlowField::constant(h, w, 0, 0), 5, full, ViewOptions{false, false});
    CHECK(r.views.a1.m == r.views.a2.m);
    CHECK(r.views.a1.det() == 1.0);
    for (std::size_t y = 0; y < full.crop_height; ++y)
      for (std::size_t x = 0; x < full.crop_width; ++x) CHECK(r.corr.valid(y, x));
  }
  SUBCASE("mismatched flow") {
    CHECK_THROWS_AS(make_view_pair(i1, i2, geom::FlowField::constant(h, w - 1, 0, 0), 1, cfg), DimensionError);
  }
}
