#include "flowe/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace flowe::aug {

namespace {

void check_range(const Range& r, const char* name, bool positive) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi) || (positive && !(r.lo > 0.0)))
    throw ConfigError(std::string("augment: invalid range for ") + name);
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: probability out of [0,1]: ") + name);
}

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

double luma(double r, double g, double b) { return kLumaR * r + kLumaG * g + kLumaB * b; }

void clamp_unit(Tensor<double>& t) {
  for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
}

void require_rgb(const Tensor<double>& img, const char* what) {
  require_feature_map(img, what);
  if (img.channels() != 3) throw DimensionError(std::string(what) + ": expected 3 channels");
}

// Mirror index into [0, n) without repeating the edge sample.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (static_cast<std::ptrdiff_t>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

void AugmentConfig::validate() const {
  check_range(scale, "scale", true);
  check_range(rotation_deg, "rotation_deg", false);
  check_range(blur_sigma, "blur_sigma", true);
  if (crop_height == 0 || crop_width == 0) throw ConfigError("augment: crop size must be positive");
  for (double s : color_strength)
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("augment: color strengths must be >= 0");
  if (color_strength[3] > 0.5) throw ConfigError("augment: hue strength must be <= 0.5");
  check_prob(color_prob, "color_prob");
  check_prob(grayscale_prob, "grayscale_prob");
  check_prob(blur_prob, "blur_prob");
}

geom::AffineMap crop_affine(double scale, double radians, double offset_u, double offset_v,
                            std::pair<std::size_t, std::size_t> in_shape,
                            std::pair<std::size_t, std::size_t> out_shape, bool pad) {
  const auto [in_h, in_w] = in_shape;
  const auto [out_h, out_w] = out_shape;
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0) throw DimensionError("crop_affine: empty shape");
  if (!(scale > 0.0)) throw ConfigError("crop_affine: scale must be positive");
  const geom::AffineMap m = geom::compose(geom::AffineMap::rotation(radians), geom::AffineMap::scaling(scale));
  const double xs[2] = {0.0, static_cast<double>(in_w) - 1.0};
  const double ys[2] = {0.0, static_cast<double>(in_h) - 1.0};
  double min_x = INFINITY, max_x = -INFINITY, min_y = INFINITY, max_y = -INFINITY;
  for (double x : xs)
    for (double y : ys) {
      const geom::Point p = m.apply(x, y);
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
  const double slack_x = (max_x - min_x) - (static_cast<double>(out_w) - 1.0);
  const double slack_y = (max_y - min_y) - (static_cast<double>(out_h) - 1.0);
  // Tolerate rounding in the rotation of an exactly fitting window.
  if (!pad && (slack_x < -1e-9 || slack_y < -1e-9))
    throw ConfigError("crop " + std::to_string(out_h) + "x" + std::to_string(out_w) + " does not fit a " +
                      std::to_string(in_h) + "x" + std::to_string(in_w) + " frame at scale " + std::to_string(scale));
  // Negative slack (pad only) slides the window over the whole frame instead.
  const double ox = min_x + std::clamp(offset_u, 0.0, 1.0) * (pad ? slack_x : std::max(slack_x, 0.0));
  const double oy = min_y + std::clamp(offset_v, 0.0, 1.0) * (pad ? slack_y : std::max(slack_y, 0.0));
  return geom::compose(geom::AffineMap::translation(-ox, -oy), m);
}

geom::AffineMap sample_affine(Rng& rng, const AugmentConfig& cfg, std::pair<std::size_t, std::size_t> in_shape,
                              std::pair<std::size_t, std::size_t> out_shape) {
  cfg.validate();
  const double s = uniform(rng, cfg.scale.lo, cfg.scale.hi);
  const double deg = uniform(rng, cfg.rotation_deg.lo, cfg.rotation_deg.hi);
  const double u = uniform(rng, 0.0, 1.0);
  const double v = uniform(rng, 0.0, 1.0);
  return crop_affine(s, deg * std::numbers::pi / 180.0, u, v, in_shape, out_shape, cfg.pad_to_crop);
}

Tensor<double> apply_affine_image(const Tensor<double>& img, const geom::AffineMap& a,
                                  std::pair<std::size_t, std::size_t> out_shape) {
  require_feature_map(img, "apply_affine_image");
  const geom::AffineMap inv = geom::invert(a);
  const auto [h, w] = out_shape;
  Tensor<double> out = feature_map<double>(img.channels(), h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const geom::Point src = inv.apply(static_cast<double>(x), static_cast<double>(y));
      const geom::BilinearTap t = geom::bilinear_tap(img.width(), img.height(), src.x, src.y);
      if (!t.in_bounds) continue;
      for (std::size_t c = 0; c < img.channels(); ++c)
        out.at(c, y, x) = t.w00() * img.at(c, t.y0, t.x0) + t.w01() * img.at(c, t.y0, t.x1) +
                          t.w10() * img.at(c, t.y1, t.x0) + t.w11() * img.at(c, t.y1, t.x1);
    }
  return out;
}

Tensor<double> adjust_brightness(const Tensor<double>& img, double factor) {
  Tensor<double> out = img;
  for (double& v : out.values()) v *= factor;
  clamp_unit(out);
  return out;
}

Tensor<double> adjust_contrast(const Tensor<double>& img, double factor) {
  require_rgb(img, "adjust_contrast");
  const std::size_t n = img.plane_size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += luma(img.data()[i], img.data()[n + i], img.data()[2 * n + i]);
  mean /= static_cast<double>(n);
  Tensor<double> out = img;
  for (double& v : out.values()) v = factor * v + (1.0 - factor) * mean;
  clamp_unit(out);
  return out;
}

Tensor<double> adjust_saturation(const Tensor<double>& img, double factor) {
  require_rgb(img, "adjust_saturation");
  const std::size_t n = img.plane_size();
  Tensor<double> out = img;
  double* d = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = luma(d[i], d[n + i], d[2 * n + i]);
    for (std::size_t c = 0; c < 3; ++c) d[c * n + i] = factor * d[c * n + i] + (1.0 - factor) * g;
  }
  clamp_unit(out);
  return out;
}

Tensor<double> adjust_hue(const Tensor<double>& img, double shift) {
  require_rgb(img, "adjust_hue");
  const std::size_t n = img.plane_size();
  Tensor<double> out = img;
  double* d = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = d[i], g = d[n + i], b = d[2 * n + i];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double chroma = mx - mn;
    if (chroma <= 0.0) continue;  // gray pixels have no hue
    double h;
    if (mx == r)
      h = std::fmod((g - b) / chroma, 6.0);
    else if (mx == g)
      h = (b - r) / chroma + 2.0;
    else
      h = (r - g) / chroma + 4.0;
    h = h / 6.0 + shift;
    h -= std::floor(h);
    const double s = chroma / mx, v = mx;
    const double hh = h * 6.0;
    const int sector = static_cast<int>(std::floor(hh)) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
    double rr = v, gg = t, bb = p;
    switch (sector) {
      case 0: rr = v; gg = t; bb = p; break;
      case 1: rr = q; gg = v; bb = p; break;
      case 2: rr = p; gg = v; bb = t; break;
      case 3: rr = p; gg = q; bb = v; break;
      case 4: rr = t; gg = p; bb = v; break;
      default: rr = v; gg = p; bb = q; break;
    }
    d[i] = rr;
    d[n + i] = gg;
    d[2 * n + i] = bb;
  }
  clamp_unit(out);
  return out;
}

Tensor<double> to_grayscale(const Tensor<double>& img) {
  require_rgb(img, "to_grayscale");
  const std::size_t n = img.plane_size();
  Tensor<double> out = img;
  double* d = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = std::clamp(luma(d[i], d[n + i], d[2 * n + i]), 0.0, 1.0);
    d[i] = d[n + i] = d[2 * n + i] = g;
  }
  return out;
}

Tensor<double> color_distort(const Tensor<double>& img, Rng& rng, const AugmentConfig& cfg) {
  require_rgb(img, "color_distort");
  Tensor<double> out = img;
  // Both decisions are drawn up front so the stream advances identically
  // whether or not a branch fires.
  const bool jitter = bernoulli(rng, cfg.color_prob);
  const auto& s = cfg.color_strength;
  const double brightness = uniform(rng, std::max(0.0, 1.0 - s[0]), 1.0 + s[0]);
  const double contrast = uniform(rng, std::max(0.0, 1.0 - s[1]), 1.0 + s[1]);
  const double saturation = uniform(rng, std::max(0.0, 1.0 - s[2]), 1.0 + s[2]);
  const double hue = uniform(rng, -s[3], s[3]);
  const bool gray = bernoulli(rng, cfg.grayscale_prob);
  if (jitter) {
    if (brightness != 1.0) out = adjust_brightness(out, brightness);
    if (contrast != 1.0) out = adjust_contrast(out, contrast);
    if (saturation != 1.0) out = adjust_saturation(out, saturation);
    if (hue != 0.0) out = adjust_hue(out, hue);
  }
  if (gray) out = to_grayscale(out);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian_blur: sigma must be positive");
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

Tensor<double> gaussian_blur(const Tensor<double>& img, double sigma) {
  require_feature_map(img, "gaussian_blur");
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const std::size_t h = img.height(), w = img.width();
  Tensor<double> tmp(img.shape()), out(img.shape());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -r; d <= r; ++d)
          acc += k[static_cast<std::size_t>(d + r)] * img.at(c, y, reflect(static_cast<std::ptrdiff_t>(x) + d, w));
        tmp.at(c, y, x) = acc;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -r; d <= r; ++d)
          acc += k[static_cast<std::size_t>(d + r)] * tmp.at(c, reflect(static_cast<std::ptrdiff_t>(y) + d, h), x);
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

namespace {

Tensor<double> photometric(const Tensor<double>& view, Rng& rng, const AugmentConfig& cfg) {
  Tensor<double> out = color_distort(view, rng, cfg);
  const bool blur = bernoulli(rng, cfg.blur_prob);
  const double sigma = uniform(rng, cfg.blur_sigma.lo, cfg.blur_sigma.hi);
  if (blur) out = gaussian_blur(out, sigma);
  return out;
}

}  // namespace

ViewPairResult make_view_pair(const Tensor<double>& first, const Tensor<double>& second,
                              const geom::FlowField& flow, std::uint64_t seed, const AugmentConfig& cfg,
                              const ViewOptions& opts) {
  cfg.validate();
  require_rgb(first, "make_view_pair");
  require_rgb(second, "make_view_pair");
  flow.check();
  if (first.shape() != second.shape() || !flow.u.same_shape(first.height(), first.width()))
    throw DimensionError("make_view_pair: frames and flow must share the raw resolution");
  const std::pair<std::size_t, std::size_t> raw{first.height(), first.width()};
  const std::pair<std::size_t, std::size_t> crop{cfg.crop_height, cfg.crop_width};

  Rng geo(derive_seed(seed, {1}));
  geom::AffineMap a1, a2;
  if (opts.random_affine) {
    a1 = sample_affine(geo, cfg, raw, crop);
    a2 = sample_affine(geo, cfg, raw, crop);
  } else {
    const double u = uniform(geo, 0.0, 1.0), v = uniform(geo, 0.0, 1.0);
    a1 = a2 = crop_affine(1.0, 0.0, u, v, raw, crop, cfg.pad_to_crop);
  }

  ViewPairResult r;
  r.views.a1 = a1;
  r.views.a2 = a2;
  r.views.rng_seed = seed;
  r.views.source_flow = flow;
  r.views.v1 = apply_affine_image(first, a1, crop);
  r.views.v2 = apply_affine_image(second, a2, crop);
  if (opts.photometric) {
    Rng photo(derive_seed(seed, {2}));
    r.views.v1 = photometric(r.views.v1, photo, cfg);
    r.views.v2 = photometric(r.views.v2, photo, cfg);
  }
  r.corr = geom::compose_transform(a1, flow, a2, crop, crop);
  return r;
}

}  // namespace flowe::aug
