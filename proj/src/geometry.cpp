#include "flowe/geometry.hpp"

#include <cmath>
#include <string>

namespace flowe::geom {

AffineMap AffineMap::scaling(double sx, double sy) { return {{sx, 0.0, 0.0, 0.0, sy, 0.0}}; }

AffineMap AffineMap::rotation(double radians) {
  const double c = std::cos(radians), s = std::sin(radians);
  return {{c, -s, 0.0, s, c, 0.0}};
}

AffineMap AffineMap::translation(double tx, double ty) { return {{1.0, 0.0, tx, 0.0, 1.0, ty}}; }

void require_invertible(const AffineMap& a) {
  if (!(std::abs(a.det()) >= kSingularDet))
    throw DegeneracyError("affine map is singular (det = " + std::to_string(a.det()) + ")");
}

AffineMap invert(const AffineMap& a) {
  require_invertible(a);
  const auto& m = a.m;
  const double inv = 1.0 / a.det();
  const double ia = m[4] * inv, ib = -m[1] * inv, ic = -m[3] * inv, id = m[0] * inv;
  return {{ia, ib, -(ia * m[2] + ib * m[5]), ic, id, -(ic * m[2] + id * m[5])}};
}

AffineMap compose(const AffineMap& outer, const AffineMap& inner) {
  const auto& p = outer.m;
  const auto& q = inner.m;
  return {{p[0] * q[0] + p[1] * q[3], p[0] * q[1] + p[1] * q[4], p[0] * q[2] + p[1] * q[5] + p[2],
           p[3] * q[0] + p[4] * q[3], p[3] * q[1] + p[4] * q[4], p[3] * q[2] + p[4] * q[5] + p[5]}};
}

FlowField::FlowField(std::size_t height, std::size_t width)
    : u(height, width, 0.0), v(height, width, 0.0), valid(height, width, 1) {}

FlowField FlowField::constant(std::size_t height, std::size_t width, double du, double dv) {
  FlowField f(height, width);
  std::fill(f.u.values.begin(), f.u.values.end(), du);
  std::fill(f.v.values.begin(), f.v.values.end(), dv);
  return f;
}

void FlowField::check() const {
  if (u.height == 0 || u.width == 0) throw DimensionError("flow field is empty");
  if (!u.same_shape(v) || !u.same_shape(valid))
    throw DimensionError("flow planes disagree in shape");
}

DenseCorrespondence DenseCorrespondence::identity(std::size_t height, std::size_t width) {
  DenseCorrespondence c{Grid<double>(height, width), Grid<double>(height, width), Mask(height, width, 1)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      c.tx(y, x) = static_cast<double>(x);
      c.ty(y, x) = static_cast<double>(y);
    }
  return c;
}

BilinearTap bilinear_tap(std::size_t width, std::size_t height, double x, double y) noexcept {
  BilinearTap t;
  if (width == 0 || height == 0 || !in_frame(width, height, x, y)) return t;
  t.in_bounds = true;
  auto axis = [](std::size_t n, double c, std::size_t& i0, std::size_t& i1, double& frac) {
    if (n == 1) {
      i0 = i1 = 0;
      frac = 0.0;
      return;
    }
    std::size_t i = static_cast<std::size_t>(std::floor(c));
    if (i > n - 2) i = n - 2;
    i0 = i;
    i1 = i + 1;
    frac = c - static_cast<double>(i);
  };
  axis(width, x, t.x0, t.x1, t.fx);
  axis(height, y, t.y0, t.y1, t.fy);
  return t;
}

template <std::floating_point T>
Sample<T> bilinear_sample(const Tensor<T>& map, double x, double y) {
  require_feature_map(map, "bilinear_sample");
  Sample<T> s{std::vector<T>(map.channels(), T{0}), false};
  const BilinearTap t = bilinear_tap(map.width(), map.height(), x, y);
  if (!t.in_bounds) return s;
  s.in_bounds = true;
  for (std::size_t c = 0; c < map.channels(); ++c) {
    const double v = t.w00() * map.at(c, t.y0, t.x0) + t.w01() * map.at(c, t.y0, t.x1) +
                     t.w10() * map.at(c, t.y1, t.x0) + t.w11() * map.at(c, t.y1, t.x1);
    s.values[c] = static_cast<T>(v);
  }
  return s;
}

bool sample_grid(const Grid<double>& g, double x, double y, double& out) noexcept {
  const BilinearTap t = bilinear_tap(g.width, g.height, x, y);
  if (!t.in_bounds) return false;
  out = t.w00() * g(t.y0, t.x0) + t.w01() * g(t.y0, t.x1) + t.w10() * g(t.y1, t.x0) + t.w11() * g(t.y1, t.x1);
  return true;
}

DenseCorrespondence compose_transform(const AffineMap& a1, const FlowField& flow, const AffineMap& a2,
                                      std::pair<std::size_t, std::size_t> out_shape,
                                      std::pair<std::size_t, std::size_t> second_shape) {
  flow.check();
  const auto [h, w] = out_shape;
  const auto [h2, w2] = second_shape;
  if (h == 0 || w == 0 || h2 == 0 || w2 == 0) throw DimensionError("compose_transform: empty view shape");
  require_invertible(a2);
  const AffineMap a1_inv = invert(a1);

  DenseCorrespondence corr{Grid<double>(h, w), Grid<double>(h, w), Mask(h, w, 0)};
  const std::size_t fw = flow.width(), fh = flow.height();
  for (std::size_t yy = 0; yy < h; ++yy) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const Point src = a1_inv.apply(static_cast<double>(xx), static_cast<double>(yy));
      const BilinearTap t = bilinear_tap(fw, fh, src.x, src.y);
      if (!t.in_bounds) continue;
      const bool ok = (t.w00() <= 0.0 || flow.valid(t.y0, t.x0)) && (t.w01() <= 0.0 || flow.valid(t.y0, t.x1)) &&
                      (t.w10() <= 0.0 || flow.valid(t.y1, t.x0)) && (t.w11() <= 0.0 || flow.valid(t.y1, t.x1));
      const double du = t.w00() * flow.u(t.y0, t.x0) + t.w01() * flow.u(t.y0, t.x1) +
                        t.w10() * flow.u(t.y1, t.x0) + t.w11() * flow.u(t.y1, t.x1);
      const double dv = t.w00() * flow.v(t.y0, t.x0) + t.w01() * flow.v(t.y0, t.x1) +
                        t.w10() * flow.v(t.y1, t.x0) + t.w11() * flow.v(t.y1, t.x1);
      const Point dst = a2.apply(src.x + du, src.y + dv);
      corr.tx(yy, xx) = dst.x;
      corr.ty(yy, xx) = dst.y;
      corr.valid(yy, xx) = ok && in_frame(w2, h2, dst.x, dst.y) ? 1 : 0;
    }
  }
  return corr;
}

template <std::floating_point T>
Warped<T> warp_features(const Tensor<T>& f, const DenseCorrespondence& corr) {
  require_feature_map(f, "warp_features");
  const std::size_t h = corr.height(), w = corr.width(), channels = f.channels();
  Warped<T> out{feature_map<T>(channels, h, w), Mask(h, w, 0)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!corr.valid(y, x)) continue;
      const BilinearTap t = bilinear_tap(f.width(), f.height(), corr.tx(y, x), corr.ty(y, x));
      if (!t.in_bounds) continue;
      out.mask(y, x) = 1;
      const double w00 = t.w00(), w01 = t.w01(), w10 = t.w10(), w11 = t.w11();
      for (std::size_t c = 0; c < channels; ++c) {
        out.features.at(c, y, x) = static_cast<T>(w00 * f.at(c, t.y0, t.x0) + w01 * f.at(c, t.y0, t.x1) +
                                                  w10 * f.at(c, t.y1, t.x0) + w11 * f.at(c, t.y1, t.x1));
      }
    }
  }
  return out;
}

Mask fb_consistency(const FlowField& fwd, const FlowField& bwd, double alpha, double beta) {
  fwd.check();
  bwd.check();
  if (!fwd.u.same_shape(bwd.u)) throw DimensionError("fb_consistency: forward/backward flow shapes differ");
  const std::size_t h = fwd.height(), w = fwd.width();
  Mask mask(h, w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fu = fwd.u(y, x), fv = fwd.v(y, x);
      const double tx = static_cast<double>(x) + fu, ty = static_cast<double>(y) + fv;
      double bu = 0.0, bv = 0.0;
      if (!sample_grid(bwd.u, tx, ty, bu) || !sample_grid(bwd.v, tx, ty, bv)) continue;
      const double su = fu + bu, sv = fv + bv;
      const double lhs = su * su + sv * sv;
      const double rhs = alpha * (fu * fu + fv * fv + bu * bu + bv * bv) + beta;
      mask(y, x) = lhs <= rhs ? 1 : 0;
    }
  }
  return mask;
}

namespace {

// Source coordinate and neighbor pair along one align-corners axis.
struct AxisTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<AxisTap> align_corners_axis(std::size_t in, std::size_t out) {
  std::vector<AxisTap> taps(out);
  const double scale = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  for (std::size_t o = 0; o < out; ++o) {
    const double src = static_cast<double>(o) * scale;
    std::size_t i = static_cast<std::size_t>(std::floor(src));
    if (in == 1) {
      taps[o] = {0, 0, 0.0};
      continue;
    }
    if (i > in - 2) i = in - 2;
    taps[o] = {i, i + 1, src - static_cast<double>(i)};
  }
  return taps;
}

}  // namespace

template <std::floating_point T>
Tensor<T> upsample_bilinear(const Tensor<T>& f, std::size_t height, std::size_t width) {
  require_feature_map(f, "upsample_bilinear");
  if (height < f.height() || width < f.width())
    throw DimensionError("upsample_bilinear: target " + std::to_string(height) + "x" + std::to_string(width) +
                         " smaller than input " + f.shape().str());
  const auto ty = align_corners_axis(f.height(), height);
  const auto tx = align_corners_axis(f.width(), width);
  Tensor<T> out = feature_map<T>(f.channels(), height, width);
  for (std::size_t c = 0; c < f.channels(); ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const AxisTap& a = ty[y];
      for (std::size_t x = 0; x < width; ++x) {
        const AxisTap& b = tx[x];
        const double top = (1.0 - b.frac) * f.at(c, a.i0, b.i0) + b.frac * f.at(c, a.i0, b.i1);
        const double bottom = (1.0 - b.frac) * f.at(c, a.i1, b.i0) + b.frac * f.at(c, a.i1, b.i1);
        out.at(c, y, x) = static_cast<T>((1.0 - a.frac) * top + a.frac * bottom);
      }
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> upsample_bilinear_adjoint(const Tensor<T>& grad, std::size_t height, std::size_t width) {
  require_feature_map(grad, "upsample_bilinear_adjoint");
  if (height == 0 || width == 0 || height > grad.height() || width > grad.width())
    throw DimensionError("upsample_bilinear_adjoint: invalid source size");
  const auto ty = align_corners_axis(height, grad.height());
  const auto tx = align_corners_axis(width, grad.width());
  std::vector<double> acc(height * width);
  Tensor<T> out = feature_map<T>(grad.channels(), height, width);
  for (std::size_t c = 0; c < grad.channels(); ++c) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t y = 0; y < grad.height(); ++y) {
      const AxisTap& a = ty[y];
      for (std::size_t x = 0; x < grad.width(); ++x) {
        const AxisTap& b = tx[x];
        const double g = grad.at(c, y, x);
        acc[a.i0 * width + b.i0] += (1.0 - a.frac) * (1.0 - b.frac) * g;
        acc[a.i0 * width + b.i1] += (1.0 - a.frac) * b.frac * g;
        acc[a.i1 * width + b.i0] += a.frac * (1.0 - b.frac) * g;
        acc[a.i1 * width + b.i1] += a.frac * b.frac * g;
      }
    }
    auto dst = out.plane(c);
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<T>(acc[i]);
  }
  return out;
}

template <std::floating_point T>
Tensor<T> channel_normalize(const Tensor<T>& f, double eps) {
  require_feature_map(f, "channel_normalize");
  Tensor<T> out(f.shape());
  const std::size_t n = f.plane_size(), channels = f.channels();
  const T* src = f.data();
  T* dst = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < channels; ++c) sq += static_cast<double>(src[c * n + i]) * src[c * n + i];
    const double inv = 1.0 / std::max(std::sqrt(sq), eps);
    for (std::size_t c = 0; c < channels; ++c) dst[c * n + i] = static_cast<T>(src[c * n + i] * inv);
  }
  return out;
}

template <std::floating_point T>
Tensor<T> channel_normalize_backward(const Tensor<T>& f, const Tensor<T>& grad_out, double eps) {
  require_feature_map(f, "channel_normalize_backward");
  if (f.shape() != grad_out.shape()) throw DimensionError("channel_normalize_backward: gradient shape mismatch");
  Tensor<T> out(f.shape());
  const std::size_t n = f.plane_size(), channels = f.channels();
  const T* x = f.data();
  const T* g = grad_out.data();
  T* dst = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < channels; ++c) sq += static_cast<double>(x[c * n + i]) * x[c * n + i];
    const double norm = std::sqrt(sq);
    if (norm < eps) {
      // Below the guard the map is linear: y = x / eps.
      for (std::size_t c = 0; c < channels; ++c) dst[c * n + i] = static_cast<T>(g[c * n + i] / eps);
      continue;
    }
    double proj = 0.0;  // <y, g> with y = x / norm
    for (std::size_t c = 0; c < channels; ++c) proj += static_cast<double>(x[c * n + i]) * g[c * n + i];
    proj /= norm;
    for (std::size_t c = 0; c < channels; ++c)
      dst[c * n + i] = static_cast<T>((g[c * n + i] - (x[c * n + i] / norm) * proj) / norm);
  }
  return out;
}

#define FLOWE_GEOM_INSTANTIATE(T)                                                                       \
  template Sample<T> bilinear_sample(const Tensor<T>&, double, double);                                  \
  template Warped<T> warp_features(const Tensor<T>&, const DenseCorrespondence&);                        \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> upsample_bilinear_adjoint(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> channel_normalize(const Tensor<T>&, double);                                        \
  template Tensor<T> channel_normalize_backward(const Tensor<T>&, const Tensor<T>&, double);

FLOWE_GEOM_INSTANTIATE(float)
FLOWE_GEOM_INSTANTIATE(double)

#undef FLOWE_GEOM_INSTANTIATE

}  // namespace flowe::geom
