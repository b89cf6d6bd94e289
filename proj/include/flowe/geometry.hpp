#pragma once

// Correspondence geometry shared by augmentation, training and data synthesis.
//
// Convention everywhere: x grows rightward, y downward, and pixel centers sit
// on integer coordinates. A W x H frame therefore spans [0, W-1] x [0, H-1];
// samples outside that box are out of bounds (zero-filled and masked, never
// clamped).

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "flowe/tensor.hpp"

namespace flowe::geom {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Planar affine map on pixel coordinates, stored as rows [[a, b, tx], [c, d, ty]].
struct AffineMap {
  std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static AffineMap identity() { return {}; }
  static AffineMap scaling(double sx, double sy);
  static AffineMap scaling(double s) { return scaling(s, s); }
  /// [[cos, -sin], [sin, cos]] about the origin; clockwise on screen for
  /// positive angles because y points down.
  static AffineMap rotation(double radians);
  static AffineMap translation(double tx, double ty);

  double det() const noexcept { return m[0] * m[4] - m[1] * m[3]; }
  Point apply(Point p) const noexcept { return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]}; }
  Point apply(double x, double y) const noexcept { return apply(Point{x, y}); }
};

inline constexpr double kSingularDet = 1e-12;

/// Throws DegeneracyError when |det| < 1e-12.
void require_invertible(const AffineMap& a);
AffineMap invert(const AffineMap& a);
/// Returns the map x -> outer(inner(x)).
AffineMap compose(const AffineMap& outer, const AffineMap& inner);

/// Dense displacement field; `valid` marks pixels with a trustworthy correspondence.
struct FlowField {
  Grid<double> u;
  Grid<double> v;
  Mask valid;

  FlowField() = default;
  FlowField(std::size_t height, std::size_t width);
  static FlowField constant(std::size_t height, std::size_t width, double du, double dv);

  std::size_t height() const noexcept { return u.height; }
  std::size_t width() const noexcept { return u.width; }
  /// Throws DimensionError if the three planes disagree or are empty.
  void check() const;

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

/// Per-pixel target coordinates (in the second view's frame) plus validity.
struct DenseCorrespondence {
  Grid<double> tx;
  Grid<double> ty;
  Mask valid;

  std::size_t height() const noexcept { return tx.height; }
  std::size_t width() const noexcept { return tx.width; }

  static DenseCorrespondence identity(std::size_t height, std::size_t width);
};

/// Neighbor indices and weights for a bilinear lookup at (x, y).
struct BilinearTap {
  std::size_t x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  double fx = 0.0, fy = 0.0;  // weight of x1 / y1
  bool in_bounds = false;

  double w00() const noexcept { return (1.0 - fx) * (1.0 - fy); }
  double w01() const noexcept { return fx * (1.0 - fy); }
  double w10() const noexcept { return (1.0 - fx) * fy; }
  double w11() const noexcept { return fx * fy; }
};

BilinearTap bilinear_tap(std::size_t width, std::size_t height, double x, double y) noexcept;

inline bool in_frame(std::size_t width, std::size_t height, double x, double y) noexcept {
  return x >= 0.0 && y >= 0.0 && x <= static_cast<double>(width) - 1.0 && y <= static_cast<double>(height) - 1.0;
}

template <std::floating_point T>
struct Sample {
  std::vector<T> values;
  bool in_bounds = false;
};

/// Bilinear interpolation over the four neighboring pixel centers; zeros and
/// in_bounds=false outside [0, W-1] x [0, H-1].
template <std::floating_point T>
Sample<T> bilinear_sample(const Tensor<T>& map, double x, double y);

/// Bilinear lookup of a scalar grid; returns false when out of bounds.
bool sample_grid(const Grid<double>& g, double x, double y, double& out) noexcept;

/// Realized transformation between two augmented views: for each pixel x on
/// the first view's grid, y = a1^-1(x), d = flow(y) (bilinear), T(x) = a2(y + d).
/// A pixel is valid iff y lies in the raw frame, every contributing flow
/// neighbor is valid, and T(x) lies in the second view (`second_shape`).
DenseCorrespondence compose_transform(const AffineMap& a1, const FlowField& flow, const AffineMap& a2,
                                      std::pair<std::size_t, std::size_t> out_shape,
                                      std::pair<std::size_t, std::size_t> second_shape);
inline DenseCorrespondence compose_transform(const AffineMap& a1, const FlowField& flow, const AffineMap& a2,
                                             std::pair<std::size_t, std::size_t> out_shape) {
  return compose_transform(a1, flow, a2, out_shape, out_shape);
}

/// Backward warp: out(x) = f(T(x)) sampled bilinearly. The result is aligned
/// with the grid the correspondence is defined on.
template <std::floating_point T>
struct Warped {
  Tensor<T> features;
  Mask mask;
};

template <std::floating_point T>
Warped<T> warp_features(const Tensor<T>& f, const DenseCorrespondence& corr);

/// Forward-backward consistency:
/// |f(x) + b(x + f(x))|^2 <= alpha (|f(x)|^2 + |b(x + f(x))|^2) + beta.
inline constexpr double kFbAlpha = 0.01;
inline constexpr double kFbBeta = 0.5;
Mask fb_consistency(const FlowField& fwd, const FlowField& bwd, double alpha = kFbAlpha, double beta = kFbBeta);

/// Align-corners bilinear upsampling: output corner centers coincide with
/// input corner centers. Requires height >= f.height() and width >= f.width().
template <std::floating_point T>
Tensor<T> upsample_bilinear(const Tensor<T>& f, std::size_t height, std::size_t width);

/// Exact adjoint of upsample_bilinear: maps a gradient on the large grid back
/// to the small grid (`height` x `width`).
template <std::floating_point T>
Tensor<T> upsample_bilinear_adjoint(const Tensor<T>& grad, std::size_t height, std::size_t width);

inline constexpr double kNormalizeEps = 1e-12;

/// Divides every pixel's channel vector by max(||v||_2, eps).
template <std::floating_point T>
Tensor<T> channel_normalize(const Tensor<T>& f, double eps = kNormalizeEps);

/// Vector-Jacobian product of channel_normalize at `f`.
template <std::floating_point T>
Tensor<T> channel_normalize_backward(const Tensor<T>& f, const Tensor<T>& grad_out, double eps = kNormalizeEps);

}  // namespace flowe::geom
