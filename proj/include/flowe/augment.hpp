#pragma once

// Construction of the two augmented views of a frame pair. Geometry (scale,
// rotation, crop) is an affine map per view; photometric changes (color
// jitter, grayscale, blur) act on pixel values only and never enter the
// correspondence between the views.

#include <array>
#include <cstdint>
#include <utility>

#include "flowe/geometry.hpp"
#include "flowe/rng.hpp"

namespace flowe::aug {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentConfig {
  Range scale{0.5, 2.0};
  Range rotation_deg{-30.0, 30.0};
  std::size_t crop_height = 64;
  std::size_t crop_width = 128;
  /// When the scaled/rotated frame is smaller than the crop along an axis,
  /// place the frame inside the window (zero fill, masked) instead of failing.
  bool pad_to_crop = true;
  /// Jitter strengths: brightness, contrast, saturation, hue.
  std::array<double, 4> color_strength{0.8, 0.8, 0.8, 0.2};
  double color_prob = 0.8;
  double grayscale_prob = 0.2;
  Range blur_sigma{0.1, 2.0};
  double blur_prob = 0.5;

  /// Throws ConfigError when a range or probability is out of its domain.
  void validate() const;
};

/// scale(s) then rotate(theta) about the origin, then translate so the crop
/// window lands uniformly inside the bounding box of the transformed frame.
/// Maps raw-frame coordinates to view coordinates.
geom::AffineMap sample_affine(Rng& rng, const AugmentConfig& cfg, std::pair<std::size_t, std::size_t> in_shape,
                              std::pair<std::size_t, std::size_t> out_shape);

/// Same construction with fixed scale and angle; exposed for tests and for
/// translation-only crops. Throws ConfigError when the window does not fit
/// unless `pad` is set.
geom::AffineMap crop_affine(double scale, double radians, double offset_u, double offset_v,
                            std::pair<std::size_t, std::size_t> in_shape,
                            std::pair<std::size_t, std::size_t> out_shape, bool pad = false);

/// out(x) = img(a^-1(x)) with bilinear sampling; zeros outside the source.
Tensor<double> apply_affine_image(const Tensor<double>& img, const geom::AffineMap& a,
                                  std::pair<std::size_t, std::size_t> out_shape);

// Individual photometric operations. All clamp results to [0, 1].
Tensor<double> adjust_brightness(const Tensor<double>& img, double factor);
Tensor<double> adjust_contrast(const Tensor<double>& img, double factor);
Tensor<double> adjust_saturation(const Tensor<double>& img, double factor);
/// Rotates hue by `shift` turns (shift in [-0.5, 0.5]).
Tensor<double> adjust_hue(const Tensor<double>& img, double shift);
/// ITU-R 601 luma replicated on all three channels.
Tensor<double> to_grayscale(const Tensor<double>& img);

/// Random color jitter (probability color_prob) then random grayscale
/// (probability grayscale_prob).
Tensor<double> color_distort(const Tensor<double>& img, Rng& rng, const AugmentConfig& cfg);

/// Separable Gaussian blur, radius ceil(3 sigma), mirrored edges.
Tensor<double> gaussian_blur(const Tensor<double>& img, double sigma);
std::vector<double> gaussian_kernel(double sigma);

struct ViewPair {
  Tensor<double> v1;
  Tensor<double> v2;
  geom::AffineMap a1;
  geom::AffineMap a2;
  geom::FlowField source_flow;
  std::uint64_t rng_seed = 0;
};

struct ViewPairResult {
  ViewPair views;
  geom::DenseCorrespondence corr;
};

/// Geometry switches for ablations. `random_affine=false` replaces scale and
/// rotation by the identity and crops both views at one shared offset.
struct ViewOptions {
  bool random_affine = true;
  bool photometric = true;
};

/// Builds both views and the correspondence between them. Geometric and
/// photometric draws come from separate streams derived from `seed`.
ViewPairResult make_view_pair(const Tensor<double>& first, const Tensor<double>& second,
                              const geom::FlowField& flow, std::uint64_t seed, const AugmentConfig& cfg,
                              const ViewOptions& opts = {});

}  // namespace flowe::aug
