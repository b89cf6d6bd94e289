#pragma once

// Synthetic driving-like video: a textured background under a per-frame
// affine ego-motion and a few rigid shapes drawn back to front. Everything
// is analytic, so flow, occlusion and labels are exact.
//
// Dataset layout written by gen_dataset:
//   <out>/manifest.jsonl              one JSON object per frame
//   <out>/ep0000/frame_000.png        RGB frame
//   <out>/ep0000/labels_000.png       class ids (0 background, 1 circle,
//                                     2 rectangle, 3 triangle)
//   <out>/ep0000/flow_000.flo         flow from frame t to frame t + gap
//   <out>/ep0000/occ_000.png          255 where that flow has no visible
//                                     correspondent (covered or out of frame)
// Manifest keys: episode, frame, gap, seed, image, labels, and for frames
// that start a pair also next, flow, occlusion. Paths are relative to <out>.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowe/geometry.hpp"
#include "flowe/rng.hpp"

namespace flowe::synth {

enum class ShapeClass : std::uint8_t { circle = 1, rectangle = 2, triangle = 3 };

inline constexpr std::size_t kClassCount = 4;

/// Sum of oriented sinusoids around a base color, evaluated in an object's
/// own coordinates so it moves rigidly with it.
struct Texture {
  struct Wave {
    double kx = 0.0, ky = 0.0, phase = 0.0;
    std::array<double, 3> amplitude{};
  };
  std::array<double, 3> base{0.5, 0.5, 0.5};
  std::vector<Wave> waves;

  std::array<double, 3> at(double x, double y) const noexcept;
};

struct ShapeSpec {
  ShapeClass cls = ShapeClass::circle;
  geom::Point center;       // at t = 0, pixels
  double size = 8.0;        // circle radius, rectangle half-height, triangle circumradius
  double aspect = 1.0;      // rectangle half-width / half-height
  double angle_deg = 0.0;   // at t = 0
  geom::Point velocity;     // px / frame
  double angular_velocity_deg = 0.0;
  double scale_rate = 0.0;  // scale(t) = (1 + scale_rate)^t
  Texture texture;

  /// Local (object) coordinates to frame coordinates at time t.
  geom::AffineMap pose(double t) const;
  /// Signed distance in pixels at frame point p and time t; negative inside.
  double signed_distance(geom::Point p, double t) const;
};

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 128;
  std::vector<ShapeSpec> shapes;  // back to front
  /// Per-frame ego-motion of the background: background point at frame t is
  /// ego^t applied to its frame-0 position.
  geom::AffineMap ego;
  Texture background;

  void validate() const;
  /// Background frame-0 coordinates to frame coordinates at time t: ego
  /// applied t times (its inverse for negative t).
  geom::AffineMap ego_pose(std::int64_t t) const;
};

struct FramePacket {
  Tensor<double> image;   // 3 x H x W in [0, 1]
  LabelMap labels;
};

FramePacket render_frame(const SceneSpec& spec, std::int64_t t);

/// Index of the frontmost shape covering p at time t, or -1 for background.
int owner_at(const SceneSpec& spec, geom::Point p, double t);

struct FlowWithOcclusion {
  geom::FlowField flow;  // valid = !occluded
  Mask occluded;
};

/// Exact motion from frame t_from to frame t_to (either direction). A pixel
/// is occluded when its surface point leaves the frame or is hidden by a
/// different owner at t_to.
FlowWithOcclusion gt_flow(const SceneSpec& spec, std::int64_t t_from, std::int64_t t_to);

/// Adds i.i.d. N(0, sigma^2) to u and v; validity unchanged.
geom::FlowField add_flow_noise(const geom::FlowField& flow, double sigma, Rng& rng);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Distribution of random scenes.
struct SceneGenConfig {
  std::size_t height = 64;
  std::size_t width = 128;
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 5;
  Range size{12.0, 22.0};
  Range aspect{0.5, 1.6};
  /// Speed of a shape relative to the local background motion, px / frame.
  Range relative_speed{3.0, 6.0};
  double max_angular_velocity_deg = 4.0;
  double max_scale_rate = 0.02;
  double ego_max_translation = 1.0;
  double ego_max_rotation_deg = 1.0;
  double ego_max_zoom = 0.02;
  std::size_t background_waves = 6;
  double background_contrast = 0.2;
  std::size_t shape_waves = 2;
  double shape_contrast = 0.1;
  /// Amplitude of a class-specific pattern added on top of the random one:
  /// circles carry coarse stripes, rectangles fine stripes, triangles a
  /// checkerboard. Orientation, phase and hue stay random per shape.
  double class_pattern_contrast = 0.25;
  /// Std of the displacement noise added to flow handed to training; the
  /// files on disk always hold exact flow.
  double noise_sigma_flow = 0.0;

  void validate() const;
};

SceneSpec random_scene(const SceneGenConfig& cfg, std::uint64_t seed);

struct DatasetConfig {
  SceneGenConfig scene;
  std::size_t episodes = 48;
  std::size_t frames_per_episode = 8;
  std::size_t frame_gap = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Writes the dataset; returns the manifest path. Episodes use seeds
/// derive_seed(cfg.seed, {episode}).
std::filesystem::path gen_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

std::string class_name(std::uint8_t id);

}  // namespace flowe::synth
