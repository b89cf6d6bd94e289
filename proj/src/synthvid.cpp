#include "flowe/synthvid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>

#include "flowe/flo.hpp"
#include "flowe/image_io.hpp"
#include "flowe/parallel.hpp"

namespace flowe::synth {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double length(double x, double y) { return std::hypot(x, y); }

double segment_distance(geom::Point p, geom::Point a, geom::Point b) {
  const double ex = b.x - a.x, ey = b.y - a.y;
  const double t = std::clamp(((p.x - a.x) * ex + (p.y - a.y) * ey) / (ex * ex + ey * ey), 0.0, 1.0);
  return length(p.x - a.x - t * ex, p.y - a.y - t * ey);
}

// Exact distance to a convex polygon with counter-clockwise vertices (in the
// y-down frame, "counter-clockwise" means the interior is on the left).
double convex_polygon_sdf(geom::Point q, std::span<const geom::Point> v) {
  double dist = std::numeric_limits<double>::infinity();
  bool inside = true;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const geom::Point a = v[i], b = v[(i + 1) % v.size()];
    dist = std::min(dist, segment_distance(q, a, b));
    const double cross = (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
    if (cross < 0.0) inside = false;
  }
  return inside ? -dist : dist;
}

double local_sdf(const ShapeSpec& s, geom::Point q) {
  switch (s.cls) {
    case ShapeClass::circle:
      return length(q.x, q.y) - s.size;
    case ShapeClass::rectangle: {
      const double dx = std::abs(q.x) - s.size * s.aspect, dy = std::abs(q.y) - s.size;
      return length(std::max(dx, 0.0), std::max(dy, 0.0)) + std::min(std::max(dx, dy), 0.0);
    }
    case ShapeClass::triangle: {
      std::array<geom::Point, 3> v;
      for (int k = 0; k < 3; ++k) {
        const double a = (-90.0 + 120.0 * k) * kDeg;
        v[k] = {s.size * std::cos(a), s.size * std::sin(a)};
      }
      return convex_polygon_sdf(q, v);
    }
  }
  return std::numeric_limits<double>::infinity();
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s, hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hp)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& ch : rgb) ch += v - c;
  return rgb;
}

Texture random_texture(Rng& rng, std::array<double, 3> base, std::size_t waves, double contrast, Range wavelength) {
  Texture t;
  t.base = base;
  const double amp = waves ? contrast / std::sqrt(static_cast<double>(waves)) : 0.0;
  for (std::size_t i = 0; i < waves; ++i) {
    Texture::Wave w;
    const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double k = 2.0 * std::numbers::pi / uniform(rng, wavelength.lo, wavelength.hi);
    w.kx = k * std::cos(dir);
    w.ky = k * std::sin(dir);
    w.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double common = uniform(rng, -amp, amp);
    for (double& a : w.amplitude) a = common + uniform(rng, -0.3 * amp, 0.3 * amp);
    t.waves.push_back(w);
  }
  return t;
}

void add_class_pattern(Rng& rng, Texture& t, ShapeClass cls, double contrast) {
  const double dir = uniform(rng, 0.0, std::numbers::pi);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  if (contrast <= 0.0) return;
  auto wave = [&](double wavelength, double angle, double amp) {
    Texture::Wave w;
    const double k = 2.0 * std::numbers::pi / wavelength;
    w.kx = k * std::cos(angle);
    w.ky = k * std::sin(angle);
    w.phase = phase;
    w.amplitude = {amp, amp, amp};
    t.waves.push_back(w);
  };
  switch (cls) {
    case ShapeClass::circle: wave(9.0, dir, contrast); break;
    case ShapeClass::rectangle: wave(3.5, dir, contrast); break;
    case ShapeClass::triangle:
      wave(6.0, dir, contrast / std::sqrt(2.0));
      wave(6.0, dir + std::numbers::pi / 2, contrast / std::sqrt(2.0));
      break;
  }
}

void check_range(const Range& r, const char* name, double min_lo) {
  if (!(r.lo >= min_lo && r.lo <= r.hi)) throw ConfigError(std::string("synthvid: invalid range for ") + name);
}

}  // namespace

std::array<double, 3> Texture::at(double x, double y) const noexcept {
  std::array<double, 3> c = base;
  for (const Wave& w : waves) {
    const double s = std::sin(w.kx * x + w.ky * y + w.phase);
    for (int ch = 0; ch < 3; ++ch) c[ch] += w.amplitude[ch] * s;
  }
  return c;
}

geom::AffineMap ShapeSpec::pose(double t) const {
  const double s = std::pow(1.0 + scale_rate, t);
  return geom::compose(
      geom::AffineMap::translation(center.x + velocity.x * t, center.y + velocity.y * t),
      geom::compose(geom::AffineMap::rotation((angle_deg + angular_velocity_deg * t) * kDeg),
                    geom::AffineMap::scaling(s)));
}

double ShapeSpec::signed_distance(geom::Point p, double t) const {
  const double s = std::pow(1.0 + scale_rate, t);
  return local_sdf(*this, geom::invert(pose(t)).apply(p)) * s;
}

void SceneSpec::validate() const {
  if (height == 0 || width == 0) throw ConfigError("synthvid: canvas must be non-empty");
  geom::require_invertible(ego);
  for (const ShapeSpec& s : shapes) {
    if (!(s.size > 0.0) || !(s.aspect > 0.0) || !(1.0 + s.scale_rate > 0.0))
      throw ConfigError("synthvid: shape size, aspect and 1 + scale_rate must be positive");
    const auto c = static_cast<std::uint8_t>(s.cls);
    if (c < 1 || c > 3) throw ConfigError("synthvid: unknown shape class " + std::to_string(c));
  }
}

geom::AffineMap SceneSpec::ego_pose(std::int64_t t) const {
  const geom::AffineMap step = t >= 0 ? ego : geom::invert(ego);
  geom::AffineMap out;
  for (std::int64_t i = 0; i < (t >= 0 ? t : -t); ++i) out = geom::compose(step, out);
  return out;
}

int owner_at(const SceneSpec& spec, geom::Point p, double t) {
  for (std::size_t i = spec.shapes.size(); i-- > 0;)
    if (spec.shapes[i].signed_distance(p, t) < 0.0) return static_cast<int>(i);
  return -1;
}

FramePacket render_frame(const SceneSpec& spec, std::int64_t t) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width;
  FramePacket out{feature_map<double>(3, h, w), LabelMap(h, w)};
  const geom::AffineMap bg_inv = geom::invert(spec.ego_pose(t));
  std::vector<geom::AffineMap> shape_inv;
  std::vector<double> shape_scale;
  for (const ShapeSpec& s : spec.shapes) {
    shape_inv.push_back(geom::invert(s.pose(static_cast<double>(t))));
    shape_scale.push_back(std::pow(1.0 + s.scale_rate, static_cast<double>(t)));
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const geom::Point p{static_cast<double>(x), static_cast<double>(y)};
      const geom::Point b = bg_inv.apply(p);
      std::array<double, 3> c = spec.background.at(b.x, b.y);
      std::uint8_t label = 0;
      for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
        const ShapeSpec& s = spec.shapes[i];
        const geom::Point q = shape_inv[i].apply(p);
        const double sd = local_sdf(s, q) * shape_scale[i];
        const double alpha = std::clamp(0.5 - sd, 0.0, 1.0);
        if (sd < 0.0) label = static_cast<std::uint8_t>(s.cls);
        if (alpha <= 0.0) continue;
        const std::array<double, 3> sc = s.texture.at(q.x, q.y);
        for (int ch = 0; ch < 3; ++ch) c[ch] = alpha * sc[ch] + (1.0 - alpha) * c[ch];
      }
      for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = std::clamp(c[ch], 0.0, 1.0);
      out.labels(y, x) = label;
    }
  return out;
}

FlowWithOcclusion gt_flow(const SceneSpec& spec, std::int64_t t_from, std::int64_t t_to) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width;
  FlowWithOcclusion out{geom::FlowField(h, w), Mask(h, w)};
  const double t0 = static_cast<double>(t_from), t1 = static_cast<double>(t_to);
  const geom::AffineMap bg = geom::compose(spec.ego_pose(t_to), geom::invert(spec.ego_pose(t_from)));
  std::vector<geom::AffineMap> moves;
  for (const ShapeSpec& s : spec.shapes) moves.push_back(geom::compose(s.pose(t1), geom::invert(s.pose(t0))));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const geom::Point p{static_cast<double>(x), static_cast<double>(y)};
      const int owner = owner_at(spec, p, t0);
      const geom::Point q = owner < 0 ? bg.apply(p) : moves[static_cast<std::size_t>(owner)].apply(p);
      out.flow.u(y, x) = q.x - p.x;
      out.flow.v(y, x) = q.y - p.y;
      const bool occluded = !geom::in_frame(w, h, q.x, q.y) || owner_at(spec, q, t1) != owner;
      out.occluded(y, x) = occluded ? 1 : 0;
      out.flow.valid(y, x) = occluded ? 0 : 1;
    }
  return out;
}

geom::FlowField add_flow_noise(const geom::FlowField& flow, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("add_flow_noise: sigma must be >= 0");
  geom::FlowField out = flow;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> n(0.0, sigma);
  for (std::size_t i = 0; i < out.u.size(); ++i) {
    out.u.values[i] += n(rng);
    out.v.values[i] += n(rng);
  }
  return out;
}

void SceneGenConfig::validate() const {
  if (height == 0 || width == 0) throw ConfigError("synthvid: canvas must be non-empty");
  if (min_shapes > max_shapes) throw ConfigError("synthvid: min_shapes exceeds max_shapes");
  check_range(size, "size", 1e-6);
  check_range(aspect, "aspect", 1e-6);
  check_range(relative_speed, "relative_speed", 0.0);
  if (!(max_scale_rate >= 0.0 && max_scale_rate < 1.0)) throw ConfigError("synthvid: max_scale_rate must lie in [0, 1)");
  if (!(ego_max_zoom >= 0.0 && ego_max_zoom < 1.0)) throw ConfigError("synthvid: ego_max_zoom must lie in [0, 1)");
  if (!(noise_sigma_flow >= 0.0)) throw ConfigError("synthvid: noise_sigma_flow must be >= 0");
  if (!(max_angular_velocity_deg >= 0.0 && ego_max_translation >= 0.0 && ego_max_rotation_deg >= 0.0 &&
        background_contrast >= 0.0 && shape_contrast >= 0.0 && class_pattern_contrast >= 0.0))
    throw ConfigError("synthvid: motion and contrast bounds must be >= 0");
}

SceneSpec random_scene(const SceneGenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SceneSpec s;
  s.height = cfg.height;
  s.width = cfg.width;
  const double cx = (static_cast<double>(cfg.width) - 1.0) / 2.0, cy = (static_cast<double>(cfg.height) - 1.0) / 2.0;
  const double zoom = 1.0 + uniform(rng, -cfg.ego_max_zoom, cfg.ego_max_zoom);
  const double rot = uniform(rng, -cfg.ego_max_rotation_deg, cfg.ego_max_rotation_deg) * kDeg;
  const double tx = uniform(rng, -cfg.ego_max_translation, cfg.ego_max_translation);
  const double ty = uniform(rng, -cfg.ego_max_translation, cfg.ego_max_translation);
  s.ego = geom::compose(geom::AffineMap::translation(cx + tx, cy + ty),
                        geom::compose(geom::AffineMap::rotation(rot),
                                      geom::compose(geom::AffineMap::scaling(zoom),
                                                    geom::AffineMap::translation(-cx, -cy))));
  std::array<double, 3> bg_base;
  for (double& c : bg_base) c = uniform(rng, 0.3, 0.7);
  s.background = random_texture(rng, bg_base, cfg.background_waves, cfg.background_contrast, {6.0, 40.0});

  const auto count = std::uniform_int_distribution<std::size_t>(cfg.min_shapes, cfg.max_shapes)(rng);
  for (std::size_t i = 0; i < count; ++i) {
    ShapeSpec sh;
    sh.cls = static_cast<ShapeClass>(std::uniform_int_distribution<int>(1, 3)(rng));
    sh.size = uniform(rng, cfg.size.lo, cfg.size.hi);
    sh.aspect = sh.cls == ShapeClass::rectangle ? uniform(rng, cfg.aspect.lo, cfg.aspect.hi) : 1.0;
    sh.angle_deg = uniform(rng, 0.0, 360.0);
    sh.center = {uniform(rng, 0.0, static_cast<double>(cfg.width) - 1.0),
                 uniform(rng, 0.0, static_cast<double>(cfg.height) - 1.0)};
    const geom::Point carried = s.ego.apply(sh.center);
    const double speed = uniform(rng, cfg.relative_speed.lo, cfg.relative_speed.hi);
    const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    sh.velocity = {carried.x - sh.center.x + speed * std::cos(dir), carried.y - sh.center.y + speed * std::sin(dir)};
    sh.angular_velocity_deg = uniform(rng, -cfg.max_angular_velocity_deg, cfg.max_angular_velocity_deg);
    sh.scale_rate = uniform(rng, -cfg.max_scale_rate, cfg.max_scale_rate);
    const auto base = hsv_to_rgb(uniform(rng, 0.0, 1.0), uniform(rng, 0.4, 1.0), uniform(rng, 0.35, 1.0));
    sh.texture = random_texture(rng, base, cfg.shape_waves, cfg.shape_contrast, {4.0, 12.0});
    add_class_pattern(rng, sh.texture, sh.cls, cfg.class_pattern_contrast);
    s.shapes.push_back(std::move(sh));
  }
  return s;
}

void DatasetConfig::validate() const {
  scene.validate();
  if (episodes == 0) throw ConfigError("synthvid: episodes must be positive");
  if (frame_gap == 0) throw ConfigError("synthvid: frame_gap must be positive");
  if (frames_per_episode <= frame_gap)
    throw ConfigError("synthvid: frames_per_episode must exceed frame_gap to form a pair");
}

std::string class_name(std::uint8_t id) {
  switch (id) {
    case 0: return "background";
    case 1: return "circle";
    case 2: return "rectangle";
    case 3: return "triangle";
    default: return "class" + std::to_string(id);
  }
}

std::filesystem::path gen_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::vector<std::string>> lines(cfg.episodes);
  parallel_for(cfg.episodes, [&](std::size_t e) {
    const std::uint64_t seed = derive_seed(cfg.seed, {e});
    const SceneSpec scene = random_scene(cfg.scene, seed);
    char dir_name[32];
    std::snprintf(dir_name, sizeof(dir_name), "ep%04zu", e);
    std::error_code dir_ec;
    std::filesystem::create_directories(out_dir / dir_name, dir_ec);
    if (dir_ec) throw IoError("cannot create " + (out_dir / dir_name).string() + ": " + dir_ec.message());
    auto rel = [&](const char* stem, std::size_t t, const char* ext) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s/%s_%03zu.%s", dir_name, stem, t, ext);
      return std::string(buf);
    };
    for (std::size_t t = 0; t < cfg.frames_per_episode; ++t) {
      const FramePacket frame = render_frame(scene, static_cast<std::int64_t>(t));
      nlohmann::ordered_json j;
      j["episode"] = e;
      j["frame"] = t;
      j["gap"] = cfg.frame_gap;
      j["seed"] = seed;
      j["image"] = rel("frame", t, "png");
      j["labels"] = rel("labels", t, "png");
      image::write_rgb(out_dir / j["image"].get<std::string>(), frame.image);
      image::write_gray(out_dir / j["labels"].get<std::string>(), frame.labels);
      if (t + cfg.frame_gap < cfg.frames_per_episode) {
        const FlowWithOcclusion f =
            gt_flow(scene, static_cast<std::int64_t>(t), static_cast<std::int64_t>(t + cfg.frame_gap));
        j["next"] = rel("frame", t + cfg.frame_gap, "png");
        j["flow"] = rel("flow", t, "flo");
        j["occlusion"] = rel("occ", t, "png");
        flo::write_file(out_dir / j["flow"].get<std::string>(), f.flow);
        Mask occ = f.occluded;
        for (auto& v : occ.values) v = v ? 255 : 0;
        image::write_gray(out_dir / j["occlusion"].get<std::string>(), occ);
      }
      lines[e].push_back(j.dump());
    }
  });

  const auto manifest = out_dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest.string());
  for (const auto& ep : lines)
    for (const auto& l : ep) out << l << '\n';
  out.close();
  if (!out) throw IoError("failed writing " + manifest.string());
  return manifest;
}

}  // namespace flowe::synth
