#include "flowe/selfcheck.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "flowe/checkpoint.hpp"
#include "flowe/flo.hpp"
#include "flowe/geometry.hpp"
#include "flowe/gradcheck.hpp"
#include "flowe/network.hpp"
#include "flowe/optimizer.hpp"
#include "flowe/rng.hpp"
#include "flowe/trainer.hpp"

namespace flowe::check {

bool SuiteReport::passed() const {
  for (const auto& r : results)
    if (!r.passed) return false;
  return !results.empty();
}

void SuiteReport::append(const SuiteReport& other) {
  results.insert(results.end(), other.results.begin(), other.results.end());
}

void SuiteReport::print(std::ostream& os) const {
  for (const auto& r : results) {
    os << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(44) << r.name << std::right << " value "
       << std::setprecision(3) << std::scientific << r.value << " tol " << r.tolerance << std::defaultfloat;
    if (!r.detail.empty()) os << "  " << r.detail;
    os << '\n';
  }
}

namespace {

using geom::AffineMap;

void add_upper(SuiteReport& rep, std::string name, double value, double tol, std::string detail = {}) {
  rep.results.push_back({std::move(name), value < tol, value, tol, std::move(detail)});
}

void add_flag(SuiteReport& rep, std::string name, bool ok, std::string detail = {}) {
  rep.results.push_back({std::move(name), ok, ok ? 0.0 : 1.0, 0.5, std::move(detail)});
}

Tensor<double> random_image(Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
  auto t = feature_map<double>(c, h, w);
  for (double& v : t.values()) v = uniform(rng, 0.0, 1.0);
  return t;
}

void add_gradcheck(SuiteReport& rep, const std::string& name, const nn::GradCheckReport& g) {
  std::size_t checked = 0, skipped = 0, vanishing = 0;
  std::string worst_layer;
  double worst = -1.0;
  for (const auto& l : g.layers) {
    checked += l.checked;
    skipped += l.skipped;
    vanishing += l.vanishing;
    if (l.max_rel_error > worst) {
      worst = l.max_rel_error;
      worst_layer = l.name;
    }
  }
  std::ostringstream d;
  d << checked << " entries, " << skipped << " at ReLU kinks, ";
  if (vanishing) d << vanishing << " tensors with vanishing gradient, ";
  d << "worst " << worst_layer;
  add_upper(rep, name, g.worst(), kGradTolerance, d.str());
}

nn::ArchSpec single_layer_arch(const nn::ConvLayerSpec& layer, nn::Norm norm) {
  nn::ArchSpec a;
  a.encoder = {layer};
  a.projector = {nn::ConvLayerSpec::conv1(layer.out_ch, 4, nn::Activation::none)};
  a.predictor = {nn::ConvLayerSpec::conv1(4, 3, nn::Activation::relu)};
  a.encoder_norm = norm;
  a.drop_cancelled_biases();
  return a;
}

nn::ArchSpec toy_arch(nn::Norm encoder_norm = nn::Norm::none, nn::Norm head_norm = nn::Norm::none) {
  nn::ArchSpec a;
  a.encoder = {nn::ConvLayerSpec::conv3(3, 4, 2), nn::ConvLayerSpec::conv3(4, 6, 2), nn::ConvLayerSpec::conv3(6, 8, 2),
               nn::ConvLayerSpec::conv3(8, 8, 1, 2)};
  a.projector = {nn::ConvLayerSpec::conv1(8, 8), nn::ConvLayerSpec::conv1(8, 6, nn::Activation::none)};
  a.predictor = {nn::ConvLayerSpec::conv1(6, 6), nn::ConvLayerSpec::conv1(6, 6, nn::Activation::none)};
  a.encoder_norm = encoder_norm;
  a.head_norm = head_norm;
  a.drop_cancelled_biases();
  return a;
}

geom::DenseCorrespondence toy_correspondence(std::size_t h, std::size_t w) {
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  const AffineMap a1 = geom::compose(
      AffineMap::translation(cx, cy),
      geom::compose(AffineMap::rotation(0.15), geom::compose(AffineMap::scaling(1.1), AffineMap::translation(-cx, -cy))));
  const AffineMap a2 = AffineMap::translation(-0.6, 0.3);
  return geom::compose_transform(a1, geom::FlowField::constant(h, w, 0.7, -0.4), a2, {h, w});
}

}  // namespace

SuiteReport gradient_suite() {
  SuiteReport rep;
  Rng rng(20240611);
  struct Case {
    const char* name;
    nn::ConvLayerSpec layer;
    nn::Norm norm;
  };
  const Case cases[] = {
      {"grad conv3x3 stride1 relu", nn::ConvLayerSpec::conv3(3, 5, 1), nn::Norm::none},
      {"grad conv3x3 stride2 relu", nn::ConvLayerSpec::conv3(3, 5, 2), nn::Norm::none},
      {"grad conv3x3 dilation2 relu", nn::ConvLayerSpec::conv3(3, 5, 1, 2), nn::Norm::none},
      {"grad conv3x3 linear", nn::ConvLayerSpec::conv3(3, 5, 1, 1, nn::Activation::none), nn::Norm::none},
      {"grad conv1x1 relu", nn::ConvLayerSpec::conv1(3, 5), nn::Norm::none},
      {"grad conv1x1 linear", nn::ConvLayerSpec::conv1(3, 5, nn::Activation::none), nn::Norm::none},
      {"grad conv3x3 per-location norm relu", nn::ConvLayerSpec::conv3(3, 5, 1), nn::Norm::per_location},
      {"grad conv3x3 per-channel norm relu", nn::ConvLayerSpec::conv3(3, 5, 1), nn::Norm::per_channel},
  };
  for (std::size_t i = 0; i < std::size(cases); ++i) {
    const auto params = nn::init_params<double>(100 + i, single_layer_arch(cases[i].layer, cases[i].norm));
    add_gradcheck(rep, cases[i].name, nn::finite_diff_check(params, random_image(rng, 3, 8, 8), 1e-5, 7 + i));
  }
  {
    const auto params = nn::init_params<double>(200, toy_arch());
    nn::ForwardOptions pooled;
    pooled.pooled = true;
    add_gradcheck(rep, "grad spatial mean pooling",
                  nn::finite_diff_check(params, random_image(rng, 3, 16, 16), 1e-5, 11, pooled));
  }

  struct Composite {
    const char* name;
    nn::Norm encoder_norm, head_norm;
    bool pooled;
  };
  const Composite composites[] = {
      {"grad full loss 3x16x16", nn::Norm::none, nn::Norm::none, false},
      {"grad full loss per-location norm", nn::Norm::per_location, nn::Norm::per_location, false},
      {"grad full loss per-channel norm", nn::Norm::per_channel, nn::Norm::per_channel, false},
      {"grad full loss pooled", nn::Norm::none, nn::Norm::none, true},
      {"grad full loss pooled per-channel norm", nn::Norm::per_channel, nn::Norm::per_channel, true},
  };
  for (std::size_t variant = 0; variant < std::size(composites); ++variant) {
    const Composite& cc = composites[variant];
    const bool pooled = cc.pooled;
    const auto online = nn::init_params<double>(300 + variant, toy_arch(cc.encoder_norm, cc.head_norm));
    const auto target = nn::init_params<double>(400 + variant, toy_arch(cc.encoder_norm, cc.head_norm)).target_copy();
    const Tensor<double> v1 = random_image(rng, 3, 16, 16), v2 = random_image(rng, 3, 16, 16);
    const auto tmap = train::target_map(target, v2, toy_correspondence(16, 16), pooled);
    const auto analytic = train::online_objective(online, v1, tmap, pooled, true);
    const nn::Objective objective = [&](const nn::ModelParams<double>& p) {
      const auto r = train::online_objective(p, v1, tmap, pooled, false);
      return nn::ProbeValue{r.loss, r.relu_pattern};
    };
    add_gradcheck(rep, cc.name, nn::compare_gradients(online, *analytic.grads, objective, 1e-5));
  }

  {
    // <U x, y> = <x, U^T y>
    const Tensor<double> x = random_image(rng, 2, 3, 5), y = random_image(rng, 2, 11, 17);
    const Tensor<double> ux = geom::upsample_bilinear(x, 11, 17), uty = geom::upsample_bilinear_adjoint(y, 3, 5);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < ux.numel(); ++i) lhs += ux.data()[i] * y.data()[i];
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * uty.data()[i];
    add_upper(rep, "upsample adjoint identity", std::abs(lhs - rhs) / std::max(std::abs(lhs), 1.0), 1e-12);
  }
  return rep;
}

SuiteReport warp_suite() {
  SuiteReport rep;
  Rng rng(7031);
  {
    auto f = feature_map<double>(2, 9, 11);
    const double coef[2][3] = {{0.3, -1.25, 0.5}, {-2.0, 0.75, 1.5}};
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 9; ++y)
        for (std::size_t x = 0; x < 11; ++x) f.at(c, y, x) = coef[c][0] + coef[c][1] * x + coef[c][2] * y;
    double err = 0.0;
    for (int i = 0; i < 2000; ++i) {
      const double x = uniform(rng, 0.0, 10.0), y = uniform(rng, 0.0, 8.0);
      const auto s = geom::bilinear_sample(f, x, y);
      for (std::size_t c = 0; c < 2; ++c) err = std::max(err, std::abs(s.values[c] - (coef[c][0] + coef[c][1] * x + coef[c][2] * y)));
    }
    add_upper(rep, "bilinear exact on linear fields", err, kGeometryTolerance);
  }
  auto random_affine = [&rng] {
    AffineMap a = geom::compose(AffineMap::translation(uniform(rng, -20, 20), uniform(rng, -20, 20)),
                                geom::compose(AffineMap::rotation(uniform(rng, -0.6, 0.6)),
                                              AffineMap::scaling(uniform(rng, 0.5, 2.0), uniform(rng, 0.5, 2.0))));
    return a;
  };
  {
    double err = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const AffineMap a = random_affine();
      const geom::Point p{uniform(rng, -50, 150), uniform(rng, -50, 150)};
      const geom::Point q = geom::invert(a).apply(a.apply(p));
      err = std::max({err, std::abs(q.x - p.x), std::abs(q.y - p.y)});
      const AffineMap id = geom::compose(a, geom::invert(a));
      const AffineMap ref;
      for (int k = 0; k < 6; ++k) err = std::max(err, std::abs(id.m[k] - ref.m[k]));
    }
    add_upper(rep, "affine round trip", err, kGeometryTolerance);
  }
  {
    const auto corr = geom::compose_transform(AffineMap::identity(), geom::FlowField(12, 20), AffineMap::identity(), {12, 20});
    double err = 0.0;
    bool all_valid = true;
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 20; ++x) {
        err = std::max({err, std::abs(corr.tx(y, x) - x), std::abs(corr.ty(y, x) - y)});
        all_valid = all_valid && corr.valid(y, x);
      }
    add_upper(rep, "composed transform identity", all_valid ? err : 1.0, kGeometryTolerance);
  }
  {
    double err = 0.0;
    bool mask_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
      const AffineMap a1 = random_affine(), a2 = random_affine();
      const std::size_t h = 16, w = 24;
      const auto corr = geom::compose_transform(a1, geom::FlowField(30, 40), a2, {h, w});
      const AffineMap expect = geom::compose(a2, geom::invert(a1));
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const geom::Point src = geom::invert(a1).apply(double(x), double(y));
          const geom::Point t = expect.apply(double(x), double(y));
          const bool valid = geom::in_frame(40, 30, src.x, src.y) && geom::in_frame(w, h, t.x, t.y);
          mask_ok = mask_ok && (valid == static_cast<bool>(corr.valid(y, x)));
          if (corr.valid(y, x)) err = std::max({err, std::abs(corr.tx(y, x) - t.x), std::abs(corr.ty(y, x) - t.y)});
        }
    }
    add_upper(rep, "composed transform affine-only", mask_ok ? err : 1.0, kGeometryTolerance,
              mask_ok ? "" : "validity disagrees with the analytic predicate");
  }
  {
    // Flow F(x) = A x + b - x and its inverse G(y) = A^-1 (y - b) - y: both
    // are linear, so bilinear lookups of G at x + F(x) return x exactly.
    const std::size_t h = 20, w = 28;
    const AffineMap a = geom::compose(AffineMap::translation(1.3, -0.8),
                                      geom::compose(AffineMap::rotation(0.05), AffineMap::scaling(1.04)));
    const AffineMap ai = geom::invert(a);
    geom::FlowField f(h, w), g(h, w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const geom::Point p = a.apply(double(x), double(y)), q = ai.apply(double(x), double(y));
        f.u(y, x) = p.x - x;
        f.v(y, x) = p.y - y;
        g.u(y, x) = q.x - x;
        g.v(y, x) = q.y - y;
      }
    const auto fwd = geom::compose_transform(AffineMap::identity(), f, AffineMap::identity(), {h, w});
    const auto bwd = geom::compose_transform(AffineMap::identity(), g, AffineMap::identity(), {h, w});
    double err = 0.0;
    std::size_t used = 0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!fwd.valid(y, x)) continue;
        double bx = 0.0, by = 0.0;
        if (!geom::sample_grid(bwd.tx, fwd.tx(y, x), fwd.ty(y, x), bx) ||
            !geom::sample_grid(bwd.ty, fwd.tx(y, x), fwd.ty(y, x), by))
          continue;
        err = std::max({err, std::abs(bx - x), std::abs(by - y)});
        ++used;
      }
    add_upper(rep, "linear-field warp inverse", used > h * w / 2 ? err : 1.0, kGeometryTolerance,
              std::to_string(used) + " pixels");
  }
  {
    geom::FlowField f(7, 13);
    for (std::size_t i = 0; i < f.u.size(); ++i) {
      f.u.values[i] = static_cast<float>(normal(rng, 0.0, 5.0));
      f.v.values[i] = static_cast<float>(normal(rng, 0.0, 5.0));
    }
    const auto bytes = flo::write(f);
    const auto back = flo::read(bytes);
    add_flag(rep, ".flo bit-exact round trip", back == f && flo::write(back) == bytes);
  }
  return rep;
}

SuiteReport loss_suite() {
  SuiteReport rep;
  Rng rng(99);
  auto random_map = [&rng](std::size_t c, std::size_t h, std::size_t w) {
    auto t = feature_map<double>(c, h, w);
    const double scale = std::pow(10.0, uniform(rng, -8.0, 3.0));
    for (double& v : t.values()) v = bernoulli(rng, 0.02) ? 0.0 : normal(rng, 0.0, scale);
    return t;
  };
  auto random_mask = [&rng](std::size_t h, std::size_t w, double p) {
    Mask m(h, w);
    for (auto& v : m.values) v = bernoulli(rng, p) ? 1 : 0;
    return m;
  };
  {
    double lo = 0.0, hi = 0.0;
    bool finite = true;
    for (int i = 0; i < 10000; ++i) {
      const auto p1 = random_map(6, 4, 5), p2 = random_map(6, 4, 5);
      const auto r = train::flowe_loss(p1, p2, random_mask(4, 5, uniform(rng, 0.0, 1.0)));
      finite = finite && std::isfinite(r.loss) && all_finite(r.grad);
      lo = std::min(lo, r.loss);
      hi = std::max(hi, r.loss);
    }
    const bool ok = finite && lo >= 0.0 && hi <= 4.0;
    rep.results.push_back({"loss within [0, 4] on 1e4 inputs", ok, hi, 4.0,
                           "min " + std::to_string(lo) + (finite ? "" : ", non-finite value seen")});
  }
  {
    bool same = true;
    for (int i = 0; i < 200; ++i) {
      const auto p1 = random_map(6, 5, 7), p2 = random_map(6, 5, 7);
      const Mask m = random_mask(5, 7, 0.5);
      auto q1 = p1, q2 = p2;
      for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t j = 0; j < m.size(); ++j)
          if (!m.values[j]) {
            q1.plane(c)[j] = normal(rng, 0.0, 10.0);
            q2.plane(c)[j] = normal(rng, 0.0, 10.0);
          }
      const auto a = train::flowe_loss(p1, p2, m), b = train::flowe_loss(q1, q2, m);
      same = same && a.loss == b.loss && a.grad == b.grad;
    }
    add_flag(rep, "masked-pixel locality (bitwise)", same);
  }
  {
    double err = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto p1 = random_map(6, 3, 4);
      auto p2 = p1;
      const double c = uniform(rng, 0.1, 10.0);
      for (double& v : p2.values()) v *= -c;
      Mask m(3, 4, 1);
      bool degenerate = false;
      for (std::size_t j = 0; j < m.size(); ++j) {
        double n = 0.0;
        for (std::size_t ch = 0; ch < 6; ++ch) n += p1.plane(ch)[j] * p1.plane(ch)[j];
        if (std::sqrt(n) < 1e-6) degenerate = true;
      }
      if (degenerate) continue;
      err = std::max(err, std::abs(train::flowe_loss(p1, p2, m).loss - 4.0));
    }
    add_upper(rep, "antipodal maps give loss 4", err, 1e-9);
  }
  {
    nn::ArchSpec arch = toy_arch();
    auto state = train::TrainState<double>::fresh(5, arch);
    const auto before_online = nn::params_digest(state.online), before_target = nn::params_digest(state.target);
    const auto before_velocity = nn::params_digest(state.velocity);
    train::TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.total_steps = 10;
    aug::AugmentConfig aug_cfg;
    aug_cfg.scale = {1.0, 1.0};
    aug_cfg.rotation_deg = {0.0, 0.0};
    aug_cfg.crop_height = 16;
    aug_cfg.crop_width = 16;
    train::FrameTriple t{random_image(rng, 3, 16, 16), random_image(rng, 3, 16, 16), geom::FlowField(16, 16)};
    std::fill(t.flow.valid.values.begin(), t.flow.valid.values.end(), 0);
    const std::vector<train::FrameTriple> batch{t, t};
    const auto report = train::train_step(state, cfg, aug_cfg, batch);
    const bool ok = report.skipped && nn::params_digest(state.online) == before_online &&
                    nn::params_digest(state.target) == before_target &&
                    nn::params_digest(state.velocity) == before_velocity && report.valid_pixel_fraction == 0.0;
    add_flag(rep, "empty mask skips the step", ok);
  }
  return rep;
}

SuiteReport ema_suite() {
  SuiteReport rep;
  const nn::ArchSpec arch = toy_arch();
  const auto online = nn::init_params<double>(1, arch);
  auto distance = [&](const nn::ModelParams<double>& target) {
    double s = 0.0;
    for (nn::Part p : {nn::Part::encoder, nn::Part::projector})
      for (std::size_t l = 0; l < online.layers(p).size(); ++l) {
        const auto& a = online.layers(p)[l];
        const auto& b = target.layers(p)[l];
        for (std::size_t i = 0; i < a.weight.numel(); ++i) s += std::pow(a.weight.data()[i] - b.weight.data()[i], 2);
        for (std::size_t i = 0; i < a.bias.numel(); ++i) s += std::pow(a.bias.data()[i] - b.bias.data()[i], 2);
      }
    return std::sqrt(s);
  };
  {
    const double tau = 0.97;
    auto target = nn::init_params<double>(2, arch).target_copy();
    const double d0 = distance(target);
    double err = 0.0;
    for (int k = 1; k <= 100; ++k) {
      train::ema_update(online, target, tau);
      const double expect = std::pow(tau, k) * d0;
      err = std::max(err, std::abs(distance(target) - expect) / expect);
    }
    add_upper(rep, "EMA contraction over 100 steps", err, kEmaTolerance);
  }
  {
    auto target = nn::init_params<double>(3, arch).target_copy();
    train::ema_update(online, target, 0.0);
    add_flag(rep, "EMA tau = 0 copies online", distance(target) == 0.0);
  }
  {
    auto target = nn::init_params<double>(4, arch).target_copy();
    const auto before = nn::params_digest(target);
    train::ema_update(online, target, 1.0);
    add_flag(rep, "EMA tau = 1 leaves target unchanged", nn::params_digest(target) == before);
  }
  return rep;
}

SuiteReport run_all() {
  SuiteReport rep = gradient_suite();
  rep.append(warp_suite());
  rep.append(loss_suite());
  rep.append(ema_suite());
  return rep;
}

}  // namespace flowe::check
