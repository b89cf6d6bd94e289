#include "flowe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "flowe/geometry.hpp"
#include "flowe/kernels.hpp"
#include "flowe/parallel.hpp"

namespace flowe::train {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("trainer: batch_size must be positive");
  if (!(base_lr > 0.0)) throw ConfigError("trainer: base_lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("trainer: weight_decay must be >= 0");
  if (!(ema_tau > 0.0 && ema_tau <= 1.0)) throw ConfigError("trainer: ema_tau must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("trainer: momentum must lie in [0, 1)");
  if (!(trust_coefficient > 0.0)) throw ConfigError("trainer: trust_coefficient must be positive");
}

OptimizerSettings TrainConfig::optimizer_settings() const {
  OptimizerSettings s;
  s.kind = optimizer;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  s.trust_coefficient = trust_coefficient;
  return s;
}

std::string StepReport::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["valid_pixel_fraction"] = valid_pixel_fraction;
  j["lr"] = lr;
  j["ema_tau_effective"] = ema_tau_effective;
  j["grad_norm"] = grad_norm;
  j["skipped"] = skipped;
  return j.dump();
}

std::string checkpoint_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06llu.bin", static_cast<unsigned long long>(step));
  return buf;
}

template <std::floating_point T>
LossResult<T> flowe_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Mask& mask) {
  require_feature_map(p1, "flowe_loss");
  if (p1.shape() != p2.shape()) throw DimensionError("flowe_loss: p1 " + p1.shape().str() + " vs p2 " + p2.shape().str());
  if (!mask.same_shape(p1.height(), p1.width())) throw DimensionError("flowe_loss: mask shape mismatch");
  LossResult<T> r;
  r.grad = Tensor<T>(p1.shape());
  r.count = count_set(mask);
  if (r.count == 0) return r;

  const std::size_t n = p1.plane_size(), channels = p1.channels();
  const double inv_count = 1.0 / static_cast<double>(r.count);
  const T* a = p1.data();
  const T* b = p2.data();
  T* g = r.grad.data();
  std::vector<double> n1(channels), d(channels);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.values[i]) continue;
    double sa = 0.0, sb = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      sa += static_cast<double>(a[c * n + i]) * a[c * n + i];
      sb += static_cast<double>(b[c * n + i]) * b[c * n + i];
    }
    const double na = std::sqrt(sa), nb = std::sqrt(sb);
    const double ia = 1.0 / std::max(na, geom::kNormalizeEps), ib = 1.0 / std::max(nb, geom::kNormalizeEps);
    double dist = 0.0, proj = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      n1[c] = a[c * n + i] * ia;
      d[c] = n1[c] - b[c * n + i] * ib;
      dist += d[c] * d[c];
    }
    total += dist;
    // dL/dn1 = 2 d / count, pulled back through the normalization.
    if (na >= geom::kNormalizeEps) {
      for (std::size_t c = 0; c < channels; ++c) proj += n1[c] * d[c];
      for (std::size_t c = 0; c < channels; ++c)
        g[c * n + i] = static_cast<T>(2.0 * inv_count * (d[c] - n1[c] * proj) * ia);
    } else {
      for (std::size_t c = 0; c < channels; ++c) g[c * n + i] = static_cast<T>(2.0 * inv_count * d[c] * ia);
    }
  }
  r.loss = total * inv_count;
  return r;
}

template <std::floating_point T>
TrainState<T> TrainState<T>::fresh(std::uint64_t seed, const nn::ArchSpec& arch) {
  TrainState s;
  s.online = nn::init_params<T>(derive_seed(seed, {0x1417}), arch);
  s.target = s.online.target_copy();
  s.velocity = s.online.zeros_like();
  return s;
}

template <std::floating_point T>
TrainState<T> TrainState<T>::from_checkpoint(nn::Checkpoint<T> ckpt) {
  TrainState s;
  s.step = ckpt.step;
  s.target = ckpt.target ? std::move(*ckpt.target) : ckpt.online.target_copy();
  s.velocity = ckpt.velocity ? std::move(*ckpt.velocity) : ckpt.online.zeros_like();
  s.online = std::move(ckpt.online);
  return s;
}

template <std::floating_point T>
nn::Checkpoint<T> TrainState<T>::checkpoint() const {
  return {online, target, velocity, step};
}

template <std::floating_point T>
TargetMap<T> target_map(const nn::ModelParams<T>& target, const Tensor<T>& v2, const geom::DenseCorrespondence& corr,
                        bool pooled) {
  nn::ForwardOptions opts;
  opts.pooled = pooled;
  const nn::ForwardResult<T> r = nn::forward(target, v2, opts);
  const Tensor<T> z_up = geom::upsample_bilinear(r.z, v2.height(), v2.width());
  geom::Warped<T> w = geom::warp_features(z_up, corr);
  return {std::move(w.features), std::move(w.mask)};
}

template <std::floating_point T>
OnlineObjective<T> online_objective(const nn::ModelParams<T>& online, const Tensor<T>& v1, const TargetMap<T>& target,
                                    bool pooled, bool want_grads) {
  nn::ForwardOptions opts;
  opts.keep_trace = true;
  opts.pooled = pooled;
  const nn::ForwardResult<T> r = nn::forward(online, v1, opts);
  const Tensor<T> p_up = geom::upsample_bilinear(r.p, v1.height(), v1.width());
  LossResult<T> loss = flowe_loss(p_up, target.features, target.mask);
  OnlineObjective<T> out;
  out.loss = loss.loss;
  out.valid = loss.count;
  if (want_grads) {
    const Tensor<T> g = geom::upsample_bilinear_adjoint(loss.grad, r.p.height(), r.p.width());
    out.grads = nn::backward(online, *r.trace, g);
  } else {
    out.relu_pattern = r.trace->relu_pattern(online.arch);
  }
  return out;
}

std::vector<FrameTriple> draw_batch(const DataSource& source, const TrainConfig& cfg, std::uint64_t step) {
  std::vector<FrameTriple> batch(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) batch[i] = source.draw(derive_seed(cfg.seed, {step, i, 0xda7a}));
  return batch;
}

template <std::floating_point T>
StepReport train_step(TrainState<T>& state, const TrainConfig& cfg, const aug::AugmentConfig& aug_cfg,
                      std::span<const FrameTriple> batch) {
  StepReport report;
  report.step = state.step;
  const std::uint64_t total = std::max<std::uint64_t>(cfg.total_steps, 1);
  report.lr = cosine_lr(state.step, total, cfg.base_lr);
  report.ema_tau_effective = cfg.ema_cosine ? ema_tau_schedule(state.step, total, cfg.ema_tau) : cfg.ema_tau;

  const bool pooled = !cfg.ablation.pixel_based;
  aug::ViewOptions view_opts;
  view_opts.random_affine = cfg.ablation.use_affine;
  view_opts.photometric = cfg.photometric;

  struct Example {
    double loss = 0.0;
    std::size_t valid = 0;
    std::size_t pixels = 0;
    std::optional<nn::ParamGrads<T>> grads;
  };
  std::vector<Example> results(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const FrameTriple& item = batch[i];
    geom::FlowField flow = item.flow;
    if (!cfg.ablation.use_flow) flow = geom::FlowField(item.flow.height(), item.flow.width());
    const aug::ViewPairResult views = aug::make_view_pair(item.first, item.second, flow,
                                                          derive_seed(cfg.seed, {state.step, i, 0xa06}), aug_cfg,
                                                          view_opts);
    const Tensor<T> v1 = views.views.v1.template cast<T>();
    const Tensor<T> v2 = views.views.v2.template cast<T>();
    const TargetMap<T> target = target_map(state.target, v2, views.corr, pooled);
    Example& ex = results[i];
    ex.pixels = v1.plane_size();
    if (count_set(target.mask) == 0) return;
    OnlineObjective<T> obj = online_objective(state.online, v1, target, pooled, true);
    ex.loss = obj.loss;
    ex.valid = obj.valid;
    ex.grads = std::move(obj.grads);
  });

  std::size_t used = 0, valid = 0, pixels = 0;
  double loss_sum = 0.0;
  nn::ParamGrads<T> grads = state.online.zeros_like();
  for (Example& ex : results) {
    pixels += ex.pixels;
    if (ex.valid == 0) continue;
    ++used;
    valid += ex.valid;
    loss_sum += ex.loss;
    for (nn::Part p : nn::kParts)
      for (std::size_t l = 0; l < grads.layers(p).size(); ++l) {
        auto& dst = grads.layers(p)[l];
        const auto& src = ex.grads->layers(p)[l];
        kernels::axpy<T>(T{1}, src.weight.values(), dst.weight.values());
        if (!dst.bias.empty()) kernels::axpy<T>(T{1}, src.bias.values(), dst.bias.values());
      }
  }
  report.valid_pixel_fraction = pixels ? static_cast<double>(valid) / static_cast<double>(pixels) : 0.0;

  if (used == 0) {
    report.skipped = true;
    ++state.step;
    return report;
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(used));
  grads.for_each_tensor([inv](nn::Part, std::size_t, bool, Tensor<T>& t) {
    for (T& v : t.values()) v *= inv;
  });
  report.loss = loss_sum / static_cast<double>(used);
  report.grad_norm = global_norm(grads);

  optimizer_step(cfg.optimizer_settings(), state.online, grads, state.velocity, report.lr);
  ema_update(state.online, state.target, report.ema_tau_effective);
  ++state.step;
  return report;
}

namespace {

void rewrite_metrics_prefix(const std::filesystem::path& path, std::uint64_t keep_below) {
  std::vector<std::string> kept;
  if (std::ifstream in(path); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("step")) continue;
      if (j["step"].get<std::uint64_t>() < keep_below) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

template <std::floating_point T>
LoopResult<T> train_loop(const TrainConfig& cfg, const aug::AugmentConfig& aug_cfg, const nn::ArchSpec& arch,
                         const DataSource& source, const LoopOptions& opts) {
  cfg.validate();
  aug_cfg.validate();
  arch.validate();
  if (source.size() == 0) throw DataError("train_loop: data source is empty");

  LoopResult<T> result;
  bool fresh = true;
  if (opts.resume_from) {
    result.state = TrainState<T>::from_checkpoint(nn::load_checkpoint_file<T>(*opts.resume_from, arch));
    fresh = false;
    if (result.state.step > cfg.total_steps)
      throw ConfigError("resume checkpoint is at step " + std::to_string(result.state.step) +
                        ", beyond total_steps " + std::to_string(cfg.total_steps));
  } else {
    result.state = TrainState<T>::fresh(cfg.seed, arch);
  }

  std::ofstream metrics;
  auto save = [&](const TrainState<T>& s) {
    if (!opts.out_dir) return;
    const auto path = *opts.out_dir / checkpoint_name(s.step);
    try {
      nn::save_checkpoint_file(path, s.checkpoint());
    } catch (const Error& e) {
      throw IoError("step " + std::to_string(s.step) + ": " + e.what());
    }
  };
  if (opts.out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*opts.out_dir, ec);
    if (ec) throw IoError("cannot create " + opts.out_dir->string() + ": " + ec.message());
    const auto mpath = *opts.out_dir / "metrics.jsonl";
    rewrite_metrics_prefix(mpath, fresh ? 0 : result.state.step);
    metrics.open(mpath, std::ios::app);
    if (!metrics) throw IoError("cannot open " + mpath.string());
    if (fresh) save(result.state);
  }

  TrainState<T>& state = result.state;
  while (state.step < cfg.total_steps) {
    const std::vector<FrameTriple> batch = draw_batch(source, cfg, state.step);
    const StepReport rep = train_step(state, cfg, aug_cfg, batch);
    result.reports.push_back(rep);
    if (metrics.is_open()) {
      metrics << rep.to_json_line() << '\n';
      metrics.flush();
      if (!metrics) throw IoError("step " + std::to_string(rep.step) + ": failed writing metrics");
    }
    if (opts.on_step) opts.on_step(rep);
    if (cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0 && state.step < cfg.total_steps) save(state);
  }
  if (opts.out_dir && !(fresh && state.step == 0)) save(state);
  return result;
}

#define FLOWE_TRAIN_INSTANTIATE(T)                                                                             \
  template LossResult<T> flowe_loss(const Tensor<T>&, const Tensor<T>&, const Mask&);                           \
  template struct TrainState<T>;                                                                               \
  template TargetMap<T> target_map(const nn::ModelParams<T>&, const Tensor<T>&, const geom::DenseCorrespondence&, \
                                   bool);                                                                      \
  template OnlineObjective<T> online_objective(const nn::ModelParams<T>&, const Tensor<T>&, const TargetMap<T>&, \
                                               bool, bool);                                                    \
  template StepReport train_step(TrainState<T>&, const TrainConfig&, const aug::AugmentConfig&,                \
                                 std::span<const FrameTriple>);                                                \
  template LoopResult<T> train_loop(const TrainConfig&, const aug::AugmentConfig&, const nn::ArchSpec&,        \
                                    const DataSource&, const LoopOptions&);

FLOWE_TRAIN_INSTANTIATE(float)
FLOWE_TRAIN_INSTANTIATE(double)

#undef FLOWE_TRAIN_INSTANTIATE

}  // namespace flowe::train
