#include "flowe/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "flowe/kernels.hpp"

namespace flowe::train {

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
  if (total_steps == 0) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double ema_tau_schedule(std::uint64_t step, std::uint64_t total_steps, double tau0) {
  if (total_steps == 0) return tau0;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 1.0 - (1.0 - tau0) * (std::cos(std::numbers::pi * t) + 1.0) * 0.5;
}

namespace {

std::string tensor_name(nn::Part p, std::size_t i, bool bias) {
  return std::string(nn::part_name(p)) + "[" + std::to_string(i) + "]." + (bias ? "bias" : "weight");
}

template <std::floating_point T>
double norm(std::span<const T> v) {
  return std::sqrt(static_cast<double>(kernels::dot<T>(v, v)));
}

template <std::floating_point T>
void check_layout(const nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads, const nn::ModelParams<T>& velocity) {
  if (grads.arch_hash != params.arch_hash || velocity.arch_hash != params.arch_hash)
    throw DimensionError("optimizer: gradient/velocity layout does not match parameters");
  for (nn::Part p : nn::kParts)
    if (grads.layers(p).size() != params.layers(p).size() || velocity.layers(p).size() != params.layers(p).size())
      throw DimensionError("optimizer: layer count mismatch");
}

// v <- m v + scale (g + wd w);  w <- w - lr v
template <std::floating_point T>
void momentum_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& v, double lr, double momentum, double wd,
                     double scale = 1.0) {
  kernels::axpby<T>(static_cast<T>(scale), g.values(), static_cast<T>(momentum), v.values());
  if (wd != 0.0) kernels::axpy<T>(static_cast<T>(scale * wd), w.values(), v.values());
  kernels::axpy<T>(static_cast<T>(-lr), v.values(), w.values());
}

}  // namespace

template <std::floating_point T>
void require_finite_grads(const nn::ParamGrads<T>& grads) {
  for (nn::Part p : nn::kParts)
    for (std::size_t i = 0; i < grads.layers(p).size(); ++i) {
      const auto& l = grads.layers(p)[i];
      if (!all_finite(l.weight)) throw NumericError("non-finite gradient in " + tensor_name(p, i, false));
      if (!l.bias.empty() && !all_finite(l.bias)) throw NumericError("non-finite gradient in " + tensor_name(p, i, true));
    }
}

template <std::floating_point T>
double global_norm(const nn::ModelParams<T>& p) {
  double s = 0.0;
  p.for_each_tensor([&s](nn::Part, std::size_t, bool, const Tensor<T>& t) {
    s += static_cast<double>(kernels::dot<T>(t.values(), t.values()));
  });
  return std::sqrt(s);
}

double lars_trust_ratio(double weight_norm, double grad_norm, double weight_decay, double eps,
                        double trust_coefficient) {
  if (weight_norm <= 0.0 || grad_norm <= 0.0) return 1.0;
  return trust_coefficient * weight_norm / (grad_norm + weight_decay * weight_norm + eps);
}

template <std::floating_point T>
void sgd_momentum_step(nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads, nn::ModelParams<T>& velocity,
                       double lr, double momentum, double weight_decay) {
  check_layout(params, grads, velocity);
  require_finite_grads(grads);
  for (nn::Part p : nn::kParts)
    for (std::size_t i = 0; i < params.layers(p).size(); ++i) {
      auto& w = params.layers(p)[i];
      const auto& g = grads.layers(p)[i];
      auto& v = velocity.layers(p)[i];
      momentum_update(w.weight, g.weight, v.weight, lr, momentum, weight_decay);
      if (!w.bias.empty()) momentum_update(w.bias, g.bias, v.bias, lr, momentum, weight_decay);
    }
}

template <std::floating_point T>
void lars_step(nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads, nn::ModelParams<T>& velocity, double lr,
               double momentum, double weight_decay, double eps, double trust_coefficient) {
  check_layout(params, grads, velocity);
  require_finite_grads(grads);
  for (nn::Part p : nn::kParts)
    for (std::size_t i = 0; i < params.layers(p).size(); ++i) {
      auto& w = params.layers(p)[i];
      const auto& g = grads.layers(p)[i];
      auto& v = velocity.layers(p)[i];
      const double ratio = lars_trust_ratio(norm<T>(w.weight.values()), norm<T>(g.weight.values()), weight_decay,
                                            eps, trust_coefficient);
      momentum_update(w.weight, g.weight, v.weight, lr, momentum, weight_decay, ratio);
      if (!w.bias.empty()) momentum_update(w.bias, g.bias, v.bias, lr, momentum, 0.0);
    }
}

template <std::floating_point T>
void optimizer_step(const OptimizerSettings& s, nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads,
                    nn::ModelParams<T>& velocity, double lr) {
  if (s.kind == OptimizerKind::lars)
    lars_step(params, grads, velocity, lr, s.momentum, s.weight_decay, s.lars_eps, s.trust_coefficient);
  else
    sgd_momentum_step(params, grads, velocity, lr, s.momentum, s.weight_decay);
}

template <std::floating_point T>
void ema_update(const nn::ModelParams<T>& online, nn::ModelParams<T>& target, double tau) {
  if (online.arch_hash != target.arch_hash) throw DimensionError("ema_update: architecture mismatch");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("ema_update: tau must lie in [0, 1]");
  for (nn::Part p : {nn::Part::encoder, nn::Part::projector}) {
    if (target.layers(p).size() != online.layers(p).size()) throw DimensionError("ema_update: layer count mismatch");
    for (std::size_t i = 0; i < online.layers(p).size(); ++i) {
      const auto& src = online.layers(p)[i];
      auto& dst = target.layers(p)[i];
      kernels::axpby<T>(static_cast<T>(1.0 - tau), src.weight.values(), static_cast<T>(tau), dst.weight.values());
      if (!src.bias.empty())
        kernels::axpby<T>(static_cast<T>(1.0 - tau), src.bias.values(), static_cast<T>(tau), dst.bias.values());
    }
  }
}

#define FLOWE_OPT_INSTANTIATE(T)                                                                                \
  template void sgd_momentum_step(nn::ModelParams<T>&, const nn::ParamGrads<T>&, nn::ModelParams<T>&, double,  \
                                  double, double);                                                             \
  template void lars_step(nn::ModelParams<T>&, const nn::ParamGrads<T>&, nn::ModelParams<T>&, double, double,  \
                          double, double, double);                                                             \
  template void optimizer_step(const OptimizerSettings&, nn::ModelParams<T>&, const nn::ParamGrads<T>&,        \
                               nn::ModelParams<T>&, double);                                                   \
  template void ema_update(const nn::ModelParams<T>&, nn::ModelParams<T>&, double);                            \
  template void require_finite_grads(const nn::ParamGrads<T>&);                                                \
  template double global_norm(const nn::ModelParams<T>&);

FLOWE_OPT_INSTANTIATE(float)
FLOWE_OPT_INSTANTIATE(double)

#undef FLOWE_OPT_INSTANTIATE

}  // namespace flowe::train
