#pragma once

#include "flowe/network.hpp"

namespace flowe::train {

enum class OptimizerKind { sgd_momentum, lars };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::lars;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double lars_eps = 1e-9;
  /// Multiplies the LARS trust ratio.
  double trust_coefficient = 1.0;
};

/// Cosine decay without restart: base * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr);
/// 1 - (1 - tau0) * (cos(pi * step / total) + 1) / 2, rising from tau0 to 1.
double ema_tau_schedule(std::uint64_t step, std::uint64_t total_steps, double tau0);

/// v <- m v + g + wd w;  w <- w - lr v   (every tensor, biases included).
template <std::floating_point T>
void sgd_momentum_step(nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads, nn::ModelParams<T>& velocity,
                       double lr, double momentum, double weight_decay);

/// v <- m v + eta (g + wd w);  w <- w - lr v, with the per-tensor trust ratio
/// eta = trust * ||w|| / (||g|| + wd ||w|| + eps) scaling the step before it
/// enters the momentum buffer. Biases get neither the trust
/// ratio nor weight decay. The ratio falls back to 1 when ||w|| or ||g|| is 0.
template <std::floating_point T>
void lars_step(nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads, nn::ModelParams<T>& velocity, double lr,
               double momentum, double weight_decay, double eps = 1e-9, double trust_coefficient = 1.0);

template <std::floating_point T>
void optimizer_step(const OptimizerSettings& s, nn::ModelParams<T>& params, const nn::ParamGrads<T>& grads,
                    nn::ModelParams<T>& velocity, double lr);

/// Trust ratio applied by lars_step to one weight tensor.
double lars_trust_ratio(double weight_norm, double grad_norm, double weight_decay, double eps,
                        double trust_coefficient);

/// target <- tau * target + (1 - tau) * online, encoder and projector only.
template <std::floating_point T>
void ema_update(const nn::ModelParams<T>& online, nn::ModelParams<T>& target, double tau);

/// Throws NumericError naming the first tensor holding a non-finite entry.
template <std::floating_point T>
void require_finite_grads(const nn::ParamGrads<T>& grads);

template <std::floating_point T>
double global_norm(const nn::ModelParams<T>& p);

}  // namespace flowe::train
