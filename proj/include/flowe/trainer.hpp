#pragma once

// Flow-equivariant training: online branch v1 -> (h1, z1, p1), EMA target
// branch v2 -> (h2, z2) without gradients, both heads upsampled to the crop
// grid, z2 pulled back onto v1's grid through the view correspondence, and a
// masked squared distance between unit-normalized maps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowe/augment.hpp"
#include "flowe/checkpoint.hpp"
#include "flowe/data_source.hpp"
#include "flowe/network.hpp"
#include "flowe/optimizer.hpp"

namespace flowe::train {

struct Ablation {
  bool pixel_based = true;  // false: spatial mean after the encoder
  bool use_affine = true;   // false: no random scale/rotation, shared crop
  bool use_flow = true;     // false: zero flow
};

struct TrainConfig {
  std::uint64_t total_steps = 2000;
  std::size_t batch_size = 8;
  double base_lr = 0.15;
  double weight_decay = 1e-6;
  // Desk defaults (SGD, constant tau); LARS with tau 0.996 cosine stays
  // available but lands below random init at this scale, see README.
  double ema_tau = 0.99;
  bool ema_cosine = false;  // true: cosine increase of tau towards 1
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double trust_coefficient = 1.0;
  Ablation ablation;
  bool photometric = true;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 500;  // 0: final checkpoint only

  void validate() const;
  OptimizerSettings optimizer_settings() const;
};

struct StepReport {
  std::uint64_t step = 0;
  double loss = 0.0;
  double valid_pixel_fraction = 0.0;
  double lr = 0.0;
  double ema_tau_effective = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;

  std::string to_json_line() const;
};

template <std::floating_point T>
struct LossResult {
  double loss = 0.0;
  std::size_t count = 0;
  Tensor<T> grad;  // dL/dp1 before normalization
};

/// Mean over masked pixels of |n(p1) - n(p2)|^2, n = channel normalization.
/// Returns the gradient with respect to the un-normalized p1. An empty mask
/// yields loss 0, count 0 and a zero gradient.
template <std::floating_point T>
LossResult<T> flowe_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Mask& mask);

template <std::floating_point T>
struct TrainState {
  nn::ModelParams<T> online;
  nn::ModelParams<T> target;
  nn::ModelParams<T> velocity;
  std::uint64_t step = 0;

  static TrainState fresh(std::uint64_t seed, const nn::ArchSpec& arch);
  static TrainState from_checkpoint(nn::Checkpoint<T> ckpt);
  nn::Checkpoint<T> checkpoint() const;
};

/// Target branch output pulled back onto the first view's grid.
template <std::floating_point T>
struct TargetMap {
  Tensor<T> features;
  Mask mask;
};

template <std::floating_point T>
TargetMap<T> target_map(const nn::ModelParams<T>& target, const Tensor<T>& v2, const geom::DenseCorrespondence& corr,
                        bool pooled);

template <std::floating_point T>
struct OnlineObjective {
  double loss = 0.0;
  std::size_t valid = 0;
  std::optional<nn::ParamGrads<T>> grads;
  std::vector<std::uint8_t> relu_pattern;
};

/// Loss of the online branch against a fixed target map (and its gradient
/// with respect to every online parameter when `want_grads`).
template <std::floating_point T>
OnlineObjective<T> online_objective(const nn::ModelParams<T>& online, const Tensor<T>& v1, const TargetMap<T>& target,
                                    bool pooled, bool want_grads);

/// One optimization step over `batch`. The step counter always advances; a
/// batch without a single valid pixel leaves every parameter untouched.
template <std::floating_point T>
StepReport train_step(TrainState<T>& state, const TrainConfig& cfg, const aug::AugmentConfig& aug_cfg,
                      std::span<const FrameTriple> batch);

/// Batch for a step: draw keys derive from (seed, step, index).
std::vector<FrameTriple> draw_batch(const DataSource& source, const TrainConfig& cfg, std::uint64_t step);

struct LoopOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.jsonl + checkpoints
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepReport&)> on_step;
};

template <std::floating_point T>
struct LoopResult {
  TrainState<T> state;
  std::vector<StepReport> reports;  // steps executed by this call
};

template <std::floating_point T>
LoopResult<T> train_loop(const TrainConfig& cfg, const aug::AugmentConfig& aug_cfg, const nn::ArchSpec& arch,
                         const DataSource& source, const LoopOptions& opts = {});

std::string checkpoint_name(std::uint64_t step);

}  // namespace flowe::train
