#pragma once

// Central finite differences against analytic parameter gradients.

#include <functional>
#include <string>
#include <vector>

#include "flowe/network.hpp"

namespace flowe::nn {

struct LayerGradError {
  std::string name;  // e.g. "encoder[2].weight"
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // entries whose perturbation crossed a ReLU kink
  /// Analytic and numeric gradients both below kVanishingGradient (e.g. a
  /// bias cancelled by a later normalization); the relative error is then
  /// meaningless and reported as 0.
  bool vanishing = false;
};

inline constexpr double kVanishingGradient = 1e-9;

struct GradCheckReport {
  std::vector<LayerGradError> layers;

  double worst() const;
  bool passed(double tolerance) const { return worst() < tolerance; }
};

/// Scalar objective plus the ReLU sign pattern it was evaluated at.
struct ProbeValue {
  double loss = 0.0;
  std::vector<std::uint8_t> relu_pattern;
};

using Objective = std::function<ProbeValue(const ModelParams<double>&)>;

/// Perturbs every parameter entry by +/- epsilon and compares
/// (L(w + eps) - L(w - eps)) / (2 eps) to `analytic`. Entries whose
/// perturbation flips any ReLU are skipped (subgradient points). The error of a
/// tensor is max |analytic - numeric| / max(max |analytic|, max |numeric|).
GradCheckReport compare_gradients(const ModelParams<double>& params, const ParamGrads<double>& analytic,
                                  const Objective& objective, double epsilon = 1e-5);

/// Probe-loss check of the bare network: L = sum(r * p) for a fixed random r.
GradCheckReport finite_diff_check(const ModelParams<double>& params, const Tensor<double>& input,
                                  double epsilon = 1e-5, std::uint64_t probe_seed = 7,
                                  const ForwardOptions& opts = {});

/// Largest relative error between two tensors under the same normwise rule.
double normwise_rel_error(std::span<const double> a, std::span<const double> b);

}  // namespace flowe::nn
