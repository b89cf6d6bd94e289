#include "flowe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace flowe::nn {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& l : layers) w = std::max(w, l.max_rel_error);
  return w;
}

double normwise_rel_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale > 0.0 ? diff / scale : diff;
}

GradCheckReport compare_gradients(const ModelParams<double>& params, const ParamGrads<double>& analytic,
                                  const Objective& objective, double epsilon) {
  GradCheckReport report;
  ModelParams<double> probe = params;
  const std::vector<std::uint8_t> base_pattern = objective(params).relu_pattern;

  for (Part part : kParts) {
    for (std::size_t li = 0; li < params.layers(part).size(); ++li) {
      for (int is_bias = 0; is_bias < 2; ++is_bias) {
        auto& layer = probe.layers(part)[li];
        Tensor<double>& t = is_bias ? layer.bias : layer.weight;
        if (t.empty()) continue;
        const auto& ref = analytic.layers(part)[li];
        const Tensor<double>& a = is_bias ? ref.bias : ref.weight;
        LayerGradError e;
        e.name = std::string(part_name(part)) + "[" + std::to_string(li) + "]." + (is_bias ? "bias" : "weight");
        std::vector<double> num, ana;
        for (std::size_t i = 0; i < t.numel(); ++i) {
          const double w0 = t.data()[i];
          t.data()[i] = w0 + epsilon;
          const ProbeValue up = objective(probe);
          t.data()[i] = w0 - epsilon;
          const ProbeValue down = objective(probe);
          t.data()[i] = w0;
          if (up.relu_pattern != base_pattern || down.relu_pattern != base_pattern) {
            ++e.skipped;
            continue;
          }
          num.push_back((up.loss - down.loss) / (2.0 * epsilon));
          ana.push_back(a.data()[i]);
          ++e.checked;
        }
        double peak = 0.0;
        for (std::size_t i = 0; i < ana.size(); ++i) peak = std::max({peak, std::abs(ana[i]), std::abs(num[i])});
        e.vanishing = !ana.empty() && peak < kVanishingGradient;
        e.max_rel_error = e.vanishing ? 0.0 : normwise_rel_error(ana, num);
        report.layers.push_back(std::move(e));
      }
    }
  }
  return report;
}

GradCheckReport finite_diff_check(const ModelParams<double>& params, const Tensor<double>& input, double epsilon,
                                  std::uint64_t probe_seed, const ForwardOptions& opts) {
  ForwardOptions traced = opts;
  traced.keep_trace = true;
  const ForwardResult<double> base = forward(params, input, traced);
  Tensor<double> probe(base.p.shape());
  Rng rng(probe_seed);
  for (double& v : probe.values()) v = normal(rng, 0.0, 1.0);

  const ParamGrads<double> analytic = backward(params, *base.trace, probe);
  const Objective objective = [&](const ModelParams<double>& p) {
    const ForwardResult<double> r = forward(p, input, traced);
    ProbeValue v;
    for (std::size_t i = 0; i < probe.numel(); ++i) v.loss += probe.data()[i] * r.p.data()[i];
    v.relu_pattern = r.trace->relu_pattern(p.arch);
    return v;
  };
  return compare_gradients(params, analytic, objective, epsilon);
}

}  // namespace flowe::nn
