#pragma once

// Fully-convolutional encoder f, 1x1 projector g and 1x1 predictor q with
// hand-written reverse mode. No dense layers and no global pooling (except the
// optional pooled mode used by the non-dense baseline).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowe/rng.hpp"
#include "flowe/tensor.hpp"

namespace flowe::nn {

enum class Activation { none, relu };

struct ConvLayerSpec {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 1;
  bool has_bias = true;
  Activation activation = Activation::relu;

  /// kernel in {1, 3}, stride in {1, 2}, padding = dilation * (kernel - 1) / 2.
  void validate() const;
  std::size_t out_extent(std::size_t in) const noexcept { return (in + stride - 1) / stride; }
  std::size_t fan_in() const noexcept { return in_ch * kernel * kernel; }

  static ConvLayerSpec conv3(std::size_t in, std::size_t out, std::size_t stride = 1, std::size_t dilation = 1,
                             Activation act = Activation::relu);
  static ConvLayerSpec conv1(std::size_t in, std::size_t out, Activation act = Activation::relu);

  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

/// Standardization applied to a layer's pre-activation before its ReLU.
/// per_location: across channels at each pixel. per_channel: across the
/// pixels of one example, per channel (instance statistics); skipped on 1x1
/// maps such as pooled heads, where it would zero the layer.
enum class Norm : std::uint8_t { none = 0, per_location = 1, per_channel = 2 };
const char* norm_name(Norm n) noexcept;
Norm parse_norm(const std::string& s);

enum class Part : std::size_t { encoder = 0, projector = 1, predictor = 2 };
inline constexpr std::array<Part, 3> kParts{Part::encoder, Part::projector, Part::predictor};
const char* part_name(Part p) noexcept;

struct ArchSpec {
  std::vector<ConvLayerSpec> encoder;
  std::vector<ConvLayerSpec> projector;
  std::vector<ConvLayerSpec> predictor;
  Norm encoder_norm = Norm::none;
  Norm head_norm = Norm::none;  // projector and predictor hidden layers

  /// Encoder 3->16->32->64 (three stride-2 3x3 convs) plus a dilated 64->64
  /// conv; projector 64->64->32 and predictor 32->32->32, both 1x1.
  static ArchSpec desk_default();

  const std::vector<ConvLayerSpec>& layers(Part p) const;
  /// Turns off biases that a following per-channel normalization would
  /// cancel (their gradient is identically zero).
  void drop_cancelled_biases();
  /// Also rejects a bias placed before per-channel normalization.
  void validate() const;
  std::size_t output_stride() const noexcept;
  /// FNV-1a digest of every layer spec, in order.
  std::uint64_t hash() const noexcept;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

template <std::floating_point T>
struct ConvLayer {
  ConvLayerSpec spec;
  Tensor<T> weight;  // out x in x k x k
  Tensor<T> bias;    // out, empty when !has_bias

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

template <std::floating_point T>
struct ModelParams {
  ArchSpec arch;
  std::uint64_t arch_hash = 0;
  std::array<std::vector<ConvLayer<T>>, 3> parts;

  std::vector<ConvLayer<T>>& layers(Part p) { return parts[static_cast<std::size_t>(p)]; }
  const std::vector<ConvLayer<T>>& layers(Part p) const { return parts[static_cast<std::size_t>(p)]; }
  bool has_predictor() const { return !layers(Part::predictor).empty() || arch.predictor.empty(); }

  std::size_t parameter_count() const;
  /// Same structure with every tensor zeroed.
  ModelParams zeros_like() const;
  /// Encoder and projector only; the shape of an EMA target.
  ModelParams target_copy() const;

  template <typename F>
  void for_each_tensor(F&& fn) {
    for (Part p : kParts)
      for (std::size_t i = 0; i < layers(p).size(); ++i) {
        fn(p, i, false, layers(p)[i].weight);
        if (!layers(p)[i].bias.empty()) fn(p, i, true, layers(p)[i].bias);
      }
  }
  template <typename F>
  void for_each_tensor(F&& fn) const {
    for (Part p : kParts)
      for (std::size_t i = 0; i < layers(p).size(); ++i) {
        fn(p, i, false, layers(p)[i].weight);
        if (!layers(p)[i].bias.empty()) fn(p, i, true, layers(p)[i].bias);
      }
  }

  template <std::floating_point U>
  ModelParams<U> cast() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Gradients share the parameter layout.
template <std::floating_point T>
using ParamGrads = ModelParams<T>;

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
template <std::floating_point T>
ModelParams<T> init_params(std::uint64_t seed, const ArchSpec& arch);

/// Zero-padded cross-correlation (no activation).
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvLayerSpec& spec, const Tensor<T>& weight, const Tensor<T>& bias);

template <std::floating_point T>
struct ConvGrads {
  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> input;  // empty unless requested
};

/// Adjoint of conv2d at input `x` for upstream gradient `grad_out`.
template <std::floating_point T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvLayerSpec& spec, const Tensor<T>& weight,
                             const Tensor<T>& grad_out, bool want_input_grad = true);

inline constexpr double kStandardizeEps = 1e-5;

template <std::floating_point T>
struct Standardized {
  Norm mode = Norm::per_location;
  Tensor<T> out;
  std::vector<T> inv_std;  // per pixel (per_location) or per channel (per_channel)
};

/// Zero mean, unit variance over the group `mode` selects:
/// (x - mean) / sqrt(var + eps).
template <std::floating_point T>
Standardized<T> standardize(const Tensor<T>& x, Norm mode, double eps = kStandardizeEps);
template <std::floating_point T>
Tensor<T> standardize_backward(const Standardized<T>& fwd, const Tensor<T>& grad_out);

template <std::floating_point T>
struct LayerTrace {
  Tensor<T> input;
  std::optional<Standardized<T>> standardized;
  Tensor<T> output;  // after activation
};

template <std::floating_point T>
struct ForwardTrace {
  std::array<std::vector<LayerTrace<T>>, 3> parts;
  bool pooled = false;
  std::size_t encoder_height = 0;
  std::size_t encoder_width = 0;

  std::size_t layer_count() const noexcept { return parts[0].size() + parts[1].size() + parts[2].size(); }
  /// One byte per ReLU unit: 1 where its pre-activation is positive.
  std::vector<std::uint8_t> relu_pattern(const ArchSpec& arch) const;
};

struct ForwardOptions {
  bool keep_trace = false;
  /// Replace the encoder output by its spatial mean (non-dense baseline).
  bool pooled = false;
};

template <std::floating_point T>
struct ForwardResult {
  Tensor<T> h;
  Tensor<T> z;
  Tensor<T> p;  // empty when the parameters carry no predictor
  std::optional<ForwardTrace<T>> trace;
};

/// h = f(v), z = g(h), p = q(z). Input height and width must be multiples of
/// the encoder's output stride.
template <std::floating_point T>
ForwardResult<T> forward(const ModelParams<T>& params, const Tensor<T>& input, const ForwardOptions& opts = {});

/// Encoder only.
template <std::floating_point T>
Tensor<T> encode(const ModelParams<T>& params, const Tensor<T>& input);

/// Reverse pass from dL/dp to every online parameter.
template <std::floating_point T>
ParamGrads<T> backward(const ModelParams<T>& params, const ForwardTrace<T>& trace, const Tensor<T>& grad_p);

}  // namespace flowe::nn
