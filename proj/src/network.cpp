#include "flowe/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "flowe/kernels.hpp"

namespace flowe::nn {

const char* part_name(Part p) noexcept {
  switch (p) {
    case Part::encoder: return "encoder";
    case Part::projector: return "projector";
    case Part::predictor: return "predictor";
  }
  return "?";
}

void ConvLayerSpec::validate() const {
  if (in_ch == 0 || out_ch == 0) throw ConfigError("conv layer needs positive channel counts");
  if (kernel != 1 && kernel != 3) throw ConfigError("conv kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw ConfigError("conv stride must be 1 or 2");
  if (dilation == 0) throw ConfigError("conv dilation must be positive");
  if (padding != dilation * (kernel - 1) / 2) throw ConfigError("conv padding must equal dilation*(kernel-1)/2");
}

ConvLayerSpec ConvLayerSpec::conv3(std::size_t in, std::size_t out, std::size_t stride, std::size_t dilation,
                                   Activation act) {
  return {in, out, 3, stride, dilation, dilation, true, act};
}

ConvLayerSpec ConvLayerSpec::conv1(std::size_t in, std::size_t out, Activation act) {
  return {in, out, 1, 1, 1, 0, true, act};
}

const char* norm_name(Norm n) noexcept {
  switch (n) {
    case Norm::per_location: return "per_location";
    case Norm::per_channel: return "per_channel";
    default: return "none";
  }
}

Norm parse_norm(const std::string& s) {
  if (s == "none") return Norm::none;
  if (s == "per_location") return Norm::per_location;
  if (s == "per_channel") return Norm::per_channel;
  throw ConfigError("unknown normalization \"" + s + "\" (none | per_location | per_channel)");
}

ArchSpec ArchSpec::desk_default() {
  ArchSpec a;
  a.encoder = {ConvLayerSpec::conv3(3, 16, 2), ConvLayerSpec::conv3(16, 32, 2), ConvLayerSpec::conv3(32, 64, 2),
               ConvLayerSpec::conv3(64, 64, 1, 2)};
  a.projector = {ConvLayerSpec::conv1(64, 64), ConvLayerSpec::conv1(64, 32, Activation::none)};
  a.predictor = {ConvLayerSpec::conv1(32, 32), ConvLayerSpec::conv1(32, 32, Activation::none)};
  return a;
}

const std::vector<ConvLayerSpec>& ArchSpec::layers(Part p) const {
  switch (p) {
    case Part::encoder: return encoder;
    case Part::projector: return projector;
    default: return predictor;
  }
}

void ArchSpec::drop_cancelled_biases() {
  for (Part p : kParts) {
    const Norm norm = p == Part::encoder ? encoder_norm : head_norm;
    if (norm != Norm::per_channel) continue;
    for (auto& s : p == Part::encoder ? encoder : p == Part::projector ? projector : predictor)
      if (s.activation == Activation::relu) s.has_bias = false;
  }
}

void ArchSpec::validate() const {
  if (encoder.empty()) throw ConfigError("architecture needs at least one encoder layer");
  std::size_t ch = encoder.front().in_ch;
  for (Part p : kParts)
    for (const ConvLayerSpec& s : layers(p)) {
      s.validate();
      if (s.in_ch != ch)
        throw ConfigError(std::string("channel mismatch in ") + part_name(p) + ": expected " + std::to_string(ch) +
                          " inputs, layer has " + std::to_string(s.in_ch));
      const Norm norm = p == Part::encoder ? encoder_norm : head_norm;
      if (norm == Norm::per_channel && s.activation == Activation::relu && s.has_bias)
        throw ConfigError(std::string("bias in ") + part_name(p) + " is cancelled by per-channel normalization");
      if (p != Part::encoder && (s.kernel != 1 || s.stride != 1))
        throw ConfigError("projector and predictor layers must be 1x1 stride 1");
      ch = s.out_ch;
    }
}

std::size_t ArchSpec::output_stride() const noexcept {
  std::size_t s = 1;
  for (const auto& l : encoder) s *= l.stride;
  return s;
}

std::uint64_t ArchSpec::hash() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  for (Part p : kParts) {
    feed(0xa5a5000000000000ULL + static_cast<std::uint64_t>(p));
    for (const auto& s : layers(p)) {
      feed(s.in_ch);
      feed(s.out_ch);
      feed(s.kernel);
      feed(s.stride);
      feed(s.dilation);
      feed(s.padding);
      feed(s.has_bias);
      feed(static_cast<std::uint64_t>(s.activation));
    }
  }
  feed(static_cast<std::uint64_t>(encoder_norm));
  feed(static_cast<std::uint64_t>(head_norm));
  return h;
}

template <std::floating_point T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&n](Part, std::size_t, bool, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <std::floating_point T>
ModelParams<T> ModelParams<T>::zeros_like() const {
  ModelParams out = *this;
  out.for_each_tensor([](Part, std::size_t, bool, Tensor<T>& t) { t.fill(T{0}); });
  return out;
}

template <std::floating_point T>
ModelParams<T> ModelParams<T>::target_copy() const {
  ModelParams out = *this;
  out.layers(Part::predictor).clear();
  return out;
}

template <std::floating_point T>
template <std::floating_point U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.arch = arch;
  out.arch_hash = arch_hash;
  for (Part p : kParts)
    for (const auto& l : layers(p)) out.layers(p).push_back({l.spec, l.weight.template cast<U>(), l.bias.template cast<U>()});
  return out;
}

template <std::floating_point T>
ModelParams<T> init_params(std::uint64_t seed, const ArchSpec& arch) {
  arch.validate();
  ModelParams<T> params;
  params.arch = arch;
  params.arch_hash = arch.hash();
  Rng rng(seed);
  for (Part p : kParts)
    for (const ConvLayerSpec& s : arch.layers(p)) {
      ConvLayer<T> layer{s, Tensor<T>(Shape{s.out_ch, s.in_ch, s.kernel, s.kernel}), {}};
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(s.fan_in())));
      for (T& w : layer.weight.values()) w = static_cast<T>(dist(rng));
      if (s.has_bias) layer.bias = Tensor<T>(Shape{s.out_ch});
      params.layers(p).push_back(std::move(layer));
    }
  return params;
}

namespace {

template <std::floating_point T>
void check_conv_operands(const Tensor<T>& x, const ConvLayerSpec& spec, const Tensor<T>& weight) {
  require_feature_map(x, "conv2d input");
  if (x.channels() != spec.in_ch)
    throw DimensionError("conv2d: input has " + std::to_string(x.channels()) + " channels, layer expects " +
                         std::to_string(spec.in_ch));
  if (weight.shape() != Shape{spec.out_ch, spec.in_ch, spec.kernel, spec.kernel})
    throw DimensionError("conv2d: weight shape " + weight.shape().str() + " does not match layer spec");
}

bool is_pointwise(const ConvLayerSpec& s) { return s.kernel == 1 && s.stride == 1; }

// Unfolds x into a (in_ch * k * k) x (out_h * out_w) matrix.
template <std::floating_point T>
std::vector<T> im2col(const Tensor<T>& x, const ConvLayerSpec& s, std::size_t out_h, std::size_t out_w) {
  const std::size_t k = s.kernel, h = x.height(), w = x.width(), p = out_h * out_w;
  std::vector<T> col(s.in_ch * k * k * p, T{0});
  for (std::size_t c = 0; c < s.in_ch; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((c * k + ky) * k + kx) * p;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * s.stride + ky * s.dilation) - static_cast<std::ptrdiff_t>(s.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * s.stride + kx * s.dilation) - static_cast<std::ptrdiff_t>(s.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * out_w + ox] = x.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
          }
        }
      }
  return col;
}

template <std::floating_point T>
void col2im(const std::vector<T>& col, const ConvLayerSpec& s, std::size_t out_h, std::size_t out_w, Tensor<T>& dx) {
  const std::size_t k = s.kernel, h = dx.height(), w = dx.width(), p = out_h * out_w;
  for (std::size_t c = 0; c < s.in_ch; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((c * k + ky) * k + kx) * p;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * s.stride + ky * s.dilation) - static_cast<std::ptrdiff_t>(s.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * s.stride + kx * s.dilation) - static_cast<std::ptrdiff_t>(s.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dx.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += row[oy * out_w + ox];
          }
        }
      }
}

template <std::floating_point T>
std::vector<T> transpose(std::span<const T> m, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = m[r * cols + c];
  return t;
}

}  // namespace

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvLayerSpec& spec, const Tensor<T>& weight, const Tensor<T>& bias) {
  spec.validate();
  check_conv_operands(x, spec, weight);
  const std::size_t out_h = spec.out_extent(x.height()), out_w = spec.out_extent(x.width());
  const std::size_t p = out_h * out_w, k = spec.fan_in();
  Tensor<T> out = feature_map<T>(spec.out_ch, out_h, out_w);
  if (spec.has_bias) {
    if (bias.numel() != spec.out_ch) throw DimensionError("conv2d: bias length mismatch");
    for (std::size_t o = 0; o < spec.out_ch; ++o) std::fill_n(out.data() + o * p, p, bias.data()[o]);
  }
  if (is_pointwise(spec)) {
    kernels::gemm<T>(spec.out_ch, p, k, weight.values(), x.values(), out.values());
  } else {
    const std::vector<T> col = im2col(x, spec, out_h, out_w);
    kernels::gemm<T>(spec.out_ch, p, k, weight.values(), col, out.values());
  }
  return out;
}

template <std::floating_point T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvLayerSpec& spec, const Tensor<T>& weight,
                             const Tensor<T>& grad_out, bool want_input_grad) {
  check_conv_operands(x, spec, weight);
  const std::size_t out_h = spec.out_extent(x.height()), out_w = spec.out_extent(x.width());
  if (grad_out.shape() != Shape{spec.out_ch, out_h, out_w})
    throw DimensionError("conv2d_backward: upstream gradient " + grad_out.shape().str() + " does not match output");
  const std::size_t p = out_h * out_w, k = spec.fan_in();

  ConvGrads<T> g;
  g.weight = Tensor<T>(weight.shape());
  if (spec.has_bias) {
    g.bias = Tensor<T>(Shape{spec.out_ch});
    for (std::size_t o = 0; o < spec.out_ch; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < p; ++i) s += grad_out.data()[o * p + i];
      g.bias.data()[o] = static_cast<T>(s);
    }
  }

  std::vector<T> col;
  std::span<const T> col_view;
  if (is_pointwise(spec)) {
    col_view = x.values();
  } else {
    col = im2col(x, spec, out_h, out_w);
    col_view = col;
  }
  // dW = G * col^T
  const std::vector<T> col_t = transpose<T>(col_view, k, p);
  kernels::gemm<T>(spec.out_ch, k, p, grad_out.values(), col_t, g.weight.values());

  if (want_input_grad) {
    // dcol = W^T * G
    const std::vector<T> w_t = transpose<T>(weight.values(), spec.out_ch, k);
    std::vector<T> dcol(k * p, T{0});
    kernels::gemm<T>(k, p, spec.out_ch, w_t, grad_out.values(), dcol);
    g.input = Tensor<T>(x.shape());
    if (is_pointwise(spec)) {
      std::copy(dcol.begin(), dcol.end(), g.input.data());
    } else {
      col2im(dcol, spec, out_h, out_w, g.input);
    }
  }
  return g;
}

namespace {

// Visits standardization groups: per_location groups are pixels with stride
// plane_size over channels; per_channel groups are contiguous planes.
struct GroupLayout {
  std::size_t groups, members, group_step, member_step;
};

GroupLayout group_layout(Norm mode, std::size_t channels, std::size_t plane) {
  if (mode == Norm::per_channel) return {channels, plane, plane, 1};
  return {plane, channels, 1, plane};
}

}  // namespace

template <std::floating_point T>
Standardized<T> standardize(const Tensor<T>& x, Norm mode, double eps) {
  require_feature_map(x, "standardize");
  if (mode == Norm::none) throw ConfigError("standardize: no normalization mode given");
  const GroupLayout g = group_layout(mode, x.channels(), x.plane_size());
  Standardized<T> r{mode, Tensor<T>(x.shape()), std::vector<T>(g.groups)};
  const T* src = x.data();
  T* dst = r.out.data();
  for (std::size_t i = 0; i < g.groups; ++i) {
    const std::size_t base = i * g.group_step;
    double mean = 0.0;
    for (std::size_t k = 0; k < g.members; ++k) mean += src[base + k * g.member_step];
    mean /= static_cast<double>(g.members);
    double var = 0.0;
    for (std::size_t k = 0; k < g.members; ++k) {
      const double d = src[base + k * g.member_step] - mean;
      var += d * d;
    }
    var /= static_cast<double>(g.members);
    const double inv = 1.0 / std::sqrt(var + eps);
    r.inv_std[i] = static_cast<T>(inv);
    for (std::size_t k = 0; k < g.members; ++k)
      dst[base + k * g.member_step] = static_cast<T>((src[base + k * g.member_step] - mean) * inv);
  }
  return r;
}

template <std::floating_point T>
Tensor<T> standardize_backward(const Standardized<T>& fwd, const Tensor<T>& grad_out) {
  if (fwd.out.shape() != grad_out.shape()) throw DimensionError("standardize_backward: shape mismatch");
  const GroupLayout g = group_layout(fwd.mode, grad_out.channels(), grad_out.plane_size());
  Tensor<T> dx(grad_out.shape());
  const T* go = grad_out.data();
  const T* y = fwd.out.data();
  for (std::size_t i = 0; i < g.groups; ++i) {
    const std::size_t base = i * g.group_step;
    double mean_g = 0.0, mean_gy = 0.0;
    for (std::size_t k = 0; k < g.members; ++k) {
      const std::size_t j = base + k * g.member_step;
      mean_g += go[j];
      mean_gy += static_cast<double>(go[j]) * y[j];
    }
    mean_g /= static_cast<double>(g.members);
    mean_gy /= static_cast<double>(g.members);
    for (std::size_t k = 0; k < g.members; ++k) {
      const std::size_t j = base + k * g.member_step;
      dx.data()[j] = static_cast<T>(fwd.inv_std[i] * (go[j] - mean_g - y[j] * mean_gy));
    }
  }
  return dx;
}

template <std::floating_point T>
std::vector<std::uint8_t> ForwardTrace<T>::relu_pattern(const ArchSpec& arch) const {
  std::vector<std::uint8_t> pattern;
  for (Part p : kParts) {
    const auto& specs = arch.layers(p);
    const auto& traces = parts[static_cast<std::size_t>(p)];
    for (std::size_t i = 0; i < traces.size() && i < specs.size(); ++i) {
      if (specs[i].activation != Activation::relu) continue;
      for (T v : traces[i].output.values()) pattern.push_back(v > T{0} ? 1 : 0);
    }
  }
  return pattern;
}

namespace {

template <std::floating_point T>
Tensor<T> apply_layer(const ConvLayer<T>& layer, Norm norm, Tensor<T> x, LayerTrace<T>* trace) {
  Tensor<T> y = conv2d(x, layer.spec, layer.weight, layer.bias);
  const bool relu = layer.spec.activation == Activation::relu;
  if (relu && norm != Norm::none) {
    Standardized<T> st = standardize(y, norm);
    y = st.out;
    if (trace) trace->standardized = std::move(st);
  }
  if (relu)
    for (T& v : y.values()) v = std::max(v, T{0});
  if (trace) {
    trace->input = std::move(x);
    trace->output = y;
  }
  return y;
}

template <std::floating_point T>
Tensor<T> layer_backward(const ConvLayer<T>& layer, const LayerTrace<T>& trace, Tensor<T> grad, ConvLayer<T>& out,
                         bool want_input_grad) {
  if (layer.spec.activation == Activation::relu) {
    const T* y = trace.output.data();
    T* g = grad.data();
    for (std::size_t i = 0; i < grad.numel(); ++i)
      if (!(y[i] > T{0})) g[i] = T{0};
    if (trace.standardized) grad = standardize_backward(*trace.standardized, grad);
  }
  ConvGrads<T> cg = conv2d_backward(trace.input, layer.spec, layer.weight, grad, want_input_grad);
  out.weight = std::move(cg.weight);
  if (layer.spec.has_bias) out.bias = std::move(cg.bias);
  return std::move(cg.input);
}

template <std::floating_point T>
Tensor<T> spatial_mean(const Tensor<T>& h) {
  Tensor<T> out = feature_map<T>(h.channels(), 1, 1);
  for (std::size_t c = 0; c < h.channels(); ++c) {
    double s = 0.0;
    for (T v : h.plane(c)) s += v;
    out.data()[c] = static_cast<T>(s / static_cast<double>(h.plane_size()));
  }
  return out;
}

}  // namespace

template <std::floating_point T>
ForwardResult<T> forward(const ModelParams<T>& params, const Tensor<T>& input, const ForwardOptions& opts) {
  require_feature_map(input, "forward");
  const std::size_t stride = params.arch.output_stride();
  if (input.height() % stride != 0 || input.width() % stride != 0)
    throw DimensionError("forward: input " + input.shape().str() + " not divisible by output stride " +
                         std::to_string(stride));
  ForwardResult<T> r;
  if (opts.keep_trace) {
    r.trace.emplace();
    r.trace->pooled = opts.pooled;
  }
  auto run_part = [&](Part part, Tensor<T> x) {
    const auto& layers = params.layers(part);
    std::vector<LayerTrace<T>>* traces = r.trace ? &r.trace->parts[static_cast<std::size_t>(part)] : nullptr;
    if (traces) traces->resize(layers.size());
    Norm norm = part == Part::encoder ? params.arch.encoder_norm : params.arch.head_norm;
    // Instance statistics of a single location would zero the layer (pooled heads).
    if (norm == Norm::per_channel && x.plane_size() == 1) norm = Norm::none;
    for (std::size_t i = 0; i < layers.size(); ++i)
      x = apply_layer(layers[i], norm, std::move(x), traces ? &(*traces)[i] : nullptr);
    return x;
  };

  Tensor<T> h = run_part(Part::encoder, input);
  if (r.trace) {
    r.trace->encoder_height = h.height();
    r.trace->encoder_width = h.width();
  }
  if (opts.pooled) h = spatial_mean(h);
  r.z = run_part(Part::projector, h);
  r.h = std::move(h);
  if (params.has_predictor()) r.p = run_part(Part::predictor, r.z);
  return r;
}

template <std::floating_point T>
Tensor<T> encode(const ModelParams<T>& params, const Tensor<T>& input) {
  require_feature_map(input, "encode");
  const std::size_t stride = params.arch.output_stride();
  if (input.height() % stride != 0 || input.width() % stride != 0)
    throw DimensionError("encode: input " + input.shape().str() + " not divisible by output stride " +
                         std::to_string(stride));
  Tensor<T> x = input;
  for (const auto& layer : params.layers(Part::encoder))
    x = apply_layer(layer, params.arch.encoder_norm, std::move(x), static_cast<LayerTrace<T>*>(nullptr));
  return x;
}

template <std::floating_point T>
ParamGrads<T> backward(const ModelParams<T>& params, const ForwardTrace<T>& trace, const Tensor<T>& grad_p) {
  if (!params.has_predictor()) throw DimensionError("backward: parameters carry no predictor");
  for (Part p : kParts)
    if (trace.parts[static_cast<std::size_t>(p)].size() != params.layers(p).size())
      throw DimensionError("backward: trace does not match parameters (was the trace kept?)");
  ParamGrads<T> grads = params.zeros_like();
  Tensor<T> g = grad_p;
  for (Part part : {Part::predictor, Part::projector, Part::encoder}) {
    const auto& layers = params.layers(part);
    const auto& traces = trace.parts[static_cast<std::size_t>(part)];
    if (part == Part::encoder && trace.pooled) {
      // Adjoint of the spatial mean: spread evenly over the encoder grid.
      const std::size_t eh = trace.encoder_height, ew = trace.encoder_width;
      Tensor<T> spread = feature_map<T>(g.channels(), eh, ew);
      const T scale = static_cast<T>(1.0 / static_cast<double>(eh * ew));
      for (std::size_t c = 0; c < g.channels(); ++c) std::fill_n(spread.data() + c * eh * ew, eh * ew, g.data()[c] * scale);
      g = std::move(spread);
    }
    for (std::size_t i = layers.size(); i-- > 0;) {
      const bool need_input = !(part == Part::encoder && i == 0);
      g = layer_backward(layers[i], traces[i], std::move(g), grads.layers(part)[i], need_input);
    }
  }
  return grads;
}

#define FLOWE_NN_INSTANTIATE(T)                                                                                  \
  template struct ModelParams<T>;                                                                                \
  template struct ForwardTrace<T>;                                                                               \
  template ModelParams<T> init_params<T>(std::uint64_t, const ArchSpec&);                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvLayerSpec&, const Tensor<T>&, const Tensor<T>&);         \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const ConvLayerSpec&, const Tensor<T>&,                \
                                        const Tensor<T>&, bool);                                                 \
  template Standardized<T> standardize(const Tensor<T>&, Norm, double);                                          \
  template Tensor<T> standardize_backward(const Standardized<T>&, const Tensor<T>&);                             \
  template ForwardResult<T> forward(const ModelParams<T>&, const Tensor<T>&, const ForwardOptions&);             \
  template Tensor<T> encode(const ModelParams<T>&, const Tensor<T>&);                                            \
  template ParamGrads<T> backward(const ModelParams<T>&, const ForwardTrace<T>&, const Tensor<T>&);

FLOWE_NN_INSTANTIATE(float)
FLOWE_NN_INSTANTIATE(double)

template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;

#undef FLOWE_NN_INSTANTIATE

}  // namespace flowe::nn
