#include <doctest.h>

#include <cmath>
#include <random>

#include "flowe/checkpoint.hpp"
#include "flowe/gradcheck.hpp"
#include "flowe/network.hpp"

using namespace flowe;
using namespace flowe::nn;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Tensor<double> t(std::move(s));
  for (double& v : t.values()) v = scale * n01(rng);
  return t;
}

// Direct zero-padded cross-correlation, used as the oracle for conv2d.
Tensor<double> naive_conv(const Tensor<double>& x, const ConvLayerSpec& s, const Tensor<double>& w,
                          const Tensor<double>& b) {
  const std::size_t ho = s.out_extent(x.height()), wo = s.out_extent(x.width());
  Tensor<double> out(Shape{s.out_ch, ho, wo});
  for (std::size_t o = 0; o < s.out_ch; ++o)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = b.empty() ? 0.0 : b.values()[o];
        for (std::size_t i = 0; i < s.in_ch; ++i)
          for (std::size_t ky = 0; ky < s.kernel; ++ky)
            for (std::size_t kx = 0; kx < s.kernel; ++kx) {
              const long iy = static_cast<long>(oy * s.stride + ky * s.dilation) - static_cast<long>(s.padding);
              const long ix = static_cast<long>(ox * s.stride + kx * s.dilation) - static_cast<long>(s.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(x.height()) || ix >= static_cast<long>(x.width())) continue;
              acc += w.values()[((o * s.in_ch + i) * s.kernel + ky) * s.kernel + kx] * x.at(i, iy, ix);
            }
        out.at(o, oy, ox) = acc;
      }
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d examples") {
  auto one = ConvLayerSpec::conv1(1, 1, Activation::none);
  Tensor<double> w1(Shape{1, 1, 1, 1}, 1.0), b1(Shape{1}, 0.0);
  auto x = randn(Shape{1, 4, 5}, 1);
  CHECK(conv2d(x, one, w1, b1) == x);

  auto three = ConvLayerSpec::conv3(1, 1, 1, 1, Activation::none);
  Tensor<double> ones(Shape{1, 1, 3, 3}, 1.0), nob(Shape{1}, 0.0);
  Tensor<double> c1(Shape{1, 5, 6}, 1.0);
  auto y = conv2d(c1, three, ones, nob);
  CHECK(y.at(0, 2, 3) == 9.0);
  CHECK(y.at(0, 0, 0) == 4.0);
  CHECK(y.at(0, 0, 2) == 6.0);
  CHECK(y.at(0, 4, 5) == 4.0);

  // 2x2 input [[1,2],[3,4]], kernel 1..9 row-major, padding 1: each output
  // takes the 2x2 block of the kernel that overlaps the input.
  Tensor<double> in(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> k(Shape{1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto out = conv2d(in, three, k, nob);
  CHECK(out.at(0, 0, 0) == 1 * 5 + 2 * 6 + 3 * 8 + 4 * 9);
  CHECK(out.at(0, 0, 1) == 1 * 4 + 2 * 5 + 3 * 7 + 4 * 8);
  CHECK(out.at(0, 1, 0) == 1 * 2 + 2 * 3 + 3 * 5 + 4 * 6);
  CHECK(out.at(0, 1, 1) == 1 * 1 + 2 * 2 + 3 * 4 + 4 * 5);

  Tensor<double> wrong(Shape{1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(in, three, wrong, nob), DimensionError);
}

TEST_CASE("conv2d matches direct evaluation for every layer shape") {
  const ConvLayerSpec specs[] = {ConvLayerSpec::conv3(3, 4, 1), ConvLayerSpec::conv3(3, 5, 2),
                                 ConvLayerSpec::conv3(2, 3, 1, 2), ConvLayerSpec::conv3(2, 2, 2, 2),
                                 ConvLayerSpec::conv1(4, 6)};
  std::uint64_t seed = 10;
  for (const auto& s : specs) {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{7, 9}, {8, 8}, {1, 3}}) {
      auto x = randn(Shape{s.in_ch, h, w}, seed++);
      auto wt = randn(Shape{s.out_ch, s.in_ch, s.kernel, s.kernel}, seed++);
      auto b = randn(Shape{s.out_ch}, seed++);
      CHECK(max_abs_diff(conv2d(x, s, wt, b), naive_conv(x, s, wt, b)) < 1e-12);
    }
  }
}

TEST_CASE("conv2d_backward") {
  const ConvLayerSpec specs[] = {ConvLayerSpec::conv3(2, 3, 1), ConvLayerSpec::conv3(2, 3, 2),
                                 ConvLayerSpec::conv3(2, 2, 1, 2), ConvLayerSpec::conv1(3, 2)};
  std::uint64_t seed = 100;
  for (const auto& s : specs) {
    auto x = randn(Shape{s.in_ch, 6, 7}, seed++);
    auto w = randn(Shape{s.out_ch, s.in_ch, s.kernel, s.kernel}, seed++);
    auto b = randn(Shape{s.out_ch}, seed++);
    auto y = conv2d(x, s, w, b);
    auto r = randn(y.shape(), seed++);

    auto zero = conv2d_backward(x, s, w, Tensor<double>(y.shape()));
    for (double v : zero.weight.values()) CHECK(v == 0.0);
    for (double v : zero.input.values()) CHECK(v == 0.0);

    auto g = conv2d_backward(x, s, w, r);
    auto loss = [&](const Tensor<double>& xx, const Tensor<double>& ww, const Tensor<double>& bb) {
      auto o = conv2d(xx, s, ww, bb);
      double acc = 0.0;
      for (std::size_t i = 0; i < o.numel(); ++i) acc += o.values()[i] * r.values()[i];
      return acc;
    };
    const double eps = 1e-6;
    auto fd = [&](Tensor<double> t, int which) {
      Tensor<double> num(t.shape());
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double keep = t.values()[i];
        t.values()[i] = keep + eps;
        const double up = which == 0 ? loss(t, w, b) : which == 1 ? loss(x, t, b) : loss(x, w, t);
        t.values()[i] = keep - eps;
        const double dn = which == 0 ? loss(t, w, b) : which == 1 ? loss(x, t, b) : loss(x, w, t);
        t.values()[i] = keep;
        num.values()[i] = (up - dn) / (2 * eps);
      }
      return num;
    };
    CHECK(normwise_rel_error(g.input.values(), fd(x, 0).values()) < 1e-6);
    CHECK(normwise_rel_error(g.weight.values(), fd(w, 1).values()) < 1e-6);
    CHECK(normwise_rel_error(g.bias.values(), fd(b, 2).values()) < 1e-6);
  }

  auto id = ConvLayerSpec::conv1(2, 2, Activation::none);
  Tensor<double> eye(Shape{2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
  auto up = randn(Shape{2, 3, 4}, 7);
  CHECK(conv2d_backward(randn(Shape{2, 3, 4}, 8), id, eye, up).input == up);
}

TEST_CASE("forward shapes and structure") {
  const auto arch = ArchSpec::desk_default();
  CHECK(arch.output_stride() == 8);
  auto params = init_params<double>(3, arch);
  auto x = randn(Shape{3, 32, 64}, 4);
  auto r = forward(params, x);
  CHECK(r.h.shape() == Shape{64, 4, 8});
  CHECK(r.z.shape() == Shape{32, 4, 8});
  CHECK(r.p.shape() == Shape{32, 4, 8});

  auto wide = forward(params, randn(Shape{3, 32, 128}, 5));
  CHECK(wide.h.shape() == Shape{64, 4, 16});

  auto zero = forward(params, Tensor<double>(Shape{3, 16, 16}));
  for (double v : zero.p.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(forward(params, randn(Shape{3, 20, 16}, 6)), DimensionError);
  CHECK_THROWS_AS(forward(params, randn(Shape{1, 16, 16}, 6)), DimensionError);

  // Projector and predictor sizes do not depend on the input size.
  std::size_t head = 0;
  for (Part p : {Part::projector, Part::predictor})
    for (const auto& l : params.layers(p)) head += l.weight.numel() + l.bias.numel();
  CHECK(head == 64 * 64 + 64 + 64 * 32 + 32 + 32 * 32 + 32 + 32 * 32 + 32);
}

TEST_CASE("encoder is translation equivariant at stride 8") {
  auto params = init_params<double>(9, ArchSpec::desk_default());
  auto big = randn(Shape{3, 48, 80}, 10);
  Tensor<double> shifted(Shape{3, 48, 72});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 48; ++y)
      for (std::size_t x = 0; x < 72; ++x) shifted.at(c, y, x) = big.at(c, y, x + 8);
  auto a = encode(params, big), b = encode(params, shifted);
  // Border effects reach at most (receptive radius / 8) cells; compare deep interior.
  for (std::size_t c = 0; c < a.channels(); ++c)
    for (std::size_t y = 2; y + 2 < b.height(); ++y)
      for (std::size_t x = 3; x + 3 < b.width(); ++x) CHECK(b.at(c, y, x) == a.at(c, y, x + 1));
}

TEST_CASE("init_params") {
  const auto arch = ArchSpec::desk_default();
  auto a = init_params<double>(1, arch), b = init_params<double>(1, arch), c = init_params<double>(2, arch);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.arch_hash == arch.hash());
  a.for_each_tensor([](Part, std::size_t, bool is_bias, const Tensor<double>& t) {
    if (is_bias)
      for (double v : t.values()) CHECK(v == 0.0);
  });
  // encoder[3] (64 -> 64, 3x3) holds 36864 draws with variance 2 / 576.
  const auto& w = a.layers(Part::encoder)[3].weight;
  double mean = 0.0, sq = 0.0;
  for (double v : w.values()) mean += v;
  mean /= static_cast<double>(w.numel());
  for (double v : w.values()) sq += (v - mean) * (v - mean);
  const double var = sq / static_cast<double>(w.numel() - 1);
  CHECK(std::abs(var / (2.0 / 576.0) - 1.0) < 0.1);
}

TEST_CASE("standardize") {
  Tensor<double> x(Shape{2, 1, 2}, std::vector<double>{1, 3, 5, 7});
  auto loc = standardize(x, Norm::per_location, 0.0);
  CHECK(loc.out.at(0, 0, 0) == doctest::Approx(-1.0));
  CHECK(loc.out.at(1, 0, 0) == doctest::Approx(1.0));
  auto ch = standardize(x, Norm::per_channel, 0.0);
  CHECK(ch.out.at(0, 0, 0) == doctest::Approx(-1.0));
  CHECK(ch.out.at(0, 0, 1) == doctest::Approx(1.0));
  CHECK(ch.out.at(1, 0, 1) == doctest::Approx(1.0));
  CHECK(parse_norm("per_channel") == Norm::per_channel);
  CHECK(std::string(norm_name(Norm::per_location)) == "per_location");
  CHECK_THROWS_AS(parse_norm("batch"), ConfigError);

  auto arch = ArchSpec::desk_default();
  arch.head_norm = Norm::per_channel;
  CHECK_THROWS_AS(arch.validate(), ConfigError);
  arch.drop_cancelled_biases();
  CHECK_NOTHROW(arch.validate());
  CHECK_FALSE(arch.projector[0].has_bias);
  CHECK(arch.projector[1].has_bias);  // no ReLU after the last layer
  CHECK(arch.hash() != ArchSpec::desk_default().hash());

  // Pooled heads see one location; per-channel statistics are skipped there
  // instead of zeroing the hidden layer.
  arch.encoder_norm = Norm::per_channel;
  arch.drop_cancelled_biases();
  auto params = init_params<double>(5, arch);
  auto r = forward(params, randn(Shape{3, 16, 16}, 6), ForwardOptions{false, true});
  double mag = 0.0;
  for (double v : r.z.values()) mag += std::abs(v);
  CHECK(r.z.plane_size() == 1);
  CHECK(mag > 0.0);
}

TEST_CASE("backward") {
  auto params = init_params<double>(11, ArchSpec::desk_default());
  auto x = randn(Shape{3, 16, 16}, 12);
  auto r = forward(params, x, ForwardOptions{true, false});
  auto g = backward(params, *r.trace, Tensor<double>(r.p.shape()));
  g.for_each_tensor([](Part, std::size_t, bool, const Tensor<double>& t) {
    for (double v : t.values()) CHECK(v == 0.0);
  });
}

TEST_CASE("finite differences on the default model") {
  auto params = init_params<double>(13, ArchSpec::desk_default());
  // Non-zero biases so every bias gradient is exercised away from zero.
  params.for_each_tensor([](Part, std::size_t i, bool is_bias, Tensor<double>& t) {
    if (is_bias)
      for (std::size_t j = 0; j < t.numel(); ++j) t.values()[j] = 0.01 * static_cast<double>((i + j) % 7);
  });
  auto report = finite_diff_check(params, randn(Shape{3, 16, 16}, 14));
  for (const auto& l : report.layers) {
    INFO(l.name);
    CHECK(l.max_rel_error < 1e-5);
  }
  CHECK(report.layers.size() == 2 * (4 + 2 + 2));
}

TEST_CASE("finite differences on a linear model are at rounding level") {
  ArchSpec lin;
  lin.encoder = {ConvLayerSpec::conv3(3, 2, 2, 1, Activation::none), ConvLayerSpec::conv3(2, 2, 2, 1, Activation::none),
                 ConvLayerSpec::conv3(2, 2, 2, 1, Activation::none)};
  lin.projector = {ConvLayerSpec::conv1(2, 2, Activation::none)};
  lin.predictor = {ConvLayerSpec::conv1(2, 2, Activation::none)};
  auto params = init_params<double>(15, lin);
  auto report = finite_diff_check(params, randn(Shape{3, 16, 16}, 16));
  CHECK(report.worst() < 1e-8);
}

TEST_CASE("checkpoint format") {
  const auto arch = ArchSpec::desk_default();
  Checkpoint<float> ck;
  ck.online = init_params<float>(17, arch);
  ck.target = ck.online.target_copy();
  ck.velocity = ck.online.zeros_like();
  ck.step = 1234;
  auto bytes = save_checkpoint(ck);
  auto back = load_checkpoint<float>(bytes, arch);
  CHECK(back.step == 1234);
  CHECK(back.online == ck.online);
  CHECK(save_checkpoint(back) == bytes);

  auto as_double = load_checkpoint<double>(bytes, arch);
  CHECK(as_double.online.layers(Part::encoder)[0].weight.values()[5] ==
        static_cast<double>(ck.online.layers(Part::encoder)[0].weight.values()[5]));

  auto expect_kind = [&](std::vector<std::uint8_t> b, CheckpointError::Kind kind) {
    try {
      load_checkpoint<float>(b, arch);
      FAIL("accepted a corrupted checkpoint");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == kind);
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_kind(bad_magic, CheckpointError::Kind::bad_magic);
  auto bad_version = bytes;
  bad_version[4] = 99;
  expect_kind(bad_version, CheckpointError::Kind::version_mismatch);
  auto bad_hash = bytes;
  bad_hash[8] ^= 1;
  expect_kind(bad_hash, CheckpointError::Kind::arch_mismatch);
  auto cut = bytes;
  cut.resize(bytes.size() - 3);
  try {
    load_checkpoint<float>(cut, arch);
    FAIL("accepted a truncated checkpoint");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::truncated);
    CHECK(e.offset() <= cut.size());
    CHECK(e.offset() > 28);
  }
  auto other = arch;
  other.projector[0].out_ch = 48;
  other.projector[1].in_ch = 48;
  try {
    load_checkpoint<float>(bytes, other);
    FAIL("accepted a checkpoint for another architecture");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::arch_mismatch);
  }
  CHECK(params_digest(ck.online) == params_digest(back.online));
}
