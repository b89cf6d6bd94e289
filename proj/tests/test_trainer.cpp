#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "flowe/bytes.hpp"
#include "flowe/synthvid.hpp"
#include "flowe/trainer.hpp"

using namespace flowe;
using namespace flowe::train;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Tensor<double> t(std::move(s));
  for (double& v : t.values()) v = n01(rng);
  return t;
}

Mask full_mask(std::size_t h, std::size_t w) { return Mask(h, w, 1); }

nn::ArchSpec tiny_arch() {
  nn::ArchSpec a;
  a.encoder = {nn::ConvLayerSpec::conv3(3, 4, 2), nn::ConvLayerSpec::conv3(4, 6, 2), nn::ConvLayerSpec::conv3(6, 8, 2),
               nn::ConvLayerSpec::conv3(8, 8, 1, 2)};
  a.projector = {nn::ConvLayerSpec::conv1(8, 8), nn::ConvLayerSpec::conv1(8, 6, nn::Activation::none)};
  a.predictor = {nn::ConvLayerSpec::conv1(6, 6), nn::ConvLayerSpec::conv1(6, 6, nn::Activation::none)};
  return a;
}

aug::AugmentConfig small_aug() {
  aug::AugmentConfig c;
  c.crop_height = 16;
  c.crop_width = 32;
  return c;
}

std::vector<FrameTriple> scene_pairs(std::uint64_t seed, std::size_t scenes = 3) {
  synth::SceneGenConfig g;
  g.height = 32;
  g.width = 64;
  g.size = {5, 9};
  std::vector<FrameTriple> out;
  for (std::size_t s = 0; s < scenes; ++s) {
    auto scene = synth::random_scene(g, seed + s);
    for (std::int64_t t = 0; t < 3; ++t)
      out.push_back({synth::render_frame(scene, t).image, synth::render_frame(scene, t + 1).image,
                     synth::gt_flow(scene, t, t + 1).flow});
  }
  return out;
}

TrainConfig small_train(std::uint64_t steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.batch_size = 2;
  c.seed = 3;
  c.checkpoint_every = 2;
  return c;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("flowe_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("flowe_loss examples") {
  Tensor<double> a(Shape{2, 1, 1}, std::vector<double>{1, 0}), b(Shape{2, 1, 1}, std::vector<double>{0, 1});
  CHECK(flowe_loss(a, b, full_mask(1, 1)).loss == doctest::Approx(2.0));
  CHECK(flowe_loss(a, a, full_mask(1, 1)).loss == 0.0);

  auto p = randn(Shape{5, 4, 6}, 1);
  Tensor<double> neg(p.shape());
  for (std::size_t i = 0; i < p.numel(); ++i) neg.values()[i] = -3.0 * p.values()[i];
  CHECK(std::abs(flowe_loss(p, neg, full_mask(4, 6)).loss - 4.0) < 1e-9);

  // Scale invariance: both maps are normalized first.
  Tensor<double> scaled(p.shape());
  for (std::size_t i = 0; i < p.numel(); ++i) scaled.values()[i] = 2.5 * p.values()[i];
  CHECK(flowe_loss(p, scaled, full_mask(4, 6)).loss < 1e-24);

  auto empty = flowe_loss(p, neg, Mask(4, 6, 0));
  CHECK(empty.loss == 0.0);
  CHECK(empty.count == 0);
  for (double v : empty.grad.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(flowe_loss(p, randn(Shape{5, 4, 5}, 2), full_mask(4, 6)), DimensionError);
}

TEST_CASE("flowe_loss range, locality and gradient") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    auto p1 = randn(Shape{4, 3, 5}, 100 + 2 * i), p2 = randn(Shape{4, 3, 5}, 101 + 2 * i);
    Mask m(3, 5);
    for (auto& v : m.values) v = std::bernoulli_distribution(0.6)(rng);
    const auto r = flowe_loss(p1, p2, m);
    CHECK(r.loss >= 0.0);
    CHECK(r.loss <= 4.0);
  }

  auto p1 = randn(Shape{4, 3, 5}, 7), p2 = randn(Shape{4, 3, 5}, 8);
  Mask m(3, 5, 1);
  m(1, 2) = 0;
  const auto base = flowe_loss(p1, p2, m);
  auto q1 = p1, q2 = p2;
  for (std::size_t c = 0; c < 4; ++c) q1.at(c, 1, 2) = 1e6 * (c + 1), q2.at(c, 1, 2) = -7.0;
  const auto moved = flowe_loss(q1, q2, m);
  CHECK(moved.loss == base.loss);
  CHECK(moved.grad == base.grad);
  for (std::size_t c = 0; c < 4; ++c) CHECK(base.grad.at(c, 1, 2) == 0.0);

  // Central differences with respect to the raw (un-normalized) p1.
  const double eps = 1e-6;
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < p1.numel(); ++i) {
    auto up = p1, dn = p1;
    up.values()[i] += eps;
    dn.values()[i] -= eps;
    const double num = (flowe_loss(up, p2, m).loss - flowe_loss(dn, p2, m).loss) / (2 * eps);
    worst = std::max(worst, std::abs(num - base.grad.values()[i]));
    scale = std::max(scale, std::abs(num));
  }
  CHECK(worst / scale < 1e-6);
}

TEST_CASE("schedules") {
  CHECK(cosine_lr(0, 100, 0.1) == 0.1);
  CHECK(cosine_lr(100, 100, 0.1) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(cosine_lr(50, 100, 0.1) - 0.05) < 1e-15);
  CHECK(ema_tau_schedule(0, 100, 0.996) == doctest::Approx(0.996));
  CHECK(ema_tau_schedule(100, 100, 0.996) == 1.0);
  double prev_lr = 1e9, prev_tau = 0.0;
  for (std::uint64_t s = 0; s <= 1000; ++s) {
    const double lr = cosine_lr(s, 1000, 0.1), tau = ema_tau_schedule(s, 1000, 0.99);
    CHECK(lr <= prev_lr);
    CHECK(tau >= prev_tau);
    prev_lr = lr, prev_tau = tau;
  }
}

TEST_CASE("optimizers") {
  nn::ArchSpec one;
  one.encoder = {nn::ConvLayerSpec::conv1(1, 1, nn::Activation::none)};
  auto params = nn::init_params<double>(1, one);
  params.layers(nn::Part::encoder)[0].weight.values()[0] = 1.0;
  auto grads = params.zeros_like();
  auto vel = params.zeros_like();

  SUBCASE("zero gradient without decay changes nothing") {
    auto before = params;
    sgd_momentum_step(params, grads, vel, 0.1, 0.9, 0.0);
    CHECK(params == before);
    lars_step(params, grads, vel, 0.1, 0.9, 0.0);
    CHECK(params == before);
  }
  SUBCASE("one sgd step") {
    grads.layers(nn::Part::encoder)[0].weight.values()[0] = 1.0;
    sgd_momentum_step(params, grads, vel, 0.1, 0.0, 0.0);
    CHECK(params.layers(nn::Part::encoder)[0].weight.values()[0] == doctest::Approx(0.9));
  }
  SUBCASE("lars doubles the step when ||w|| = 2 ||g||") {
    params.layers(nn::Part::encoder)[0].weight.values()[0] = 2.0;
    grads.layers(nn::Part::encoder)[0].weight.values()[0] = 1.0;
    auto sgd = params;
    auto sgd_vel = vel;
    sgd_momentum_step(sgd, grads, sgd_vel, 0.1, 0.0, 0.0);
    lars_step(params, grads, vel, 0.1, 0.0, 0.0, 0.0);
    const double sgd_delta = 2.0 - sgd.layers(nn::Part::encoder)[0].weight.values()[0];
    const double lars_delta = 2.0 - params.layers(nn::Part::encoder)[0].weight.values()[0];
    CHECK(lars_delta == doctest::Approx(2.0 * sgd_delta));
    CHECK(lars_trust_ratio(2.0, 1.0, 0.0, 0.0, 1.0) == 2.0);
  }
  SUBCASE("lars leaves biases without trust ratio or decay") {
    params.layers(nn::Part::encoder)[0].bias.values()[0] = 3.0;
    grads.layers(nn::Part::encoder)[0].bias.values()[0] = 1.0;
    lars_step(params, grads, vel, 0.1, 0.0, 0.5);
    CHECK(params.layers(nn::Part::encoder)[0].bias.values()[0] == doctest::Approx(2.9));
  }
  SUBCASE("non-finite gradients are reported with their tensor") {
    grads.layers(nn::Part::encoder)[0].bias.values()[0] = std::nan("");
    try {
      require_finite_grads(grads);
      FAIL("accepted a NaN gradient");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("encoder[0].bias") != std::string::npos);
    }
  }
}

TEST_CASE("ema_update") {
  const auto arch = nn::ArchSpec::desk_default();
  auto online = nn::init_params<double>(1, arch);
  auto target = nn::init_params<double>(2, arch).target_copy();
  auto keep = target;
  ema_update(online, target, 1.0);
  CHECK(target == keep);
  ema_update(online, target, 0.0);
  CHECK(target == online.target_copy());

  auto zeros = online.zeros_like().target_copy();
  auto ones = online.zeros_like();
  ones.for_each_tensor([](nn::Part, std::size_t, bool, Tensor<double>& t) { t.fill(1.0); });
  ema_update(ones, zeros, 0.99);
  zeros.for_each_tensor([](nn::Part, std::size_t, bool, const Tensor<double>& t) {
    for (double v : t.values()) CHECK(std::abs(v - 0.01) < 1e-15);
  });
  CHECK(zeros.layers(nn::Part::predictor).empty());

  auto other = nn::init_params<double>(3, tiny_arch());
  CHECK_THROWS(ema_update(other, target, 0.5));
}

TEST_CASE("train_step") {
  const auto arch = tiny_arch();
  const auto data = scene_pairs(40);
  auto cfg = small_train(10);
  const auto aug_cfg = small_aug();

  SUBCASE("a batch without valid pixels is skipped") {
    auto batch = std::vector<FrameTriple>{data[0], data[1]};
    for (auto& b : batch) std::fill(b.flow.valid.values.begin(), b.flow.valid.values.end(), 0);
    auto state = TrainState<double>::fresh(1, arch);
    const auto before = state;
    const auto rep = train_step(state, cfg, aug_cfg, batch);
    CHECK(rep.skipped);
    CHECK(rep.valid_pixel_fraction == 0.0);
    CHECK(state.step == 1);
    CHECK(state.online == before.online);
    CHECK(state.target == before.target);
    CHECK(state.velocity == before.velocity);
  }
  SUBCASE("replaying one batch with a small step lowers its loss") {
    cfg.optimizer = OptimizerKind::sgd_momentum;
    cfg.base_lr = 0.01;
    cfg.momentum = 0.0;
    cfg.ema_cosine = false;
    cfg.ema_tau = 1.0;  // frozen target: the objective is the same before and after
    cfg.photometric = false;
    auto batch = std::vector<FrameTriple>{data[0], data[4]};
    auto state = TrainState<double>::fresh(2, arch);
    auto probe = state;
    const double first = train_step(state, cfg, aug_cfg, batch).loss;
    // Same step index means the same augmentation draws.
    probe.online = state.online;
    const double again = train_step(probe, cfg, aug_cfg, batch).loss;
    CHECK(again <= first);
  }
  SUBCASE("reports stay in range") {
    auto state = TrainState<float>::fresh(3, arch);
    for (int i = 0; i < 3; ++i) {
      const auto rep = train_step(state, cfg, aug_cfg, std::vector<FrameTriple>{data[i], data[i + 3]});
      CHECK(rep.loss >= 0.0);
      CHECK(rep.loss <= 4.0);
      CHECK(rep.valid_pixel_fraction >= 0.0);
      CHECK(rep.valid_pixel_fraction <= 1.0);
      CHECK(std::isfinite(rep.grad_norm));
    }
    CHECK(state.step == 3);
  }
}

TEST_CASE("train_loop files, determinism and resume") {
  const auto arch = tiny_arch();
  InMemorySource source(scene_pairs(50));
  const auto aug_cfg = small_aug();

  SUBCASE("zero steps writes the initial checkpoint only") {
    TempDir dir("zero");
    auto cfg = small_train(0);
    LoopOptions opts;
    opts.out_dir = dir.path;
    auto r = train_loop<float>(cfg, aug_cfg, arch, source, opts);
    CHECK(r.reports.empty());
    std::vector<std::string> ckpts;
    for (const auto& e : std::filesystem::directory_iterator(dir.path))
      if (e.path().extension() == ".bin") ckpts.push_back(e.path().filename().string());
    REQUIRE(ckpts.size() == 1);
    CHECK(ckpts[0] == checkpoint_name(0));
    auto ck = nn::load_checkpoint_file<float>(dir.path / ckpts[0], arch);
    CHECK(ck.online == TrainState<float>::fresh(cfg.seed, arch).online);
  }

  SUBCASE("identical runs match byte for byte and resume continues exactly") {
    auto cfg = small_train(5);
    TempDir a("a"), b("b"), c("c");
    LoopOptions oa, ob;
    oa.out_dir = a.path;
    ob.out_dir = b.path;
    train_loop<float>(cfg, aug_cfg, arch, source, oa);
    train_loop<float>(cfg, aug_cfg, arch, source, ob);
    CHECK(slurp(a.path / "metrics.jsonl") == slurp(b.path / "metrics.jsonl"));
    CHECK(slurp(a.path / checkpoint_name(5)) == slurp(b.path / checkpoint_name(5)));
    CHECK(std::filesystem::exists(a.path / checkpoint_name(2)));
    CHECK(std::filesystem::exists(a.path / checkpoint_name(4)));

    // Interrupted run: copy the step-2 checkpoint and the first two metric
    // lines into a fresh directory, then resume.
    std::filesystem::copy_file(a.path / checkpoint_name(2), c.path / checkpoint_name(2));
    {
      std::ifstream in(a.path / "metrics.jsonl");
      std::ofstream out(c.path / "metrics.jsonl");
      std::string line;
      for (int i = 0; i < 3 && std::getline(in, line); ++i) out << line << "\n";  // one line too many
    }
    LoopOptions oc;
    oc.out_dir = c.path;
    oc.resume_from = c.path / checkpoint_name(2);
    auto resumed = train_loop<float>(cfg, aug_cfg, arch, source, oc);
    CHECK(resumed.reports.size() == 3);
    CHECK(slurp(c.path / "metrics.jsonl") == slurp(a.path / "metrics.jsonl"));
    CHECK(slurp(c.path / checkpoint_name(5)) == slurp(a.path / checkpoint_name(5)));
  }

  SUBCASE("metrics lines carry every report field") {
    StepReport r;
    r.step = 7;
    r.loss = 0.5;
    const auto line = r.to_json_line();
    for (const char* key : {"\"step\"", "\"loss\"", "\"valid_pixel_fraction\"", "\"lr\"", "\"ema_tau_effective\"",
                            "\"grad_norm\"", "\"skipped\""})
      CHECK(line.find(key) != std::string::npos);
  }
}
