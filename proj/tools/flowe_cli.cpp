// flowe: gen-data | train | readout | check | flo
//
// Exit status: 0 success, 1 runtime error, 2 configuration error, 3 failed
// self-check.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "flowe/checkpoint.hpp"
#include "flowe/config.hpp"
#include "flowe/flo.hpp"
#include "flowe/kernels.hpp"
#include "flowe/parallel.hpp"
#include "flowe/readout.hpp"
#include "flowe/selfcheck.hpp"
#include "flowe/synthvid.hpp"
#include "flowe/trainer.hpp"

namespace fs = std::filesystem;
using namespace flowe;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitCheck = 3;

struct Common {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? parse_config("", c.overrides) : load_config(c.config_path, c.overrides);
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

void echo_config(const RunConfig& cfg, const fs::path& dir, const char* name = "config.json") {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / name);
  out << cfg.to_json() << '\n';
  if (!out) throw IoError("cannot write " + (dir / name).string());
}

int cmd_gen_data(const Common& common) {
  const RunConfig cfg = resolve_config(common);
  echo_config(cfg, cfg.out_dir);
  const fs::path manifest = synth::gen_dataset(cfg.synthvid, cfg.out_dir);
  std::cout << manifest.string() << '\n';
  return 0;
}

template <std::floating_point T>
int run_train(const RunConfig& cfg, const fs::path& data, const std::optional<fs::path>& resume) {
  const auto pairs = train::load_frame_pairs(data);
  const train::InMemorySource source(pairs, cfg.synthvid.scene.noise_sigma_flow, derive_seed(cfg.seed, {0x0f10}));
  std::cerr << "data: " << source.describe() << "; kernels: " << kernels::isa_name(kernels::active_isa())
            << "; workers: " << worker_count() << '\n';
  train::LoopOptions opts;
  opts.out_dir = fs::path(cfg.out_dir);
  opts.resume_from = resume;
  opts.on_step = [&](const train::StepReport& r) {
    if (r.step % 100 == 0 || r.step + 1 == cfg.trainer.total_steps)
      std::cerr << "step " << r.step << " loss " << r.loss << " valid " << r.valid_pixel_fraction
                << (r.skipped ? " (skipped)" : "") << '\n';
  };
  const auto result = train::train_loop<T>(cfg.trainer, cfg.augment, cfg.network.arch(), source, opts);
  std::cout << (fs::path(cfg.out_dir) / train::checkpoint_name(result.state.step)).string() << '\n';
  return 0;
}

int cmd_train(const Common& common, const std::string& data, std::optional<std::uint64_t> steps,
              const std::string& resume, const std::string& ablation) {
  RunConfig cfg = resolve_config(common);
  if (steps) cfg.trainer.total_steps = *steps;
  if (ablation == "pooled") cfg.trainer.ablation.pixel_based = false;
  else if (ablation == "no_affine") cfg.trainer.ablation.use_affine = false;
  else if (ablation == "no_flow") cfg.trainer.ablation.use_flow = false;
  else if (!ablation.empty()) throw ConfigError("unknown ablation \"" + ablation + "\"");
  cfg.resolve();
  echo_config(cfg, cfg.out_dir);
  const std::optional<fs::path> resume_path = resume.empty() ? std::nullopt : std::optional<fs::path>(resume);
  return cfg.precision == 64 ? run_train<double>(cfg, data, resume_path) : run_train<float>(cfg, data, resume_path);
}

template <std::floating_point T>
nn::ModelParams<T> encoder_for(const RunConfig& cfg) {
  const nn::ArchSpec arch = cfg.network.arch();
  if (cfg.readout.encoder_checkpoint == "random") return train::TrainState<T>::fresh(cfg.seed, arch).online;
  return nn::load_checkpoint_file<T>(cfg.readout.encoder_checkpoint, arch).online;
}

template <std::floating_point T>
int run_readout(const RunConfig& cfg, const fs::path& data, std::size_t overlays) {
  const auto all = readout::load_labeled_frames(data);
  const auto [train_set, eval_set] = readout::split_by_episode(all, cfg.readout.eval_fraction);
  const nn::ModelParams<T> encoder = encoder_for<T>(cfg);
  const auto digest = nn::params_digest(encoder);
  const auto run = readout::run_readout(encoder, train_set, eval_set, cfg.readout);
  if (nn::params_digest(encoder) != digest) throw NumericError("encoder weights changed during readout");

  nlohmann::ordered_json j;
  j["encoder"] = cfg.readout.encoder_checkpoint;
  j["train_frames"] = train_set.images.size();
  j["eval_frames"] = eval_set.images.size();
  j["eval"] = nlohmann::ordered_json::parse(run.eval.to_json());
  j["train"] = nlohmann::ordered_json::parse(run.train.to_json());
  j["loss_curve"] = run.fit.loss_curve;
  const fs::path out = fs::path(cfg.out_dir) / "readout.json";
  std::ofstream f(out);
  f << j.dump(2) << '\n';
  if (!f) throw IoError("cannot write " + out.string());

  for (std::size_t i = 0; i < std::min(overlays, eval_set.images.size()); ++i) {
    const auto feats = readout::extract_features(encoder, eval_set.images[i]);
    const auto pred = run.fit.head.predict(feats, eval_set.labels[i].height, eval_set.labels[i].width);
    char name[32];
    std::snprintf(name, sizeof(name), "overlay_%03zu.png", i);
    readout::write_overlay(fs::path(cfg.out_dir) / name, eval_set.images[i], pred);
  }
  std::cout << out.string() << '\n' << "eval mIoU " << run.eval.miou << '\n';
  return 0;
}

int cmd_readout(const Common& common, const std::string& data, const std::string& checkpoint, std::size_t overlays) {
  RunConfig cfg = resolve_config(common);
  if (!checkpoint.empty()) cfg.readout.encoder_checkpoint = checkpoint;
  cfg.resolve();
  echo_config(cfg, cfg.out_dir, "readout_config.json");
  return cfg.precision == 64 ? run_readout<double>(cfg, data, overlays) : run_readout<float>(cfg, data, overlays);
}

int cmd_check() {
  const check::SuiteReport rep = check::run_all();
  rep.print(std::cout);
  const bool ok = rep.passed();
  std::cout << (ok ? "all checks passed" : "check suite FAILED") << '\n';
  return ok ? 0 : kExitCheck;
}

struct FlowStats {
  double min_u = 0, max_u = 0, min_v = 0, max_v = 0, mean_mag = 0, max_mag = 0;
};

FlowStats flow_stats(const geom::FlowField& f) {
  FlowStats s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), 0, 0};
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    const double u = f.u.values[i], v = f.v.values[i], m = std::hypot(u, v);
    s.min_u = std::min(s.min_u, u);
    s.max_u = std::max(s.max_u, u);
    s.min_v = std::min(s.min_v, v);
    s.max_v = std::max(s.max_v, v);
    s.mean_mag += m;
    s.max_mag = std::max(s.max_mag, m);
  }
  s.mean_mag /= static_cast<double>(f.u.size());
  return s;
}

int cmd_flo_inspect(const std::string& path) {
  const geom::FlowField f = flo::read_file(path);
  const FlowStats s = flow_stats(f);
  std::printf("%s: %zu x %zu (width x height)\n", path.c_str(), f.width(), f.height());
  std::printf("u in [%.4f, %.4f], v in [%.4f, %.4f]\n", s.min_u, s.max_u, s.min_v, s.max_v);
  std::printf("|flow| mean %.4f max %.4f\n", s.mean_mag, s.max_mag);
  return 0;
}

int cmd_flo_diff(const std::string& a_path, const std::string& b_path) {
  const geom::FlowField a = flo::read_file(a_path), b = flo::read_file(b_path);
  if (a.width() != b.width() || a.height() != b.height()) {
    std::printf("size differs: %zu x %zu vs %zu x %zu\n", a.width(), a.height(), b.width(), b.height());
    return kExitRuntime;
  }
  double sum = 0.0, worst = 0.0;
  std::size_t differing = 0;
  for (std::size_t i = 0; i < a.u.size(); ++i) {
    const double e = std::hypot(a.u.values[i] - b.u.values[i], a.v.values[i] - b.v.values[i]);
    sum += e;
    worst = std::max(worst, e);
    if (e != 0.0) ++differing;
  }
  std::printf("endpoint error mean %.6f max %.6f; %zu of %zu pixels differ\n", sum / static_cast<double>(a.u.size()),
              worst, differing, a.u.size());
  return 0;
}

// Pulls "--section.key=value" (and --seed=, --precision=) arguments out
// before CLI11 sees them.
std::vector<std::string> take_overrides(int argc, char** argv, std::vector<std::string>& rest) {
  std::vector<std::string> out;
  for (int i = 0; i < argc; ++i) {
    const std::string a = argv[i];
    const auto eq = a.find('=');
    const std::string key = eq == std::string::npos ? "" : a.substr(2, eq - 2);
    if (i > 0 && a.rfind("--", 0) == 0 && !key.empty() &&
        (key.find('.') != std::string::npos || key == "seed" || key == "precision"))
      out.push_back(a.substr(2));
    else
      rest.push_back(a);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args;
  Common common;
  common.overrides = take_overrides(argc, argv, args);

  CLI::App app{"Flow-equivariant dense representation learning at desk scale"};
  app.require_subcommand(1);
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run configuration");
    sub->add_option("--out-dir", common.out_dir, "Output directory (overrides out_dir)");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic video dataset");
  add_common(gen);

  std::string data, resume, ablation, checkpoint;
  std::optional<std::uint64_t> steps;
  auto* tr = app.add_subcommand("train", "Train online/target networks");
  add_common(tr);
  tr->add_option("--data", data, "Dataset directory (generated or frames + .flo)")->required();
  tr->add_option("--steps", steps, "Override trainer.total_steps");
  tr->add_option("--resume", resume, "Checkpoint to resume from");
  tr->add_option("--ablation", ablation, "pooled | no_affine | no_flow");

  std::size_t overlays = 4;
  auto* ro = app.add_subcommand("readout", "Linear readout on a frozen encoder");
  add_common(ro);
  ro->add_option("--data", data, "Generated dataset directory")->required();
  ro->add_option("--checkpoint", checkpoint, "Encoder checkpoint or \"random\"");
  ro->add_option("--overlays", overlays, "Prediction overlays to write");

  auto* chk = app.add_subcommand("check", "Run the gradient and geometry self-check suite");

  auto* flo_cmd = app.add_subcommand("flo", ".flo file tools");
  flo_cmd->require_subcommand(1);
  std::string flo_a, flo_b;
  auto* inspect = flo_cmd->add_subcommand("inspect", "Print size and displacement statistics");
  inspect->add_option("file", flo_a)->required();
  auto* diff = flo_cmd->add_subcommand("diff", "Endpoint error between two flows");
  diff->add_option("a", flo_a)->required();
  diff->add_option("b", flo_b)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*tr) return cmd_train(common, data, steps, resume, ablation);
    if (*ro) return cmd_readout(common, data, checkpoint, overlays);
    if (*chk) return cmd_check();
    if (*inspect) return cmd_flo_inspect(flo_a);
    if (*diff) return cmd_flo_diff(flo_a, flo_b);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
