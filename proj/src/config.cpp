#include "flowe/config.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

namespace flowe {

using json = nlohmann::ordered_json;

nn::ArchSpec NetworkConfig::arch() const {
  if (encoder_channels.empty()) throw ConfigError("network: encoder_channels must not be empty");
  nn::ArchSpec a;
  std::size_t in = 3;
  for (std::size_t c : encoder_channels) {
    a.encoder.push_back(nn::ConvLayerSpec::conv3(in, c, 2));
    in = c;
  }
  if (dilated_channels) {
    a.encoder.push_back(nn::ConvLayerSpec::conv3(in, dilated_channels, 1, 2));
    in = dilated_channels;
  }
  a.projector = {nn::ConvLayerSpec::conv1(in, projector_hidden),
                 nn::ConvLayerSpec::conv1(projector_hidden, embedding, nn::Activation::none)};
  a.predictor = {nn::ConvLayerSpec::conv1(embedding, predictor_hidden),
                 nn::ConvLayerSpec::conv1(predictor_hidden, embedding, nn::Activation::none)};
  a.encoder_norm = encoder_norm;
  a.head_norm = head_norm;
  a.drop_cancelled_biases();
  a.validate();
  return a;
}

namespace {

json range_json(double lo, double hi) { return json::array({lo, hi}); }

const char* optimizer_name(train::OptimizerKind k) { return k == train::OptimizerKind::lars ? "lars" : "sgd"; }

json to_json_doc(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["precision"] = c.precision;

  const auto& a = c.augment;
  j["augment"] = {{"scale", range_json(a.scale.lo, a.scale.hi)},
                  {"rotation_deg", range_json(a.rotation_deg.lo, a.rotation_deg.hi)},
                  {"crop_height", a.crop_height},
                  {"crop_width", a.crop_width},
                  {"pad_to_crop", a.pad_to_crop},
                  {"color_strength", a.color_strength},
                  {"color_prob", a.color_prob},
                  {"grayscale_prob", a.grayscale_prob},
                  {"blur_sigma", range_json(a.blur_sigma.lo, a.blur_sigma.hi)},
                  {"blur_prob", a.blur_prob}};

  const auto& t = c.trainer;
  j["trainer"] = {{"total_steps", t.total_steps},
                  {"batch_size", t.batch_size},
                  {"base_lr", t.base_lr},
                  {"weight_decay", t.weight_decay},
                  {"ema_tau", t.ema_tau},
                  {"ema_cosine", t.ema_cosine},
                  {"optimizer", optimizer_name(t.optimizer)},
                  {"momentum", t.momentum},
                  {"trust_coefficient", t.trust_coefficient},
                  {"pixel_based", t.ablation.pixel_based},
                  {"use_affine", t.ablation.use_affine},
                  {"use_flow", t.ablation.use_flow},
                  {"photometric", t.photometric},
                  {"checkpoint_every", t.checkpoint_every}};

  const auto& d = c.synthvid;
  const auto& s = d.scene;
  j["synthvid"] = {{"episodes", d.episodes},
                   {"frames_per_episode", d.frames_per_episode},
                   {"frame_gap", d.frame_gap},
                   {"height", s.height},
                   {"width", s.width},
                   {"min_shapes", s.min_shapes},
                   {"max_shapes", s.max_shapes},
                   {"size", range_json(s.size.lo, s.size.hi)},
                   {"aspect", range_json(s.aspect.lo, s.aspect.hi)},
                   {"relative_speed", range_json(s.relative_speed.lo, s.relative_speed.hi)},
                   {"max_angular_velocity_deg", s.max_angular_velocity_deg},
                   {"max_scale_rate", s.max_scale_rate},
                   {"ego_max_translation", s.ego_max_translation},
                   {"ego_max_rotation_deg", s.ego_max_rotation_deg},
                   {"ego_max_zoom", s.ego_max_zoom},
                   {"background_waves", s.background_waves},
                   {"background_contrast", s.background_contrast},
                   {"shape_waves", s.shape_waves},
                   {"shape_contrast", s.shape_contrast},
                   {"class_pattern_contrast", s.class_pattern_contrast},
                   {"noise_sigma_flow", s.noise_sigma_flow}};

  const auto& r = c.readout;
  j["readout"] = {{"epochs", r.epochs},
                  {"lr", r.lr},
                  {"momentum", r.momentum},
                  {"weight_decay", r.weight_decay},
                  {"batch_size", r.batch_size},
                  {"class_count", r.class_count},
                  {"encoder_checkpoint", r.encoder_checkpoint},
                  {"upsample_logits", r.upsample_logits},
                  {"standardize", r.standardize},
                  {"eval_fraction", r.eval_fraction}};

  const auto& n = c.network;
  j["network"] = {{"encoder_channels", n.encoder_channels},
                  {"dilated_channels", n.dilated_channels},
                  {"projector_hidden", n.projector_hidden},
                  {"embedding", n.embedding},
                  {"predictor_hidden", n.predictor_hidden},
                  {"encoder_norm", nn::norm_name(n.encoder_norm)},
                  {"head_norm", nn::norm_name(n.head_norm)}};
  return j;
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  out = j.at(key).get<V>();
}

void read_range(const json& j, const char* key, double& lo, double& hi) {
  const json& r = j.at(key);
  if (!r.is_array() || r.size() != 2) throw ConfigError(std::string(key) + ": expected [lo, hi]");
  lo = r[0].get<double>();
  hi = r[1].get<double>();
}

RunConfig from_json_doc(const json& j) {
  RunConfig c;
  read(j, "seed", c.seed);
  read(j, "out_dir", c.out_dir);
  read(j, "precision", c.precision);

  const json& a = j.at("augment");
  read_range(a, "scale", c.augment.scale.lo, c.augment.scale.hi);
  read_range(a, "rotation_deg", c.augment.rotation_deg.lo, c.augment.rotation_deg.hi);
  read(a, "crop_height", c.augment.crop_height);
  read(a, "crop_width", c.augment.crop_width);
  read(a, "pad_to_crop", c.augment.pad_to_crop);
  read(a, "color_strength", c.augment.color_strength);
  read(a, "color_prob", c.augment.color_prob);
  read(a, "grayscale_prob", c.augment.grayscale_prob);
  read_range(a, "blur_sigma", c.augment.blur_sigma.lo, c.augment.blur_sigma.hi);
  read(a, "blur_prob", c.augment.blur_prob);

  const json& t = j.at("trainer");
  auto& tc = c.trainer;
  read(t, "total_steps", tc.total_steps);
  read(t, "batch_size", tc.batch_size);
  read(t, "base_lr", tc.base_lr);
  read(t, "weight_decay", tc.weight_decay);
  read(t, "ema_tau", tc.ema_tau);
  read(t, "ema_cosine", tc.ema_cosine);
  const std::string opt = t.at("optimizer").get<std::string>();
  if (opt == "lars") tc.optimizer = train::OptimizerKind::lars;
  else if (opt == "sgd") tc.optimizer = train::OptimizerKind::sgd_momentum;
  else throw ConfigError("trainer.optimizer: expected \"lars\" or \"sgd\", got \"" + opt + "\"");
  read(t, "momentum", tc.momentum);
  read(t, "trust_coefficient", tc.trust_coefficient);
  read(t, "pixel_based", tc.ablation.pixel_based);
  read(t, "use_affine", tc.ablation.use_affine);
  read(t, "use_flow", tc.ablation.use_flow);
  read(t, "photometric", tc.photometric);
  read(t, "checkpoint_every", tc.checkpoint_every);

  const json& d = j.at("synthvid");
  auto& dc = c.synthvid;
  auto& sc = dc.scene;
  read(d, "episodes", dc.episodes);
  read(d, "frames_per_episode", dc.frames_per_episode);
  read(d, "frame_gap", dc.frame_gap);
  read(d, "height", sc.height);
  read(d, "width", sc.width);
  read(d, "min_shapes", sc.min_shapes);
  read(d, "max_shapes", sc.max_shapes);
  read_range(d, "size", sc.size.lo, sc.size.hi);
  read_range(d, "aspect", sc.aspect.lo, sc.aspect.hi);
  read_range(d, "relative_speed", sc.relative_speed.lo, sc.relative_speed.hi);
  read(d, "max_angular_velocity_deg", sc.max_angular_velocity_deg);
  read(d, "max_scale_rate", sc.max_scale_rate);
  read(d, "ego_max_translation", sc.ego_max_translation);
  read(d, "ego_max_rotation_deg", sc.ego_max_rotation_deg);
  read(d, "ego_max_zoom", sc.ego_max_zoom);
  read(d, "background_waves", sc.background_waves);
  read(d, "background_contrast", sc.background_contrast);
  read(d, "shape_waves", sc.shape_waves);
  read(d, "shape_contrast", sc.shape_contrast);
  read(d, "class_pattern_contrast", sc.class_pattern_contrast);
  read(d, "noise_sigma_flow", sc.noise_sigma_flow);

  const json& r = j.at("readout");
  auto& rc = c.readout;
  read(r, "epochs", rc.epochs);
  read(r, "lr", rc.lr);
  read(r, "momentum", rc.momentum);
  read(r, "weight_decay", rc.weight_decay);
  read(r, "batch_size", rc.batch_size);
  read(r, "class_count", rc.class_count);
  read(r, "encoder_checkpoint", rc.encoder_checkpoint);
  read(r, "upsample_logits", rc.upsample_logits);
  read(r, "standardize", rc.standardize);
  read(r, "eval_fraction", rc.eval_fraction);

  const json& n = j.at("network");
  auto& nc = c.network;
  read(n, "encoder_channels", nc.encoder_channels);
  read(n, "dilated_channels", nc.dilated_channels);
  read(n, "projector_hidden", nc.projector_hidden);
  read(n, "embedding", nc.embedding);
  read(n, "predictor_hidden", nc.predictor_hidden);
  nc.encoder_norm = nn::parse_norm(n.at("encoder_norm").get<std::string>());
  nc.head_norm = nn::parse_norm(n.at("head_norm").get<std::string>());
  return c;
}

bool compatible(const json& def, const json& v) {
  if (def.is_number()) {
    if (!v.is_number()) return false;
    if (def.is_number_unsigned() || def.is_number_integer()) return v.is_number_integer() && (!def.is_number_unsigned() || v >= 0);
    return true;
  }
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return v.is_object();
}

void merge_into(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
      continue;
    }
    if (!compatible(slot, it.value())) throw ConfigError("config key " + key + ": wrong value type");
    slot = it.value();
  }
}

void apply_override(json& doc, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + text);
  const std::string path = text.substr(0, eq), raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // bare strings
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_into(doc, patch, "");
}

}  // namespace

void RunConfig::resolve() {
  trainer.seed = seed;
  synthvid.seed = seed;
  readout.seed = seed;
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  augment.validate();
  trainer.validate();
  synthvid.validate();
  readout.validate();
  const nn::ArchSpec a = network.arch();
  if (synthvid.scene.height % a.output_stride() || synthvid.scene.width % a.output_stride())
    throw ConfigError("synthvid frame size must be a multiple of the output stride " +
                      std::to_string(a.output_stride()));
  if (augment.crop_height % a.output_stride() || augment.crop_width % a.output_stride())
    throw ConfigError("augment crop size must be a multiple of the output stride " + std::to_string(a.output_stride()));
}

std::string RunConfig::to_json() const { return to_json_doc(*this).dump(2); }

RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  json doc = to_json_doc(RunConfig{});
  if (!json_text.empty()) {
    const json user = json::parse(json_text, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config is not valid JSON");
    merge_into(doc, user, "");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c;
  try {
    c = from_json_doc(doc);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.resolve();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

}  // namespace flowe
