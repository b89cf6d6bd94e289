#include "flowe/readout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "flowe/geometry.hpp"
#include "flowe/image_io.hpp"
#include "flowe/optimizer.hpp"
#include "flowe/parallel.hpp"
#include "flowe/rng.hpp"
#include "flowe/synthvid.hpp"

namespace flowe::readout {

void ReadoutConfig::validate() const {
  if (class_count < 2) throw ConfigError("readout: class_count must be >= 2");
  if (batch_size == 0) throw ConfigError("readout: batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("readout: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("readout: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("readout: weight_decay must be >= 0");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("readout: eval_fraction must lie in (0, 1)");
  if (encoder_checkpoint.empty()) throw ConfigError("readout: encoder_checkpoint must be a path or \"random\"");
}

template <std::floating_point T>
Tensor<double> extract_features(const nn::ModelParams<T>& encoder, const Tensor<double>& image) {
  return nn::encode(encoder, image.template cast<T>()).template cast<double>();
}

template <std::floating_point T>
std::vector<Tensor<double>> extract_features(const nn::ModelParams<T>& encoder,
                                             const std::vector<Tensor<double>>& images) {
  std::vector<Tensor<double>> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) { out[i] = extract_features(encoder, images[i]); });
  return out;
}

FeatureStats FeatureStats::identity(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

FeatureStats FeatureStats::fit(const std::vector<Tensor<double>>& features) {
  if (features.empty()) throw DataError("feature statistics need at least one map");
  const std::size_t channels = features.front().channels();
  std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
  double count = 0.0;
  for (const auto& f : features) {
    if (f.channels() != channels) throw DimensionError("feature maps disagree in channel count");
    for (std::size_t c = 0; c < channels; ++c)
      for (double v : f.plane(c)) {
        sum[c] += v;
        sq[c] += v * v;
      }
    count += static_cast<double>(f.plane_size());
  }
  FeatureStats s{std::vector<double>(channels), std::vector<double>(channels)};
  for (std::size_t c = 0; c < channels; ++c) {
    s.mean[c] = sum[c] / count;
    const double var = std::max(sq[c] / count - s.mean[c] * s.mean[c], 0.0);
    s.inv_std[c] = 1.0 / std::max(std::sqrt(var), 1e-6);
  }
  return s;
}

Tensor<double> FeatureStats::apply(const Tensor<double>& f) const {
  require_feature_map(f, "FeatureStats::apply");
  if (f.channels() != mean.size()) throw DimensionError("feature statistics fitted for another channel count");
  Tensor<double> out = f;
  for (std::size_t c = 0; c < f.channels(); ++c)
    for (double& v : out.plane(c)) v = (v - mean[c]) * inv_std[c];
  return out;
}

namespace {

// Logits on the feature grid; `f` is already standardized.
Tensor<double> small_logits(const ReadoutHead& head, const Tensor<double>& f) {
  const std::size_t k = head.weight.extent(0), c = head.weight.extent(1), n = f.plane_size();
  if (f.channels() != c) throw DimensionError("readout head expects " + std::to_string(c) + " channels");
  auto out = feature_map<double>(k, f.height(), f.width());
  for (std::size_t i = 0; i < k; ++i) {
    double* o = out.plane(i).data();
    std::fill(o, o + n, head.bias.data()[i]);
    for (std::size_t j = 0; j < c; ++j) {
      const double w = head.weight.data()[i * c + j];
      const double* src = f.plane(j).data();
      for (std::size_t p = 0; p < n; ++p) o[p] += w * src[p];
    }
  }
  return out;
}

// Align-corners nearest index from a grid of `to` samples onto one of `from`.
std::size_t nearest_index(std::size_t i, std::size_t from, std::size_t to) {
  if (from <= 1 || to <= 1) return 0;
  const double pos = static_cast<double>(i) * static_cast<double>(to - 1) / static_cast<double>(from - 1);
  return std::min(static_cast<std::size_t>(std::lround(pos)), to - 1);
}

Tensor<double> nearest_upsample(const Tensor<double>& f, std::size_t height, std::size_t width) {
  auto out = feature_map<double>(f.channels(), height, width);
  for (std::size_t c = 0; c < f.channels(); ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        out.at(c, y, x) = f.at(c, nearest_index(y, height, f.height()), nearest_index(x, width, f.width()));
  return out;
}

LabelMap nearest_downsample(const LabelMap& l, std::size_t height, std::size_t width) {
  LabelMap out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      out(y, x) = l(nearest_index(y, height, l.height), nearest_index(x, width, l.width));
  return out;
}

LabelMap argmax(const Tensor<double>& logits) {
  LabelMap out(logits.height(), logits.width());
  const std::size_t n = logits.plane_size();
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.channels(); ++k)
      if (logits.data()[k * n + p] > logits.data()[best * n + p]) best = k;
    out.values[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// Adds the softmax cross-entropy gradient into `grad` and returns the summed loss.
double softmax_xent(const Tensor<double>& logits, const LabelMap& labels, Tensor<double>& grad) {
  const std::size_t k = logits.channels(), n = logits.plane_size();
  const double* l = logits.data();
  double* g = grad.data();
  double loss = 0.0;
  std::vector<double> e(k);
  for (std::size_t p = 0; p < n; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, l[c * n + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (e[c] = std::exp(l[c * n + p] - mx));
    const std::size_t y = labels.values[p];
    loss += std::log(z) - (l[y * n + p] - mx);
    for (std::size_t c = 0; c < k; ++c) g[c * n + p] = e[c] / z - (c == y ? 1.0 : 0.0);
  }
  return loss;
}

}  // namespace

Tensor<double> ReadoutHead::logits(const Tensor<double>& features, std::size_t height, std::size_t width) const {
  const Tensor<double> small = small_logits(*this, stats.apply(features));
  return upsample_logits ? geom::upsample_bilinear(small, height, width) : nearest_upsample(small, height, width);
}

LabelMap ReadoutHead::predict(const Tensor<double>& features, std::size_t height, std::size_t width) const {
  return argmax(logits(features, height, width));
}

ReadoutFit train_linear_readout(const std::vector<Tensor<double>>& features, const std::vector<LabelMap>& labels,
                                const ReadoutConfig& cfg) {
  cfg.validate();
  if (features.size() != labels.size())
    throw DimensionError("readout: " + std::to_string(features.size()) + " feature maps for " +
                         std::to_string(labels.size()) + " label maps");
  if (features.empty()) throw DataError("readout: no training images");
  for (const auto& l : labels)
    for (std::uint8_t v : l.values)
      if (v >= cfg.class_count)
        throw DataError("readout: label id " + std::to_string(v) + " >= class_count " +
                        std::to_string(cfg.class_count));

  const std::size_t k = cfg.class_count, channels = features.front().channels();
  ReadoutFit fit;
  ReadoutHead& head = fit.head;
  head.upsample_logits = cfg.upsample_logits;
  head.stats = cfg.standardize ? FeatureStats::fit(features) : FeatureStats::identity(channels);
  head.weight = Tensor<double>(Shape{k, channels});
  head.bias = Tensor<double>(Shape{k});
  Rng init(derive_seed(cfg.seed, {0x4ead}));
  for (double& w : head.weight.values()) w = normal(init, 0.0, 1.0 / std::sqrt(static_cast<double>(channels)));

  std::vector<Tensor<double>> feats(features.size());
  std::vector<LabelMap> targets(labels.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    feats[i] = head.stats.apply(features[i]);
    targets[i] = cfg.upsample_logits ? labels[i] : nearest_downsample(labels[i], feats[i].height(), feats[i].width());
  }

  const std::size_t n = feats.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total = cfg.epochs * steps_per_epoch;
  Tensor<double> vw(head.weight.shape()), vb(head.bias.shape());
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, {epoch}));
    std::shuffle(order.begin(), order.end(), shuffle);
    double epoch_loss = 0.0, epoch_pixels = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      Tensor<double> gw(head.weight.shape()), gb(head.bias.shape());
      double pixels = 0.0, loss = 0.0;
      for (std::size_t b = s * cfg.batch_size; b < std::min(n, (s + 1) * cfg.batch_size); ++b) {
        const Tensor<double>& f = feats[order[b]];
        const LabelMap& y = targets[order[b]];
        const Tensor<double> small = small_logits(head, f);
        Tensor<double> g_small;
        if (cfg.upsample_logits) {
          const Tensor<double> up = geom::upsample_bilinear(small, y.height, y.width);
          Tensor<double> g_up(up.shape());
          loss += softmax_xent(up, y, g_up);
          g_small = geom::upsample_bilinear_adjoint(g_up, small.height(), small.width());
        } else {
          g_small = Tensor<double>(small.shape());
          loss += softmax_xent(small, y, g_small);
        }
        pixels += static_cast<double>(y.size());
        const std::size_t np = f.plane_size();
        for (std::size_t i = 0; i < k; ++i) {
          const double* gi = g_small.plane(i).data();
          for (std::size_t j = 0; j < channels; ++j) {
            const double* fj = f.plane(j).data();
            double acc = 0.0;
            for (std::size_t p = 0; p < np; ++p) acc += gi[p] * fj[p];
            gw.data()[i * channels + j] += acc;
          }
          double acc = 0.0;
          for (std::size_t p = 0; p < np; ++p) acc += gi[p];
          gb.data()[i] += acc;
        }
      }
      const double lr = train::cosine_lr(step, total, cfg.lr);
      for (std::size_t i = 0; i < gw.numel(); ++i) {
        double& v = vw.data()[i];
        v = cfg.momentum * v + gw.data()[i] / pixels + cfg.weight_decay * head.weight.data()[i];
        head.weight.data()[i] -= lr * v;
      }
      for (std::size_t i = 0; i < gb.numel(); ++i) {
        double& v = vb.data()[i];
        v = cfg.momentum * v + gb.data()[i] / pixels;
        head.bias.data()[i] -= lr * v;
      }
      epoch_loss += loss;
      epoch_pixels += pixels;
    }
    fit.loss_curve.push_back(epoch_loss / epoch_pixels);
  }
  return fit;
}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& truth) {
  if (!pred.same_shape(truth))
    throw DimensionError("confusion: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs truth " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth.values[i] >= class_count || pred.values[i] >= class_count)
      throw DataError("confusion: class id out of range");
    ++at(truth.values[i], pred.values[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.class_count != class_count) throw DimensionError("confusion: class counts differ");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

MiouReport miou_from_confusion(const ConfusionMatrix& cm) {
  MiouReport r;
  r.confusion = cm;
  const std::size_t k = cm.class_count;
  r.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.included.assign(k, false);
  std::uint64_t correct = 0;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    correct += tp;
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    r.included[c] = true;
    sum += r.iou[c];
    ++used;
  }
  r.miou = used ? sum / static_cast<double>(used) : 0.0;
  const std::uint64_t total = cm.total();
  r.pixel_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

MiouReport eval_miou(const LabelMap& pred, const LabelMap& truth, std::size_t class_count) {
  ConfusionMatrix cm(class_count);
  cm.add(pred, truth);
  return miou_from_confusion(cm);
}

MiouReport eval_miou(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& truth, std::size_t class_count) {
  if (pred.size() != truth.size()) throw DimensionError("eval_miou: prediction and truth counts differ");
  ConfusionMatrix cm(class_count);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(pred[i], truth[i]);
  return miou_from_confusion(cm);
}

std::string MiouReport::to_json() const {
  nlohmann::ordered_json j;
  j["miou"] = miou;
  j["pixel_accuracy"] = pixel_accuracy;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < iou.size(); ++c) {
    nlohmann::ordered_json e;
    e["class"] = c;
    e["name"] = synth::class_name(static_cast<std::uint8_t>(c));
    e["iou"] = included[c] ? nlohmann::ordered_json(iou[c]) : nlohmann::ordered_json(nullptr);
    classes.push_back(e);
  }
  j["per_class"] = classes;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < confusion.class_count; ++t) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (std::size_t p = 0; p < confusion.class_count; ++p) row.push_back(confusion.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j.dump(2);
}

LabeledFrames load_labeled_frames(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.jsonl";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  LabeledFrames out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("image") || !j.contains("labels"))
      throw DataError(manifest.string() + ": line without image/labels");
    out.images.push_back(image::read_rgb(dir / j["image"].get<std::string>()));
    out.labels.push_back(image::read_gray(dir / j["labels"].get<std::string>()));
    out.episode.push_back(j.value("episode", std::size_t{0}));
  }
  if (out.images.empty()) throw DataError(manifest.string() + ": no frames");
  return out;
}

std::pair<LabeledFrames, LabeledFrames> split_by_episode(const LabeledFrames& all, double eval_fraction) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must lie in (0, 1)");
  std::vector<std::size_t> eps = all.episode;
  std::sort(eps.begin(), eps.end());
  eps.erase(std::unique(eps.begin(), eps.end()), eps.end());
  if (eps.size() < 2) throw DataError("need at least two episodes to split train and eval");
  const auto n_eval = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(eps.size()))), 1, eps.size() - 1);
  const std::size_t first_eval = eps[eps.size() - n_eval];
  std::pair<LabeledFrames, LabeledFrames> out;
  for (std::size_t i = 0; i < all.images.size(); ++i) {
    LabeledFrames& dst = all.episode[i] >= first_eval ? out.second : out.first;
    dst.images.push_back(all.images[i]);
    dst.labels.push_back(all.labels[i]);
    dst.episode.push_back(all.episode[i]);
  }
  return out;
}

template <std::floating_point T>
ReadoutRun run_readout(const nn::ModelParams<T>& encoder, const LabeledFrames& train_set,
                       const LabeledFrames& eval_set, const ReadoutConfig& cfg) {
  ReadoutRun run;
  const auto train_feats = extract_features(encoder, train_set.images);
  run.fit = train_linear_readout(train_feats, train_set.labels, cfg);
  auto predict_all = [&](const std::vector<Tensor<double>>& feats, const LabeledFrames& set) {
    std::vector<LabelMap> pred(feats.size());
    parallel_for(feats.size(), [&](std::size_t i) {
      pred[i] = run.fit.head.predict(feats[i], set.labels[i].height, set.labels[i].width);
    });
    return pred;
  };
  run.train = eval_miou(predict_all(train_feats, train_set), train_set.labels, cfg.class_count);
  const auto eval_feats = extract_features(encoder, eval_set.images);
  run.eval = eval_miou(predict_all(eval_feats, eval_set), eval_set.labels, cfg.class_count);
  return run;
}

void write_overlay(const std::filesystem::path& path, const Tensor<double>& image, const LabelMap& pred) {
  static constexpr std::array<std::array<double, 3>, 4> kPalette{
      {{0.0, 0.0, 0.0}, {1.0, 0.2, 0.2}, {0.2, 1.0, 0.2}, {0.2, 0.4, 1.0}}};
  if (!pred.same_shape(image.height(), image.width())) throw DimensionError("overlay: label map size mismatch");
  Tensor<double> out = image;
  for (std::size_t y = 0; y < pred.height; ++y)
    for (std::size_t x = 0; x < pred.width; ++x) {
      const std::uint8_t c = pred(y, x);
      if (c == 0) continue;
      const auto& col = c < kPalette.size() ? kPalette[c] : std::array<double, 3>{1.0, 1.0, 0.0};
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(ch, y, x) = 0.5 * out.at(ch, y, x) + 0.5 * col[ch];
    }
  image::write_rgb(path, out);
}

#define FLOWE_READOUT_INSTANTIATE(T)                                                                         \
  template Tensor<double> extract_features(const nn::ModelParams<T>&, const Tensor<double>&);                \
  template std::vector<Tensor<double>> extract_features(const nn::ModelParams<T>&,                           \
                                                        const std::vector<Tensor<double>>&);                 \
  template ReadoutRun run_readout(const nn::ModelParams<T>&, const LabeledFrames&, const LabeledFrames&,      \
                                  const ReadoutConfig&);

FLOWE_READOUT_INSTANTIATE(float)
FLOWE_READOUT_INSTANTIATE(double)

#undef FLOWE_READOUT_INSTANTIATE

}  // namespace flowe::readout
