#pragma once

// Frozen-encoder evaluation: encoder features at stride 8, a single 1x1
// convolution trained with softmax cross-entropy, and per-class IoU.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowe/network.hpp"

namespace flowe::readout {

struct ReadoutConfig {
  std::size_t epochs = 30;
  double lr = 0.5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::size_t class_count = 4;
  /// Checkpoint path, or "random" for the run's initial weights.
  std::string encoder_checkpoint = "random";
  /// true: bilinear-upsample logits to label resolution; false: train and
  /// predict on the feature grid with nearest-sampled labels.
  bool upsample_logits = true;
  /// Per-channel feature standardization with training-set statistics.
  bool standardize = true;
  /// Fraction of episodes (the last ones) held out for evaluation.
  double eval_fraction = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Encoder output in double precision; the parameters are only read.
template <std::floating_point T>
Tensor<double> extract_features(const nn::ModelParams<T>& encoder, const Tensor<double>& image);
template <std::floating_point T>
std::vector<Tensor<double>> extract_features(const nn::ModelParams<T>& encoder, const std::vector<Tensor<double>>& images);

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> inv_std;  // 1 / max(std, 1e-6)

  static FeatureStats identity(std::size_t channels);
  static FeatureStats fit(const std::vector<Tensor<double>>& features);
  Tensor<double> apply(const Tensor<double>& f) const;
};

struct ReadoutHead {
  Tensor<double> weight;  // classes x channels
  Tensor<double> bias;    // classes
  FeatureStats stats;
  bool upsample_logits = true;

  /// Class scores on the label grid (height x width).
  Tensor<double> logits(const Tensor<double>& features, std::size_t height, std::size_t width) const;
  LabelMap predict(const Tensor<double>& features, std::size_t height, std::size_t width) const;
};

struct ReadoutFit {
  ReadoutHead head;
  std::vector<double> loss_curve;  // mean training loss per epoch
};

/// Trains the head on frozen features. Throws DataError for a label id
/// >= class_count and DimensionError for mismatched counts.
ReadoutFit train_linear_readout(const std::vector<Tensor<double>>& features, const std::vector<LabelMap>& labels,
                                const ReadoutConfig& cfg);

struct ConfusionMatrix {
  std::size_t class_count = 0;
  std::vector<std::uint64_t> counts;  // row = truth, column = prediction

  explicit ConfusionMatrix(std::size_t classes = 0) : class_count(classes), counts(classes * classes, 0) {}
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * class_count + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * class_count + pred]; }
  void add(const LabelMap& pred, const LabelMap& truth);
  void merge(const ConfusionMatrix& other);
  std::uint64_t total() const noexcept;
};

struct MiouReport {
  std::vector<double> iou;       // NaN for classes absent from truth and prediction
  std::vector<bool> included;
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  ConfusionMatrix confusion;

  std::string to_json() const;
};

MiouReport miou_from_confusion(const ConfusionMatrix& cm);
MiouReport eval_miou(const LabelMap& pred, const LabelMap& truth, std::size_t class_count);
MiouReport eval_miou(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& truth, std::size_t class_count);

struct LabeledFrames {
  std::vector<Tensor<double>> images;
  std::vector<LabelMap> labels;
  std::vector<std::size_t> episode;
};

/// Every frame of a generated dataset (manifest.jsonl), in manifest order.
LabeledFrames load_labeled_frames(const std::filesystem::path& dir);

/// Splits by episode: the last ceil(fraction * episodes) episodes form the
/// evaluation part.
std::pair<LabeledFrames, LabeledFrames> split_by_episode(const LabeledFrames& all, double eval_fraction);

struct ReadoutRun {
  ReadoutFit fit;
  MiouReport train;
  MiouReport eval;
};

/// Features, head training and evaluation for one encoder.
template <std::floating_point T>
ReadoutRun run_readout(const nn::ModelParams<T>& encoder, const LabeledFrames& train_set,
                       const LabeledFrames& eval_set, const ReadoutConfig& cfg);

/// Frame with its predicted classes blended in a fixed palette.
void write_overlay(const std::filesystem::path& path, const Tensor<double>& image, const LabelMap& pred);

}  // namespace flowe::readout
