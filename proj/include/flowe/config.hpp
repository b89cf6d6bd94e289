#pragma once

// Run configuration: one JSON document with sections augment, trainer,
// synthvid, readout and network, plus seed, out_dir and precision. Every
// field has a default, unknown keys are rejected, and dotted overrides
// (trainer.base_lr=0.05) apply on top of the file.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowe/augment.hpp"
#include "flowe/network.hpp"
#include "flowe/readout.hpp"
#include "flowe/synthvid.hpp"
#include "flowe/trainer.hpp"

namespace flowe {

struct NetworkConfig {
  std::vector<std::size_t> encoder_channels{16, 32, 64};  // stride-2 3x3 stages
  std::size_t dilated_channels = 64;                      // final dilated 3x3
  std::size_t projector_hidden = 64;
  std::size_t embedding = 32;
  std::size_t predictor_hidden = 32;
  // Instance statistics keep the desk model from collapsing; see README.
  nn::Norm encoder_norm = nn::Norm::per_channel;
  nn::Norm head_norm = nn::Norm::per_channel;

  nn::ArchSpec arch() const;
};

struct RunConfig {
  aug::AugmentConfig augment;
  train::TrainConfig trainer;
  synth::DatasetConfig synthvid;
  readout::ReadoutConfig readout;
  NetworkConfig network;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  int precision = 32;

  /// Copies the global seed into every section and validates all of them.
  void resolve();
  /// Pretty-printed JSON holding every field.
  std::string to_json() const;
};

/// Parses a config document over the defaults; throws ConfigError naming the
/// offending key for unknown keys or wrong value types.
RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace flowe
