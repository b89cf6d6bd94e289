#pragma once

// Binary checkpoint, little-endian:
//   "FLWE" | u32 version | u64 arch_hash | u64 step | u8 scalar_bytes (4|8)
//   | u8 flags (bit0 target, bit1 velocity) | u16 reserved
//   | online weight blocks | target blocks | velocity blocks
// Blocks follow layer order (encoder, projector, predictor), weight before
// bias. Target blocks cover encoder and projector only.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "flowe/network.hpp"

namespace flowe::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public FormatError {
 public:
  enum class Kind { bad_magic, version_mismatch, arch_mismatch, truncated, malformed };
  CheckpointError(Kind kind, const std::string& what, std::size_t offset) : FormatError(what, offset), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

template <std::floating_point T>
struct Checkpoint {
  ModelParams<T> online;
  std::optional<ModelParams<T>> target;
  std::optional<ModelParams<T>> velocity;
  std::uint64_t step = 0;
};

template <std::floating_point T>
std::vector<std::uint8_t> save_checkpoint(const Checkpoint<T>& ckpt);

/// Rebuilds the checkpoint for `arch`; values stored at the other precision
/// are converted.
template <std::floating_point T>
Checkpoint<T> load_checkpoint(std::span<const std::uint8_t> bytes, const ArchSpec& arch);

template <std::floating_point T>
void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint<T>& ckpt);
template <std::floating_point T>
Checkpoint<T> load_checkpoint_file(const std::filesystem::path& path, const ArchSpec& arch);

/// FNV-1a over every weight byte; used to show frozen parameters stay frozen.
template <std::floating_point T>
std::uint64_t params_digest(const ModelParams<T>& params);

}  // namespace flowe::nn
