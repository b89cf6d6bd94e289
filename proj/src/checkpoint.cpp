#include "flowe/checkpoint.hpp"

#include <cstring>

#include "flowe/bytes.hpp"

namespace flowe::nn {

namespace {

constexpr char kMagic[4] = {'F', 'L', 'W', 'E'};
constexpr std::uint8_t kHasTarget = 1, kHasVelocity = 2;

template <std::floating_point T>
void put_params(std::vector<std::uint8_t>& out, const ModelParams<T>& p) {
  p.for_each_tensor([&out](Part, std::size_t, bool, const Tensor<T>& t) {
    for (T v : t.values()) bytes::put(out, v);
  });
}

template <std::floating_point Stored, std::floating_point T>
void get_params(bytes::Reader& r, ModelParams<T>& p) {
  p.for_each_tensor([&r](Part, std::size_t, bool, Tensor<T>& t) {
    for (T& v : t.values()) v = static_cast<T>(r.get<Stored>("weight block"));
  });
}

CheckpointError truncated(const FormatError& e) {
  return CheckpointError(CheckpointError::Kind::truncated, e.what(), e.offset());
}

}  // namespace

template <std::floating_point T>
std::vector<std::uint8_t> save_checkpoint(const Checkpoint<T>& ckpt) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  bytes::put(out, kCheckpointVersion);
  bytes::put(out, ckpt.online.arch_hash);
  bytes::put(out, ckpt.step);
  bytes::put(out, static_cast<std::uint8_t>(sizeof(T)));
  std::uint8_t flags = 0;
  if (ckpt.target) flags |= kHasTarget;
  if (ckpt.velocity) flags |= kHasVelocity;
  bytes::put(out, flags);
  bytes::put(out, std::uint16_t{0});
  put_params(out, ckpt.online);
  if (ckpt.target) {
    if (ckpt.target->arch_hash != ckpt.online.arch_hash) throw DimensionError("save_checkpoint: target arch differs");
    put_params(out, *ckpt.target);
  }
  if (ckpt.velocity) put_params(out, *ckpt.velocity);
  return out;
}

template <std::floating_point T>
Checkpoint<T> load_checkpoint(std::span<const std::uint8_t> data, const ArchSpec& arch) {
  bytes::Reader r(data);
  if (data.size() < 4)
    throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint shorter than its magic", data.size());
  if (std::memcmp(data.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a FLWE checkpoint", 0);
  try {
    for (int i = 0; i < 4; ++i) r.get<std::uint8_t>("magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
      throw CheckpointError(CheckpointError::Kind::version_mismatch,
                            "unsupported checkpoint version " + std::to_string(version), 4);
    const auto hash = r.get<std::uint64_t>("arch_hash");
    if (hash != arch.hash())
      throw CheckpointError(CheckpointError::Kind::arch_mismatch, "checkpoint architecture hash does not match", 8);
    Checkpoint<T> ckpt;
    ckpt.step = r.get<std::uint64_t>("step");
    const auto scalar_bytes = r.get<std::uint8_t>("scalar width");
    if (scalar_bytes != 4 && scalar_bytes != 8)
      throw CheckpointError(CheckpointError::Kind::malformed, "invalid scalar width " + std::to_string(scalar_bytes),
                            r.offset() - 1);
    const auto flags = r.get<std::uint8_t>("flags");
    r.get<std::uint16_t>("reserved");

    auto read_block = [&](ModelParams<T>& p) {
      if (scalar_bytes == 4)
        get_params<float>(r, p);
      else
        get_params<double>(r, p);
    };
    ckpt.online = init_params<T>(0, arch);
    read_block(ckpt.online);
    if (flags & kHasTarget) {
      ckpt.target = ckpt.online.target_copy();
      read_block(*ckpt.target);
    }
    if (flags & kHasVelocity) {
      ckpt.velocity = ckpt.online.zeros_like();
      read_block(*ckpt.velocity);
    }
    if (r.remaining() != 0)
      throw CheckpointError(CheckpointError::Kind::malformed, "trailing bytes after checkpoint payload", r.offset());
    return ckpt;
  } catch (const CheckpointError&) {
    throw;
  } catch (const FormatError& e) {
    throw truncated(e);
  }
}

template <std::floating_point T>
void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  bytes::write_file(path, save_checkpoint(ckpt));
}

template <std::floating_point T>
Checkpoint<T> load_checkpoint_file(const std::filesystem::path& path, const ArchSpec& arch) {
  return load_checkpoint<T>(bytes::read_file(path), arch);
}

template <std::floating_point T>
std::uint64_t params_digest(const ModelParams<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  params.for_each_tensor([&h](Part, std::size_t, bool, const Tensor<T>& t) {
    const auto* b = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  });
  return h;
}

#define FLOWE_CKPT_INSTANTIATE(T)                                                                   \
  template std::vector<std::uint8_t> save_checkpoint(const Checkpoint<T>&);                           \
  template Checkpoint<T> load_checkpoint<T>(std::span<const std::uint8_t>, const ArchSpec&);          \
  template void save_checkpoint_file(const std::filesystem::path&, const Checkpoint<T>&);             \
  template Checkpoint<T> load_checkpoint_file<T>(const std::filesystem::path&, const ArchSpec&);      \
  template std::uint64_t params_digest(const ModelParams<T>&);

FLOWE_CKPT_INSTANTIATE(float)
FLOWE_CKPT_INSTANTIATE(double)

#undef FLOWE_CKPT_INSTANTIATE

}  // namespace flowe::nn
