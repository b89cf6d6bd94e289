#pragma once

// Frame-pair providers for training. A draw is a pure function of its key,
// so a run can be resumed at any step without replaying earlier draws.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "flowe/geometry.hpp"

namespace flowe::train {

struct FrameTriple {
  Tensor<double> first;
  Tensor<double> second;
  geom::FlowField flow;  // first -> second, with validity
};

class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual FrameTriple draw(std::uint64_t key) const = 0;
  virtual std::size_t size() const = 0;
  virtual std::string describe() const = 0;
};

/// Uniform choice among stored triples. With flow_noise_sigma > 0 every
/// stored flow gets one fixed noise realization (seeded by noise_seed and its
/// index), standing in for a less accurate flow estimator.
class InMemorySource final : public DataSource {
 public:
  explicit InMemorySource(std::vector<FrameTriple> triples, double flow_noise_sigma = 0.0,
                          std::uint64_t noise_seed = 0);

  FrameTriple draw(std::uint64_t key) const override;
  std::size_t size() const override { return triples_.size(); }
  std::string describe() const override;
  const std::vector<FrameTriple>& triples() const noexcept { return triples_; }

 private:
  std::vector<FrameTriple> triples_;
  double noise_sigma_;
  std::uint64_t noise_seed_;
};

/// Loads frame pairs from disk: a generated dataset (manifest.jsonl with
/// occlusion masks as validity) or a plain directory of frames plus .flo
/// files, where sorted frame i and i+1 pair with sorted flow file i.
std::vector<FrameTriple> load_frame_pairs(const std::filesystem::path& dir);

}  // namespace flowe::train
