#pragma once

// Middlebury .flo interchange format:
//   offset 0   float32  magic 202021.25
//   offset 4   int32    width
//   offset 8   int32    height
//   offset 12  float32  (u, v) interleaved, row-major, width * height pairs
// All fields little-endian. Files carry no validity plane; reads mark every
// pixel valid.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flowe/geometry.hpp"

namespace flowe::flo {

inline constexpr float kMagic = 202021.25f;
inline constexpr std::size_t kHeaderBytes = 12;

geom::FlowField read(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write(const geom::FlowField& flow);

geom::FlowField read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const geom::FlowField& flow);

}  // namespace flowe::flo
