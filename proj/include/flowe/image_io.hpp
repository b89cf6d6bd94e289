#pragma once

// 8-bit image files. Color images load as 3 x H x W tensors with values in
// [0, 1]; grayscale inputs are replicated to three channels.

#include <cstdint>
#include <filesystem>

#include "flowe/tensor.hpp"

namespace flowe::image {

Tensor<double> read_rgb(const std::filesystem::path& path);
/// Values are clamped to [0, 1] and rounded to 8 bits. Format follows the
/// extension (.png or .ppm).
void write_rgb(const std::filesystem::path& path, const Tensor<double>& img);

/// Single-channel 8-bit PNG, used for label and mask planes.
Grid<std::uint8_t> read_gray(const std::filesystem::path& path);
void write_gray(const std::filesystem::path& path, const Grid<std::uint8_t>& plane);

}  // namespace flowe::image
