#include "flowe/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowe/bytes.hpp"

namespace flowe::image {

namespace {

bool has_extension(const std::filesystem::path& p, const char* ext) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e == ext;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, std::size_t channels,
                                   std::size_t& height, std::size_t& width) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  height = img.height;
  width = img.width;
  if (buf.size() != height * width * channels) throw IoError("unexpected PNG buffer size: " + path.string());
  return buf;
}

void write_png(const std::filesystem::path& path, png_uint_32 format, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& buf) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

// Binary PPM (P6, maxval 255).
std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  const std::vector<std::uint8_t> data = bytes::read_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() {
    std::string tok;
    while (pos < data.size()) {
      const char c = static_cast<char>(data[pos]);
      if (c == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        ++pos;
      } else {
        tok += c;
        ++pos;
      }
    }
    return tok;
  };
  if (next_token() != "P6") throw IoError("not a binary PPM (P6): " + path.string());
  const long w = std::stol(next_token()), h = std::stol(next_token()), maxval = std::stol(next_token());
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported PPM header in " + path.string());
  ++pos;  // single whitespace byte after maxval
  width = static_cast<std::size_t>(w);
  height = static_cast<std::size_t>(h);
  if (data.size() < pos + width * height * 3) throw IoError("truncated PPM payload: " + path.string());
  return {data.begin() + static_cast<std::ptrdiff_t>(pos),
          data.begin() + static_cast<std::ptrdiff_t>(pos + width * height * 3)};
}

}  // namespace

Tensor<double> read_rgb(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const std::vector<std::uint8_t> buf =
      has_extension(path, ".ppm") ? read_ppm(path, h, w) : read_png(path, PNG_FORMAT_RGB, 3, h, w);
  Tensor<double> img = feature_map<double>(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[(y * w + x) * 3 + c] / 255.0;
  return img;
}

void write_rgb(const std::filesystem::path& path, const Tensor<double>& img) {
  require_feature_map(img, "write_rgb");
  if (img.channels() != 3) throw DimensionError("write_rgb expects 3 channels, got " + img.shape().str());
  const std::size_t h = img.height(), w = img.width();
  std::vector<std::uint8_t> buf(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) buf[(y * w + x) * 3 + c] = to_byte(img.at(c, y, x));
  if (has_extension(path, ".ppm")) {
    std::ostringstream header;
    header << "P6\n" << w << " " << h << "\n255\n";
    const std::string hs = header.str();
    std::vector<std::uint8_t> data(hs.begin(), hs.end());
    data.insert(data.end(), buf.begin(), buf.end());
    bytes::write_file(path, data);
    return;
  }
  write_png(path, PNG_FORMAT_RGB, h, w, buf);
}

Grid<std::uint8_t> read_gray(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> buf = read_png(path, PNG_FORMAT_GRAY, 1, h, w);
  Grid<std::uint8_t> g;
  g.height = h;
  g.width = w;
  g.values = std::move(buf);
  return g;
}

void write_gray(const std::filesystem::path& path, const Grid<std::uint8_t>& plane) {
  if (plane.size() == 0) throw DimensionError("write_gray: empty plane");
  write_png(path, PNG_FORMAT_GRAY, plane.height, plane.width, plane.values);
}

}  // namespace flowe::image
