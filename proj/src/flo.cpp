#include "flowe/flo.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "flowe/bytes.hpp"

namespace flowe {

namespace bytes {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return data;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace bytes

namespace flo {

geom::FlowField read(std::span<const std::uint8_t> data) {
  bytes::Reader r(data);
  const float magic = r.get<float>("magic");
  if (magic != kMagic) throw FormatError("bad .flo magic " + std::to_string(magic), 0);
  const std::int32_t width = r.get<std::int32_t>("width");
  const std::int32_t height = r.get<std::int32_t>("height");
  if (width <= 0 || height <= 0)
    throw FormatError("non-positive .flo dimensions " + std::to_string(width) + "x" + std::to_string(height), 4);
  const std::uint64_t pixels = static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height);
  if (r.remaining() / 8 < pixels)
    throw FormatError("truncated .flo payload: need " + std::to_string(pixels * 8) + " bytes, have " +
                          std::to_string(r.remaining()),
                      r.offset() + r.remaining());
  geom::FlowField flow(static_cast<std::size_t>(height), static_cast<std::size_t>(width));
  for (std::size_t i = 0; i < pixels; ++i) {
    flow.u.values[i] = r.get<float>("u");
    flow.v.values[i] = r.get<float>("v");
  }
  return flow;
}

std::vector<std::uint8_t> write(const geom::FlowField& flow) {
  flow.check();
  constexpr auto max_dim = static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max());
  if (flow.width() > max_dim || flow.height() > max_dim) throw DimensionError(".flo dimensions exceed int32");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + flow.u.size() * 8);
  bytes::put(out, kMagic);
  bytes::put(out, static_cast<std::int32_t>(flow.width()));
  bytes::put(out, static_cast<std::int32_t>(flow.height()));
  for (std::size_t i = 0; i < flow.u.size(); ++i) {
    bytes::put(out, static_cast<float>(flow.u.values[i]));
    bytes::put(out, static_cast<float>(flow.v.values[i]));
  }
  return out;
}

geom::FlowField read_file(const std::filesystem::path& path) { return read(bytes::read_file(path)); }

void write_file(const std::filesystem::path& path, const geom::FlowField& flow) {
  bytes::write_file(path, write(flow));
}

}  // namespace flo
}  // namespace flowe
