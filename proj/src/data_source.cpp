#include "flowe/data_source.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "flowe/flo.hpp"
#include "flowe/image_io.hpp"
#include "flowe/rng.hpp"
#include "flowe/synthvid.hpp"

namespace flowe::train {

InMemorySource::InMemorySource(std::vector<FrameTriple> triples, double flow_noise_sigma, std::uint64_t noise_seed)
    : triples_(std::move(triples)), noise_sigma_(flow_noise_sigma), noise_seed_(noise_seed) {
  if (!(noise_sigma_ >= 0.0)) throw ConfigError("flow noise sigma must be >= 0");
  for (std::size_t i = 0; i < triples_.size(); ++i) {
    FrameTriple& t = triples_[i];
    t.flow.check();
    if (t.first.shape() != t.second.shape() || t.first.height() != t.flow.height() ||
        t.first.width() != t.flow.width())
      throw DimensionError("frame pair " + std::to_string(i) + ": frames " + t.first.shape().str() + " / " +
                           t.second.shape().str() + " vs flow " + std::to_string(t.flow.height()) + "x" +
                           std::to_string(t.flow.width()));
    if (noise_sigma_ > 0.0) {
      Rng rng(derive_seed(noise_seed_, {i}));
      t.flow = synth::add_flow_noise(t.flow, noise_sigma_, rng);
    }
  }
}

FrameTriple InMemorySource::draw(std::uint64_t key) const {
  if (triples_.empty()) throw DataError("draw from an empty data source");
  return triples_[mix64(key) % triples_.size()];
}

std::string InMemorySource::describe() const {
  std::ostringstream os;
  os << triples_.size() << " frame pairs";
  if (!triples_.empty()) os << " of " << triples_.front().first.height() << "x" << triples_.front().first.width();
  if (noise_sigma_ > 0.0) os << ", flow noise sigma " << noise_sigma_;
  return os.str();
}

namespace {

geom::FlowField with_occlusion(geom::FlowField flow, const Grid<std::uint8_t>& occ, const std::filesystem::path& p) {
  if (!occ.same_shape(flow.height(), flow.width())) throw DataError(p.string() + ": occlusion mask size mismatch");
  for (std::size_t i = 0; i < occ.size(); ++i) flow.valid.values[i] = occ.values[i] ? 0 : 1;
  return flow;
}

std::vector<FrameTriple> load_manifest(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.jsonl";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  std::vector<FrameTriple> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": not a JSON object");
    if (!j.contains("flow")) continue;
    FrameTriple t;
    t.first = image::read_rgb(dir / j.at("image").get<std::string>());
    t.second = image::read_rgb(dir / j.at("next").get<std::string>());
    t.flow = flo::read_file(dir / j.at("flow").get<std::string>());
    if (j.contains("occlusion")) {
      const auto occ_path = dir / j.at("occlusion").get<std::string>();
      t.flow = with_occlusion(std::move(t.flow), image::read_gray(occ_path), occ_path);
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::filesystem::path> sorted_with_ext(const std::filesystem::path& dir,
                                                   std::initializer_list<const char*> exts) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    for (const char* x : exts)
      if (ext == x) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<FrameTriple> load_frame_pairs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  if (std::filesystem::exists(dir / "manifest.jsonl")) return load_manifest(dir);

  const auto frames = sorted_with_ext(dir, {".png", ".ppm"});
  const auto flows = sorted_with_ext(dir, {".flo"});
  if (flows.empty()) throw DataError(dir.string() + ": no .flo files");
  if (frames.size() != flows.size() + 1)
    throw DataError(dir.string() + ": expected " + std::to_string(flows.size() + 1) + " frames for " +
                    std::to_string(flows.size()) + " flow files, found " + std::to_string(frames.size()));
  std::vector<FrameTriple> out;
  for (std::size_t i = 0; i < flows.size(); ++i)
    out.push_back({image::read_rgb(frames[i]), image::read_rgb(frames[i + 1]), flo::read_file(flows[i])});
  return out;
}

}  // namespace flowe::train
