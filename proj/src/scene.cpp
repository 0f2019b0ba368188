#include "otoc/scene.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <unordered_map>

namespace otoc {

namespace {

bool g_verbose = true;

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<uint8_t>& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out_.insert(out_.end(), raw, raw + sizeof(T));
  }

 private:
  std::vector<uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<uint8_t>& in) : in_(in) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > in_.size()) throw Error("truncated scene file");
    uint8_t raw[sizeof(T)];
    std::memcpy(raw, in_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  size_t remaining() const { return in_.size() - pos_; }

 private:
  const std::vector<uint8_t>& in_;
  size_t pos_ = 0;
};

}  // namespace

void log_warning(const std::string& message) { std::cerr << "warning: " << message << "\n"; }

void log_info(const std::string& message) {
  if (g_verbose) std::cerr << message << "\n";
}

void set_verbose(bool verbose) { g_verbose = verbose; }

void validate_cloud(const PointCloud& cloud) {
  const size_t n = cloud.size();
  if (n == 0) throw Error("empty cloud");
  if (cloud.colors.size() != n) throw Error("colors length mismatch");
  for (const auto& p : cloud.positions) {
    if (!p.allFinite()) throw Error("non-finite position");
  }
  if (cloud.semanticGt && cloud.semanticGt->size() != n) throw Error("semanticGt length mismatch");
  if (cloud.instanceGt) {
    if (cloud.instanceGt->size() != n) throw Error("instanceGt length mismatch");
    if (!cloud.semanticGt) throw Error("instanceGt without semanticGt");
    std::unordered_map<int32_t, int32_t> category_of;
    for (size_t i = 0; i < n; ++i) {
      const int32_t inst = (*cloud.instanceGt)[i];
      if (inst == kUnlabeled) continue;
      const int32_t cat = (*cloud.semanticGt)[i];
      auto [it, inserted] = category_of.emplace(inst, cat);
      if (!inserted && it->second != cat) {
        throw Error("instance " + std::to_string(inst) + " spans several categories");
      }
    }
  }
}

std::vector<uint8_t> encode_scene(const PointCloud& cloud) {
  validate_cloud(cloud);
  const uint64_t n = cloud.size();
  uint16_t flags = 0;
  if (cloud.semanticGt) flags |= kFlagSemantic;
  if (cloud.instanceGt) flags |= kFlagInstance;

  std::vector<uint8_t> bytes;
  bytes.reserve(kSceneHeaderBytes + n * (12 + 3 + 8));
  bytes.insert(bytes.end(), {'O', 'T', 'O', 'C'});
  ByteWriter w(bytes);
  w.put<uint16_t>(kSceneVersion);
  w.put<uint16_t>(flags);
  w.put<uint64_t>(n);
  for (const auto& p : cloud.positions) {
    w.put<float>(p.x());
    w.put<float>(p.y());
    w.put<float>(p.z());
  }
  for (const auto& c : cloud.colors) bytes.insert(bytes.end(), c.begin(), c.end());
  if (cloud.semanticGt) {
    for (int32_t v : *cloud.semanticGt) w.put<int32_t>(v);
  }
  if (cloud.instanceGt) {
    for (int32_t v : *cloud.instanceGt) w.put<int32_t>(v);
  }
  return bytes;
}

PointCloud decode_scene(const std::vector<uint8_t>& bytes, std::string sceneId) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "OTOC", 4) != 0) throw Error("bad magic");
  if (bytes.size() < kSceneHeaderBytes) throw Error("truncated scene file");
  ByteReader r(bytes);
  r.get<uint32_t>();
  const auto version = r.get<uint16_t>();
  if (version != kSceneVersion) throw Error("unsupported scene version " + std::to_string(version));
  const auto flags = r.get<uint16_t>();
  if (flags & ~(kFlagSemantic | kFlagInstance)) throw Error("unknown scene flags");
  const auto n = r.get<uint64_t>();

  const uint64_t per_point = 12 + 3 + ((flags & kFlagSemantic) ? 4 : 0) + ((flags & kFlagInstance) ? 4 : 0);
  if (n != 0 && r.remaining() / per_point < n) throw Error("truncated scene file");
  if (r.remaining() != n * per_point) {
    throw Error(r.remaining() < n * per_point ? "truncated scene file" : "trailing bytes in scene file");
  }

  PointCloud cloud;
  cloud.sceneId = std::move(sceneId);
  cloud.positions.resize(n);
  cloud.colors.resize(n);
  for (auto& p : cloud.positions) {
    const float x = r.get<float>(), y = r.get<float>(), z = r.get<float>();
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) throw Error("NaN or infinite position");
    p = {x, y, z};
  }
  for (auto& c : cloud.colors) {
    for (auto& ch : c) ch = r.get<uint8_t>();
  }
  if (flags & kFlagSemantic) {
    cloud.semanticGt.emplace(n);
    for (auto& v : *cloud.semanticGt) v = r.get<int32_t>();
  }
  if (flags & kFlagInstance) {
    cloud.instanceGt.emplace(n);
    for (auto& v : *cloud.instanceGt) v = r.get<int32_t>();
  }
  validate_cloud(cloud);
  return cloud;
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void save_scene(const PointCloud& cloud, const std::filesystem::path& path) {
  write_file_bytes(path, encode_scene(cloud));
}

PointCloud load_scene(const std::filesystem::path& path) {
  return decode_scene(read_file_bytes(path), path.stem().string());
}

std::vector<std::string> validate_annotation(const PointCloud& cloud, const ClickAnnotation& ann) {
  std::vector<std::string> warnings;
  if (!ann.sceneId.empty() && !cloud.sceneId.empty() && ann.sceneId != cloud.sceneId) {
    warnings.push_back("scene mismatch: annotation for '" + ann.sceneId + "', cloud '" + cloud.sceneId + "'");
  }
  std::set<int32_t> instances;
  std::set<int64_t> points;
  for (size_t k = 0; k < ann.clicks.size(); ++k) {
    const Click& c = ann.clicks[k];
    const std::string where = "click " + std::to_string(k) + ": ";
    if (c.pointIndex < 0 || static_cast<uint64_t>(c.pointIndex) >= cloud.size()) {
      warnings.push_back(where + "index out of range (" + std::to_string(c.pointIndex) + ")");
    }
    if (c.categoryId < 0) warnings.push_back(where + "negative category");
    if (!instances.insert(c.instanceId).second) {
      warnings.push_back(where + "duplicate instance " + std::to_string(c.instanceId));
    }
    if (!points.insert(c.pointIndex).second) {
      warnings.push_back(where + "duplicate point " + std::to_string(c.pointIndex));
    }
  }
  return warnings;
}

nlohmann::json annotation_to_json(const ClickAnnotation& ann) {
  nlohmann::json clicks = nlohmann::json::array();
  for (const auto& c : ann.clicks) {
    clicks.push_back({{"point", c.pointIndex}, {"category", c.categoryId}, {"instance", c.instanceId}});
  }
  return {{"scene", ann.sceneId}, {"clicks", clicks}};
}

ClickAnnotation annotation_from_json(const nlohmann::json& j) {
  try {
    ClickAnnotation ann;
    ann.sceneId = j.at("scene").get<std::string>();
    for (const auto& c : j.at("clicks")) {
      ann.clicks.push_back({c.at("point").get<int64_t>(), c.at("category").get<int32_t>(),
                            c.at("instance").get<int32_t>()});
    }
    return ann;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed annotation: ") + e.what());
  }
}

void save_annotation(const ClickAnnotation& ann, const std::filesystem::path& path) {
  write_json_file(path, annotation_to_json(ann));
}

ClickAnnotation load_annotation(const std::filesystem::path& path) {
  return annotation_from_json(read_json_file(path));
}

}  // namespace otoc
