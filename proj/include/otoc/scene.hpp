#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "otoc/common.hpp"

namespace otoc {

using Rgb = std::array<uint8_t, 3>;

/// A scanned or synthetic scene. Positions are stored in single precision,
/// matching the on-disk format, so save/load is exact.
struct PointCloud {
  std::vector<Eigen::Vector3f> positions;
  std::vector<Rgb> colors;
  std::optional<std::vector<int32_t>> semanticGt;
  std::optional<std::vector<int32_t>> instanceGt;
  std::string sceneId;

  size_t size() const { return positions.size(); }
  bool operator==(const PointCloud&) const = default;
};

/// Throws Error describing the first violated invariant.
void validate_cloud(const PointCloud& cloud);

struct Click {
  int64_t pointIndex = 0;
  int32_t categoryId = 0;
  int32_t instanceId = 0;
  bool operator==(const Click&) const = default;
};

struct ClickAnnotation {
  std::string sceneId;
  std::vector<Click> clicks;
  bool operator==(const ClickAnnotation&) const = default;
};

// Native binary scene file: "OTOC" | u16 version | u16 flags | u64 count |
// f32 positions | u8 colors | [i32 semantic] | [i32 instance], little-endian.
inline constexpr uint16_t kSceneVersion = 1;
inline constexpr uint16_t kFlagSemantic = 1u << 0;
inline constexpr uint16_t kFlagInstance = 1u << 1;
inline constexpr size_t kSceneHeaderBytes = 16;

std::vector<uint8_t> encode_scene(const PointCloud& cloud);
/// `sceneId` is not part of the binary format; callers supply it.
PointCloud decode_scene(const std::vector<uint8_t>& bytes, std::string sceneId);

void save_scene(const PointCloud& cloud, const std::filesystem::path& path);
/// The scene id of the loaded cloud is the file stem.
PointCloud load_scene(const std::filesystem::path& path);

PointCloud import_ply(const std::filesystem::path& path);
PointCloud parse_ply(const std::string& bytes, std::string sceneId);

/// Diagnostics only; never throws.
std::vector<std::string> validate_annotation(const PointCloud& cloud, const ClickAnnotation& ann);

nlohmann::json annotation_to_json(const ClickAnnotation& ann);
ClickAnnotation annotation_from_json(const nlohmann::json& j);
void save_annotation(const ClickAnnotation& ann, const std::filesystem::path& path);
ClickAnnotation load_annotation(const std::filesystem::path& path);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace otoc
