#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "otoc/scene.hpp"

namespace otoc::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("otoc_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Uniform random cloud in a box of side `extent`, random colors, no ground truth.
inline PointCloud random_cloud(size_t n, uint64_t seed, double extent = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, static_cast<float>(extent));
  std::uniform_int_distribution<int> c(0, 255);
  PointCloud cloud;
  cloud.sceneId = "random";
  for (size_t i = 0; i < n; ++i) {
    cloud.positions.emplace_back(u(rng), u(rng), u(rng));
    cloud.colors.push_back({static_cast<uint8_t>(c(rng)), static_cast<uint8_t>(c(rng)), static_cast<uint8_t>(c(rng))});
  }
  return cloud;
}

/// Cloud from explicit positions, all gray.
inline PointCloud cloud_of(std::initializer_list<Eigen::Vector3f> pts) {
  PointCloud cloud;
  cloud.sceneId = "manual";
  for (const auto& p : pts) {
    cloud.positions.push_back(p);
    cloud.colors.push_back({128, 128, 128});
  }
  return cloud;
}

}  // namespace otoc::testing
