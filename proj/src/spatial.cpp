#include "otoc/spatial.hpp"

#include <algorithm>
#include <cmath>

namespace otoc {

SpatialGrid::SpatialGrid(std::span<const Vec3> points, double cellSize) : points_(points), cellSize_(cellSize) {
  if (!(cellSize > 0.0)) throw Error("grid cell size must be positive");
  cells_.reserve(points.size() / 4 + 1);
  for (size_t i = 0; i < points.size(); ++i) {
    const auto c = cell_of(points[i]);
    cells_[key(c[0], c[1], c[2])].push_back(static_cast<int>(i));
  }
}

SpatialGrid::Cell SpatialGrid::cell_of(const Vec3& p) const {
  return {static_cast<int64_t>(std::floor(p.x() / cellSize_)), static_cast<int64_t>(std::floor(p.y() / cellSize_)),
          static_cast<int64_t>(std::floor(p.z() / cellSize_))};
}

uint64_t SpatialGrid::key(int64_t x, int64_t y, int64_t z) {
  // 21 bits per axis, two's complement wrapped.
  constexpr uint64_t mask = (1ull << 21) - 1;
  return (static_cast<uint64_t>(x) & mask) | ((static_cast<uint64_t>(y) & mask) << 21) |
         ((static_cast<uint64_t>(z) & mask) << 42);
}

std::vector<int> SpatialGrid::radius(const Vec3& q, double r) const {
  std::vector<int> out;
  for_each_in_radius(q, r, [&](int idx) { out.push_back(idx); });
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> SpatialGrid::knn(const Vec3& q, int k) const {
  const size_t want = std::min<size_t>(static_cast<size_t>(std::max(k, 0)), points_.size());
  if (want == 0) return {};
  const auto center = cell_of(q);
  std::vector<std::pair<double, int>> found;
  for (int64_t ring = 0;; ++ring) {
    // Visit the shell of cells at Chebyshev distance `ring`.
    for (int64_t x = -ring; x <= ring; ++x)
      for (int64_t y = -ring; y <= ring; ++y)
        for (int64_t z = -ring; z <= ring; ++z) {
          if (std::max({std::abs(x), std::abs(y), std::abs(z)}) != ring) continue;
          auto it = cells_.find(key(center[0] + x, center[1] + y, center[2] + z));
          if (it == cells_.end()) continue;
          for (int idx : it->second) found.emplace_back((points_[idx] - q).squaredNorm(), idx);
        }
    if (found.size() >= want) {
      // Anything outside the visited rings is farther than ring * cellSize.
      std::nth_element(found.begin(), found.begin() + static_cast<long>(want - 1), found.end());
      const double kth = found[want - 1].first;
      const double covered = static_cast<double>(ring) * cellSize_;
      if (kth <= covered * covered || found.size() == points_.size()) break;
    }
    if (ring > (1 << 20)) break;
  }
  std::sort(found.begin(), found.end());
  found.resize(want);
  std::vector<int> out;
  out.reserve(want);
  for (const auto& [d, idx] : found) out.push_back(idx);
  return out;
}

std::vector<Vec3> to_double(std::span<const Eigen::Vector3f> points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(p.cast<double>());
  return out;
}

}  // namespace otoc
