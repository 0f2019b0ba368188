#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "otoc/common.hpp"

namespace otoc {

/// Uniform hash grid over a fixed point set. Radius queries scan the cells
/// overlapping the query ball; k-NN expands cell rings until exact.
class SpatialGrid {
 public:
  SpatialGrid(std::span<const Vec3> points, double cellSize);

  /// Indices of points within `radius` of `q` (inclusive), ascending.
  std::vector<int> radius(const Vec3& q, double radius) const;

  /// Exact k nearest points to `q` ordered by (distance, index).
  std::vector<int> knn(const Vec3& q, int k) const;

  template <typename Fn>
  void for_each_in_radius(const Vec3& q, double radius, Fn&& fn) const {
    const double r2 = radius * radius;
    const auto lo = cell_of(q - Vec3::Constant(radius));
    const auto hi = cell_of(q + Vec3::Constant(radius));
    for (int64_t x = lo[0]; x <= hi[0]; ++x)
      for (int64_t y = lo[1]; y <= hi[1]; ++y)
        for (int64_t z = lo[2]; z <= hi[2]; ++z) {
          auto it = cells_.find(key(x, y, z));
          if (it == cells_.end()) continue;
          for (int idx : it->second) {
            if ((points_[idx] - q).squaredNorm() <= r2) fn(idx);
          }
        }
  }

  double cell_size() const { return cellSize_; }
  size_t size() const { return points_.size(); }

 private:
  using Cell = std::array<int64_t, 3>;
  Cell cell_of(const Vec3& p) const;
  static uint64_t key(int64_t x, int64_t y, int64_t z);

  std::span<const Vec3> points_;
  double cellSize_;
  std::unordered_map<uint64_t, std::vector<int>> cells_;
};

std::vector<Vec3> to_double(std::span<const Eigen::Vector3f> points);

}  // namespace otoc
