#include "otoc/supervoxel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <unordered_map>

#include "otoc/spatial.hpp"

namespace otoc {

namespace {

Vec3 color01(const Rgb& c) { return Vec3(c[0], c[1], c[2]) / 255.0; }

/// Relabels `labels` so ids appear in order of their lowest point index.
std::vector<int> canonical_ids(const std::vector<int>& labels) {
  std::unordered_map<int, int> remap;
  std::vector<int> out(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = remap.emplace(labels[i], static_cast<int>(remap.size()));
    out[i] = it->second;
  }
  return out;
}

/// Splits every cluster into components connected under `rAdj`.
std::vector<int> split_connected(const std::vector<Vec3>& pos, const std::vector<int>& cluster, double rAdj) {
  const SpatialGrid grid(pos, rAdj);
  std::vector<int> out(pos.size(), -1);
  int next = 0;
  std::vector<int> stack;
  for (size_t seed = 0; seed < pos.size(); ++seed) {
    if (out[seed] >= 0) continue;
    const int id = next++;
    out[seed] = id;
    stack.assign(1, static_cast<int>(seed));
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      grid.for_each_in_radius(pos[i], rAdj, [&](int j) {
        if (out[j] < 0 && cluster[j] == cluster[i]) {
          out[j] = id;
          stack.push_back(j);
        }
      });
    }
  }
  return out;
}

}  // namespace

SuperVoxelPartition make_partition(const PointCloud& cloud, std::vector<int> svId) {
  if (svId.size() != cloud.size()) throw Error("svId length mismatch");
  SuperVoxelPartition part;
  int m = 0;
  for (int id : svId) {
    if (id < 0) throw Error("negative super-voxel id");
    m = std::max(m, id + 1);
  }
  part.members.resize(m);
  for (size_t i = 0; i < svId.size(); ++i) part.members[svId[i]].push_back(static_cast<int>(i));
  part.meanPos.assign(m, Vec3::Zero());
  part.meanColor.assign(m, Vec3::Zero());
  for (int j = 0; j < m; ++j) {
    if (part.members[j].empty()) throw Error("super-voxel ids are not dense");
    for (int i : part.members[j]) {
      part.meanPos[j] += cloud.positions[i].cast<double>();
      part.meanColor[j] += color01(cloud.colors[i]);
    }
    const double n = static_cast<double>(part.members[j].size());
    part.meanPos[j] /= n;
    part.meanColor[j] /= n;
  }
  part.svId = std::move(svId);
  return part;
}

SuperVoxelPartition partition(const PointCloud& cloud, const PartitionParams& params) {
  validate_cloud(cloud);
  if (!(params.voxelSeedSpacing > 0.0)) throw Error("voxelSeedSpacing must be positive");
  if (!(params.rAdj > 0.0)) throw Error("rAdj must be positive");
  const size_t n = cloud.size();
  const std::vector<Vec3> pos = to_double(cloud.positions);
  std::vector<Vec3> col(n);
  for (size_t i = 0; i < n; ++i) col[i] = color01(cloud.colors[i]);

  // Seed per occupied grid cell at the mean of its points.
  const double s = params.voxelSeedSpacing;
  std::vector<int> assign(n);
  {
    std::unordered_map<uint64_t, int> cell_seed;
    for (size_t i = 0; i < n; ++i) {
      const auto cx = static_cast<int64_t>(std::floor(pos[i].x() / s));
      const auto cy = static_cast<int64_t>(std::floor(pos[i].y() / s));
      const auto cz = static_cast<int64_t>(std::floor(pos[i].z() / s));
      constexpr uint64_t mask = (1ull << 21) - 1;
      const uint64_t key = (static_cast<uint64_t>(cx) & mask) | ((static_cast<uint64_t>(cy) & mask) << 21) |
                           ((static_cast<uint64_t>(cz) & mask) << 42);
      auto [it, inserted] = cell_seed.emplace(key, static_cast<int>(cell_seed.size()));
      assign[i] = it->second;
    }
  }

  std::vector<Vec3> seedPos, seedCol;
  auto recenter = [&]() {
    int m = 0;
    for (int a : assign) m = std::max(m, a + 1);
    std::vector<Vec3> sp(m, Vec3::Zero()), sc(m, Vec3::Zero());
    std::vector<int> count(m, 0);
    for (size_t i = 0; i < n; ++i) {
      sp[assign[i]] += pos[i];
      sc[assign[i]] += col[i];
      ++count[assign[i]];
    }
    // Drop seeds that lost all their points; keep relative order.
    std::vector<int> remap(m, -1);
    seedPos.clear();
    seedCol.clear();
    for (int j = 0; j < m; ++j) {
      if (count[j] == 0) continue;
      remap[j] = static_cast<int>(seedPos.size());
      seedPos.push_back(sp[j] / count[j]);
      seedCol.push_back(sc[j] / count[j]);
    }
    for (auto& a : assign) a = remap[a];
  };
  recenter();

  const double search = 1.5 * s;
  for (int iter = 0; iter < params.maxIter; ++iter) {
    const SpatialGrid seeds(seedPos, s);
    bool changed = false;
    for (size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int bestSeed = -1;
      auto consider = [&](int j) {
        const double d = params.spatialWeight * (pos[i] - seedPos[j]).squaredNorm() +
                         params.colorWeight * (col[i] - seedCol[j]).squaredNorm();
        if (d < best || (d == best && j < bestSeed)) {
          best = d;
          bestSeed = j;
        }
      };
      seeds.for_each_in_radius(pos[i], search, consider);
      if (bestSeed < 0) bestSeed = seeds.knn(pos[i], 1).front();
      if (bestSeed != assign[i]) {
        assign[i] = bestSeed;
        changed = true;
      }
    }
    recenter();
    if (!changed) break;
  }

  return make_partition(cloud, canonical_ids(split_connected(pos, assign, params.rAdj)));
}

size_t SuperVoxelGraph::edge_count() const {
  size_t total = 0;
  for (const auto& nb : adjacency) total += nb.size();
  return total / 2;
}

bool SuperVoxelGraph::has_edge(int a, int b) const {
  if (a < 0 || b < 0 || static_cast<size_t>(a) >= adjacency.size()) return false;
  return std::binary_search(adjacency[a].begin(), adjacency[a].end(), b);
}

SuperVoxelGraph build_graph(const PointCloud& cloud, SuperVoxelPartition part, double rAdj) {
  if (part.point_count() != cloud.size()) throw Error("partition does not match cloud");
  if (!(rAdj > 0.0)) throw Error("rAdj must be positive");
  const std::vector<Vec3> pos = to_double(cloud.positions);
  const SpatialGrid grid(pos, rAdj);
  std::vector<std::vector<int>> adjacency(part.size());
  for (size_t i = 0; i < pos.size(); ++i) {
    const int a = part.svId[i];
    grid.for_each_in_radius(pos[i], rAdj, [&](int j) {
      const int b = part.svId[j];
      if (a != b) adjacency[a].push_back(b);
    });
  }
  for (size_t a = 0; a < adjacency.size(); ++a) {
    auto& nb = adjacency[a];
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  return {std::move(part), std::move(adjacency)};
}

std::vector<int> connected_components(const std::vector<std::vector<int>>& adjacency, const std::vector<bool>* mask) {
  const size_t m = adjacency.size();
  std::vector<int> comp(m, -1);
  int next = 0;
  std::deque<int> queue;
  for (size_t s = 0; s < m; ++s) {
    if (comp[s] >= 0 || (mask && !(*mask)[s])) continue;
    comp[s] = next;
    queue.assign(1, static_cast<int>(s));
    while (!queue.empty()) {
      const int a = queue.front();
      queue.pop_front();
      for (int b : adjacency[a]) {
        if (comp[b] >= 0 || (mask && !(*mask)[b])) continue;
        comp[b] = next;
        queue.push_back(b);
      }
    }
    ++next;
  }
  return comp;
}

Mat pool_rows(const Mat& pointRows, const SuperVoxelPartition& part) {
  if (static_cast<size_t>(pointRows.rows()) != part.point_count()) {
    throw Error("pool: expected " + std::to_string(part.point_count()) + " rows, got " +
                std::to_string(pointRows.rows()));
  }
  Mat pooled = Mat::Zero(static_cast<Eigen::Index>(part.size()), pointRows.cols());
  for (size_t j = 0; j < part.size(); ++j) {
    for (int i : part.members[j]) pooled.row(j) += pointRows.row(i);
    pooled.row(j) /= static_cast<double>(part.members[j].size());
  }
  return pooled;
}

Mat pool_probs(const Mat& pointProbs, const SuperVoxelPartition& part) { return pool_rows(pointProbs, part); }

size_t PseudoLabelSet::labeled_count() const {
  return static_cast<size_t>(std::count_if(category.begin(), category.end(), [](const auto& c) { return c.has_value(); }));
}

double PseudoLabelSet::coverage() const {
  return category.empty() ? 0.0 : static_cast<double>(labeled_count()) / static_cast<double>(category.size());
}

PseudoLabelSet expand_clicks(const ClickAnnotation& ann, const SuperVoxelPartition& part) {
  PseudoLabelSet labels(part.size());
  for (const auto& click : ann.clicks) {
    if (click.pointIndex < 0 || static_cast<size_t>(click.pointIndex) >= part.point_count()) {
      throw Error("click point index out of range: " + std::to_string(click.pointIndex));
    }
    if (click.categoryId < 0) throw Error("click with negative category");
    const int j = part.svId[click.pointIndex];
    if (labels.provenance[j] == Provenance::Click) {
      if (*labels.category[j] != click.categoryId) {
        throw Error("conflicting clicks in super-voxel " + std::to_string(j));
      }
      continue;
    }
    labels.category[j] = click.categoryId;
    labels.confidence[j] = 1.0;
    labels.provenance[j] = Provenance::Click;
  }
  return labels;
}

std::vector<int> broadcast_labels(const PseudoLabelSet& labels, const SuperVoxelPartition& part) {
  std::vector<int> out(part.point_count(), kUnlabeled);
  for (size_t j = 0; j < part.size(); ++j) {
    if (!labels.category[j]) continue;
    for (int i : part.members[j]) out[i] = *labels.category[j];
  }
  return out;
}

nlohmann::json partition_to_json(const std::string& sceneId, const SuperVoxelPartition& part) {
  return {{"scene", sceneId}, {"svId", part.svId}};
}

}  // namespace otoc
