#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "otoc/common.hpp"
#include "otoc/scene.hpp"

namespace otoc {

struct PartitionParams {
  double voxelSeedSpacing = 0.5;  // meters
  double colorWeight = 1.0;
  double spatialWeight = 1.0;
  int maxIter = 10;
  double rAdj = 0.1;  // connectivity radius, meters
};

/// Disjoint cover of the points of one cloud.
struct SuperVoxelPartition {
  std::vector<int> svId;                 // N
  std::vector<std::vector<int>> members;  // M, ascending point indices
  std::vector<Vec3> meanPos;              // M, meters
  std::vector<Vec3> meanColor;            // M, RGB in [0,1]

  size_t size() const { return members.size(); }
  size_t point_count() const { return svId.size(); }
};

/// Builds members/means from an svId array (ids must be dense 0..M-1).
SuperVoxelPartition make_partition(const PointCloud& cloud, std::vector<int> svId);

/// Seeded region growing in joint position-color space followed by a
/// connectivity split. Deterministic for fixed params.
SuperVoxelPartition partition(const PointCloud& cloud, const PartitionParams& params = {});

struct SuperVoxelGraph {
  SuperVoxelPartition partition;
  std::vector<std::vector<int>> adjacency;  // sorted neighbor lists, symmetric

  size_t size() const { return adjacency.size(); }
  size_t edge_count() const;  // undirected
  bool has_edge(int a, int b) const;
};

SuperVoxelGraph build_graph(const PointCloud& cloud, SuperVoxelPartition part, double rAdj = 0.1);

/// Component label per node, numbered in order of lowest node index.
/// `mask`, when given, restricts both nodes and traversal.
std::vector<int> connected_components(const std::vector<std::vector<int>>& adjacency,
                                      const std::vector<bool>* mask = nullptr);

/// Row j of the result is the mean over the members of super-voxel j.
Mat pool_rows(const Mat& pointRows, const SuperVoxelPartition& part);
/// pool_rows for probabilities; rows of the result are on the simplex.
Mat pool_probs(const Mat& pointProbs, const SuperVoxelPartition& part);

enum class Provenance { None, Click, Propagated };

struct PseudoLabelSet {
  std::vector<std::optional<int>> category;
  std::vector<double> confidence;
  std::vector<Provenance> provenance;

  explicit PseudoLabelSet(size_t m = 0) : category(m), confidence(m, 0.0), provenance(m, Provenance::None) {}
  size_t size() const { return category.size(); }
  size_t labeled_count() const;
  double coverage() const;
  bool operator==(const PseudoLabelSet&) const = default;
};

/// Spreads each click to its whole super-voxel. Two clicks in one
/// super-voxel with different categories raise Error("conflicting clicks").
PseudoLabelSet expand_clicks(const ClickAnnotation& ann, const SuperVoxelPartition& part);

/// Per-point category from super-voxel labels (kUnlabeled where absent).
std::vector<int> broadcast_labels(const PseudoLabelSet& labels, const SuperVoxelPartition& part);

nlohmann::json partition_to_json(const std::string& sceneId, const SuperVoxelPartition& part);

}  // namespace otoc
