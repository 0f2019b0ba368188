#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "otoc/eval.hpp"
#include "otoc/neural.hpp"
#include "otoc/selftrain.hpp"
#include "otoc/supervoxel.hpp"

namespace otoc {

struct InstanceSeed {
  int sv = 0;
  int category = 0;
  bool operator==(const InstanceSeed&) const = default;
};

/// Per-super-voxel instance assignment seeded by clicks.
struct InstancePseudoLabels {
  std::vector<int> instance;      // per sv, index into seeds or -1
  std::vector<InstanceSeed> seeds;
  std::vector<Vec3> centroid;     // per instance

  size_t size() const { return instance.size(); }
  bool operator==(const InstancePseudoLabels&) const = default;
};

/// Seeds from the clicked super-voxels, one per click, in click order.
std::vector<InstanceSeed> click_seeds(const ClickAnnotation& ann, const SuperVoxelPartition& part);

/// One assignment + update round. Every sv with a category joins the nearest
/// centroid among seeds of its category; seed svs stay with their own seed.
/// Centroids become the mean coordinate of their members. Pass
/// `centroids = nullptr` to start from the seed coordinates.
InstancePseudoLabels seeded_assign(std::span<const InstanceSeed> seeds, std::span<const Vec3> coords,
                                   std::span<const int> semLabels, const std::vector<Vec3>* centroids = nullptr);

/// Sum of squared distances of assigned svs to their centroid.
double kmeans_inertia(const InstancePseudoLabels& labels, std::span<const Vec3> coords);

/// seeded_assign repeated until the assignment stops changing (at most
/// `maxRounds` rounds).
InstancePseudoLabels seeded_kmeans(std::span<const InstanceSeed> seeds, std::span<const Vec3> coords,
                                   std::span<const int> semLabels, int maxRounds = 50);

/// Keeps the connected component containing each seed; drops instances with
/// fewer than `minPoints` points. Centroids are recomputed as the point mean
/// of the retained svs (meters, unshifted).
InstancePseudoLabels filter_components(const InstancePseudoLabels& labels, const SuperVoxelGraph& graph,
                                       int minPoints);

/// Mean over instance-labeled svs of |o_j - (C - p_j)|_1, with o_j the pooled
/// offset head output. `svs` restricts the sum to a subset.
LossAndGrad offset_loss_and_grad(const ModelParams& params, const PointFeatures& feats,
                                 const SuperVoxelPartition& part, const InstancePseudoLabels& labels,
                                 const std::vector<int>* svs = nullptr);

/// Breadth-first grouping of same-category svs whose coordinates lie within
/// `radius`; groups under `minPoints` points are discarded. Category and
/// score come from the mean member point probabilities.
InstancePrediction cluster_inference(std::span<const Vec3> coords, std::span<const int> svCategory,
                                     const SuperVoxelPartition& part, const Mat& pointProbs, double radius,
                                     int minPoints);

struct InstanceConfig {
  int iterations = 2;
  int minPoints = 20;   // s
  double radius = 0.3;  // meters
  int kmeansRounds = 50;
  double offsetWeight = 1.0;
  /// batchSize and sampleCap count super-voxels here.
  TrainSchedule schedule{0.05, 0.9, 60, 40, 16, 512, true};
  uint64_t seed = 0;
  bool operator==(const InstanceConfig&) const = default;
};

struct InstanceRun {
  ModelParams model;
  std::vector<InstancePseudoLabels> pseudo;     // final iteration, per scene
  std::vector<InstancePrediction> predictions;  // per scene
  std::vector<double> lossCurve;
};

/// Shifted coordinates p_j + o_j of every super-voxel.
std::vector<Vec3> shifted_coords(const Prediction& pred, const SuperVoxelPartition& part);
std::vector<Vec3> raw_coords(const SuperVoxelPartition& part);

/// Instance prediction for one scene from the semantic argmax and the given
/// per-sv coordinates.
InstancePrediction predict_instances(const ModelParams& model, const SceneData& scene, const InstanceConfig& config,
                                     bool useOffsets);

/// Offset-head training on seeded K-Means pseudo instances (backbone frozen
/// in the first iteration, everything fine-tuned afterwards with the
/// semantic loss added), then shifted-coordinate clustering.
InstanceRun run_instance(ModelParams model, std::span<const SceneData> scenes,
                         std::span<const PseudoLabelSet> semantic, const InstanceConfig& config);

}  // namespace otoc
