#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "otoc/crf.hpp"
#include "otoc/neural.hpp"
#include "otoc/relation.hpp"
#include "otoc/supervoxel.hpp"

namespace otoc {

enum class PropagationMode { UnaryOnly, Graph, Transformer };

PropagationMode parse_mode(const std::string& s);
std::string to_string(PropagationMode mode);

/// Schedule of the relation network (trained on super-voxels) and of the
/// attention layers in transformer mode.
struct RelationSchedule {
  double learningRate = 0.05;
  double momentum = 0.9;
  int epochsFirst = 40;
  int epochsLater = 20;
  int batchSize = 32;          // super-voxels per step
  int64_t sampleCap = 256;     // super-voxels drawn per epoch
  bool operator==(const RelationSchedule&) const = default;
};

struct SelfTrainConfig {
  int iterations = 5;
  double confidenceThreshold = 0.9;  // T
  PropagationMode mode = PropagationMode::Graph;
  bool relationFeatures = true;  // relation unary product and kernel term f_j
  bool networkFeatures = true;   // kernel term u_j
  KernelHyper kernel;
  MeanFieldOptions meanField;
  double kernelPositionScale = 0.3;  // meters per normalized position unit
  double kernelColorScale = 1.0;
  NetworkDims dims;
  TrainSchedule schedule;
  RelationSchedule relationSchedule;
  double bankMomentum = 0.9;    // m
  double temperature = 0.07;    // tau
  double emaMomentum = 0.9;
  bool classWeights = false;
  double earlyStopDelta = 0.005;  // coverage change; 0 disables
  uint64_t seed = 0;
};

/// Presets matching the ablation columns: "unet", "unet+gp", "unet+rel+gp".
SelfTrainConfig ablation_config(const std::string& name, SelfTrainConfig base = {});

/// Everything precomputed for one scene.
struct SceneData {
  PointCloud cloud;
  PointFeatures feats;
  SuperVoxelGraph graph;
  ClickAnnotation annotation;
  PseudoLabelSet clicks;

  const SuperVoxelPartition& part() const { return graph.partition; }
};

SceneData prepare_scene(PointCloud cloud, ClickAnnotation annotation, const PartitionParams& partParams = {},
                        const FeatureParams& featParams = {});

/// Geometric-mean probability, over the members of each super-voxel, of the
/// super-voxel's argmax category. `svProbs` picks the argmax (M x C);
/// `pointProbs` (N x C) supplies the member probabilities.
std::vector<double> confidence(const Mat& pointProbs, const Mat& svProbs, const SuperVoxelPartition& part);
/// Same with the super-voxel distribution broadcast to its members.
std::vector<double> confidence(const Mat& svProbs, const SuperVoxelPartition& part);

int argmax_row(const Mat& probs, Eigen::Index row);

/// Labels every super-voxel whose confidence reaches `threshold` with its
/// argmax category; click labels are always kept unchanged.
PseudoLabelSet select_pseudo_labels(const Mat& svProbs, std::span<const double> conf, double threshold,
                                    const PseudoLabelSet& clicks);

struct IterationReport {
  int iteration = 0;
  double coverage = 0.0;
  double precision = 0.0;   // NaN without ground truth
  double trainLoss = 0.0;
  double relationLoss = 0.0;  // NaN when no relation training ran
  double valMiou = 0.0;     // NaN without held-out scenes
  size_t labeled = 0;
  size_t clicked = 0;
  bool operator==(const IterationReport&) const = default;
};

struct SelfTrainState {
  ModelParams model;
  RelationParams relation;
  PrototypeBank bank;
  AttentionParams attention;
};

struct SelfTrainResult {
  SelfTrainState state;
  std::vector<std::vector<PseudoLabelSet>> history;  // [iteration][scene]
  std::vector<IterationReport> reports;
};

/// Scene-level propagation with fixed networks: returns per-super-voxel
/// distributions after the configured propagation.
struct Propagation {
  Mat svProbs;                  // M x C marginals / fused probabilities
  std::vector<double> confidence;
  Prediction prediction;
};
Propagation propagate_scene(const SceneData& scene, const SelfTrainState& state, const SelfTrainConfig& config);

/// Semantic argmax of the point network.
std::vector<int> predict_points(const ModelParams& model, const PointFeatures& feats);

/// Point-level mIoU of the network on scenes with ground truth.
double evaluate_miou(const ModelParams& model, std::span<const SceneData> scenes, int categories);

using IterationCallback = std::function<void(const IterationReport&, const SelfTrainState&)>;

/// Alternates network training on the current pseudo labels and label
/// propagation for `config.iterations` rounds.
SelfTrainResult run_selftrain(std::span<const SceneData> scenes, std::span<const SceneData> heldout,
                              const SelfTrainConfig& config, const IterationCallback& onIteration = {});

nlohmann::json report_to_json(const IterationReport& r);

/// Runs fn(i) for i in [0, n) on worker threads; results must be written to
/// per-index slots.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace otoc
