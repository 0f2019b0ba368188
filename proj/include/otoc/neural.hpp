#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <optional>
#include <span>
#include <vector>

#include "otoc/common.hpp"
#include "otoc/scene.hpp"
#include "otoc/supervoxel.hpp"

namespace otoc {

inline constexpr int kFeatureDim = 10;

/// Per-point descriptors, one row per point:
/// normalized x,y,z | r,g,b in [0,1] | height above floor | linearity,
/// planarity, scattering.
struct PointFeatures {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat values;  // N x F

  size_t size() const { return static_cast<size_t>(values.rows()); }
  /// F x N column view suited to batched matrix products.
  auto columns() const { return values.transpose(); }
};

struct FeatureParams {
  int neighbors = 16;
  double heightScale = 3.0;  // meters mapped to height feature 1.0
};

PointFeatures featurize(const PointCloud& cloud, const FeatureParams& params = {});

/// Rows of `feats` selected by `rows`, in order.
PointFeatures gather_rows(const PointFeatures& feats, std::span<const int> rows);
PointFeatures concat_rows(std::span<const PointFeatures* const> parts);

struct NetworkDims {
  int features = kFeatureDim;
  int hidden = 64;
  int embed = 32;  // D
  int categories = 6;
  bool operator==(const NetworkDims&) const = default;
};

/// Shared feature extractor: u = W2 relu(W1 x + b1) + b2.
struct Backbone {
  Mat W1;  // H x F
  Vec b1;
  Mat W2;  // D x H
  Vec b2;
};

struct TrainSchedule {
  double learningRate = 0.1;
  double momentum = 0.9;
  int epochsFirst = 200;
  int epochsLater = 100;
  int batchSize = 1024;         // 0 = full batch
  int64_t sampleCap = 250000;  // labeled points drawn per epoch
  bool cosineDecay = true;
  bool operator==(const TrainSchedule&) const = default;
};

struct ModelParams {
  Backbone backbone;
  Mat Wc;  // C x D category head
  Vec bc;
  Mat Wo;  // 3 x D offset head
  Vec bo;
  TrainSchedule schedule;

  NetworkDims dims() const;
};

/// Same-shape container for gradients and SGD velocity.
using ModelGrad = ModelParams;

ModelParams zero_model(const NetworkDims& dims);
ModelParams init_model(const NetworkDims& dims, uint64_t seed);
void check_model(const ModelParams& params);

/// Visits every weight block in a fixed order.
enum class ParamGroup { Backbone, CategoryHead, OffsetHead };
void for_each_block(ModelParams& p, const std::function<void(ParamGroup, std::span<double>)>& fn);
void for_each_block(const ModelParams& p, const std::function<void(ParamGroup, std::span<const double>)>& fn);
void for_each_block(const ModelParams& a, ModelParams& b,
                    const std::function<void(ParamGroup, std::span<const double>, std::span<double>)>& fn);
Vec flatten(const ModelParams& p);
void unflatten(const Vec& flat, ModelParams& p);

/// Activations kept for the backward pass; columns are points.
struct BackboneCache {
  Mat Z1;  // H x n pre-activation
  Mat H;   // H x n
  Mat U;   // D x n
};

BackboneCache backbone_forward(const Backbone& bb, const Eigen::Ref<const Mat>& X);
/// Accumulates weight gradients into `grad` given dL/dU.
void backbone_backward(const Backbone& bb, const Eigen::Ref<const Mat>& X, const BackboneCache& cache,
                       const Mat& dU, Backbone& grad);

/// Column-wise softmax, numerically stable.
Mat softmax_columns(const Mat& logits);
/// Row-wise softmax.
Mat softmax_rows(const Mat& logits);

struct Prediction {
  Mat pointProbs;   // N x C
  Mat pointEmbed;   // N x D
  Mat pointOffset;  // N x 3
  Mat pooledProbs;  // M x C
  Mat pooledEmbed;  // M x D
  Mat pooledOffset; // M x 3
};

/// Per-point outputs only (no pooling).
Prediction forward_points(const ModelParams& params, const PointFeatures& feats);
Prediction forward(const ModelParams& params, const PointFeatures& feats, const SuperVoxelPartition& part);

struct LossAndGrad {
  double loss = 0.0;
  ModelGrad grad;
};

/// Softmax cross-entropy averaged over points with label >= 0. With class
/// weights the average is weighted (normalized by the weight sum).
LossAndGrad ce_loss_and_grad(const ModelParams& params, const PointFeatures& feats, std::span<const int> labels,
                             const std::optional<std::vector<double>>& classWeights = std::nullopt);

/// Inverse-frequency weights over labels >= 0, normalized to mean 1 over
/// categories that occur; absent categories get weight 0.
std::vector<double> inverse_frequency_weights(std::span<const int> labels, int categories);

struct TrainMask {
  bool backbone = true;
  bool categoryHead = true;
  bool offsetHead = true;
  bool allows(ParamGroup g) const;
};

/// SGD with momentum: v <- mu v + g, w <- w - lr v (masked groups untouched).
void sgd_step(ModelParams& params, const ModelGrad& grad, ModelGrad& velocity, double lr, double momentum,
              const TrainMask& mask = {});

double cosine_lr(double base, int epoch, int epochs, bool enabled);

struct TrainResult {
  ModelParams params;
  std::vector<double> lossCurve;  // mean minibatch loss per epoch
};

struct TrainOptions {
  std::optional<std::vector<double>> classWeights;
  TrainMask mask;
  /// Called after each optimizer step (used for the weight EMA).
  std::function<void(const ModelParams&)> afterStep;
};

/// Minibatch SGD on the cross-entropy loss over labeled points. Deterministic in
/// `seed`; throws Error if the loss becomes non-finite.
TrainResult train(ModelParams params, const PointFeatures& feats, std::span<const int> labels, int epochs,
                  uint64_t seed, const TrainOptions& options = {});

/// Per-epoch minibatches of indices into `pool`: at most `cap` sampled
/// without replacement, shuffled, split into `batchSize` chunks.
std::vector<std::vector<int>> epoch_batches(std::span<const int> pool, int64_t cap, int batchSize,
                                            std::mt19937_64& rng);

}  // namespace otoc
