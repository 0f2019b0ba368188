#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "otoc/neural.hpp"

namespace otoc {

/// Relation network: the point network's backbone without the category
/// head. Its pooled, normalized output is the per-super-voxel embedding.
struct RelationParams {
  Backbone backbone;
};

RelationParams relation_from_model(const ModelParams& model);
RelationParams init_relation(const NetworkDims& dims, uint64_t seed);

/// One unit-norm prototype per category.
struct PrototypeBank {
  Mat keys;  // C x D
  double momentum = 0.9;
  double temperature = 0.07;

  int categories() const { return static_cast<int>(keys.rows()); }
  int dim() const { return static_cast<int>(keys.cols()); }
};

/// Rows drawn uniformly on the unit sphere.
PrototypeBank init_bank(int categories, int dim, uint64_t seed, double momentum = 0.9, double temperature = 0.07);

struct Embedding {
  Mat f;                    // M x D, unit rows
  Mat pooled;               // M x D before normalization
  std::vector<int> degenerate;  // rows replaced by e_0
};

/// Pooled relation features, L2-normalized per super-voxel. A zero pooled
/// vector is replaced by e_0 and reported.
Embedding embed(const RelationParams& rel, const PointFeatures& feats, const SuperVoxelPartition& part);

/// Row-wise L2 normalization; zero rows become e_0 (indices appended to
/// `degenerate` when given).
Mat normalize_rows(const Mat& rows, std::vector<int>* degenerate = nullptr);

struct ContrastiveResult {
  double loss = 0.0;
  Mat grad;  // dL/df, M x D (zero for unlabeled rows)
  int labeled = 0;
};

/// Softmax cross-entropy over prototype logits f_j . k_c / tau, averaged over
/// labeled rows (label >= 0).
ContrastiveResult contrastive_loss_and_grad(const Mat& f, const PrototypeBank& bank, std::span<const int> labels);

/// Momentum blend m * k_c + (1 - m) * f before renormalization.
Vec bank_blend(const PrototypeBank& bank, const Eigen::Ref<const Vec>& f, int category);
/// Replaces row `category` by the renormalized momentum blend.
void bank_update(PrototypeBank& bank, const Eigen::Ref<const Vec>& f, int category);

/// softmax_c(f_j . k_c / tau) per row.
Mat relation_probs(const Mat& f, const PrototypeBank& bank);

/// Element-wise product of two probability tables, renormalized per row.
Mat combine_probs(const Mat& a, const Mat& b);

/// R_w <- m R_w + (1 - m) Theta_w over the shared backbone weights.
RelationParams weight_ema(const RelationParams& rel, const ModelParams& model, double m);

struct RelationLoss {
  double loss = 0.0;
  Backbone grad;
  Mat f;  // embeddings of the batch super-voxels (detached)
};

/// Contrastive loss of the relation network over the super-voxels in
/// `svBatch` with categories `svLabels` (same length), and its exact gradient
/// with respect to the relation backbone.
RelationLoss relation_loss_and_grad(const RelationParams& rel, const PointFeatures& feats,
                                    const SuperVoxelPartition& part, std::span<const int> svBatch,
                                    std::span<const int> svLabels, const PrototypeBank& bank);

// ---------------------------------------------------------------------------
// Transformer propagation

/// Q, K, V: D -> d_l linear maps; fusion: [F_j, fhat_j] (D + d_l) -> C.
struct AttentionParams {
  Mat Wq, Wk, Wv;  // d_l x D
  Vec bq, bk, bv;
  Mat Wf;          // C x (D + d_l)
  Vec bf;

  int dl() const { return static_cast<int>(Wq.rows()); }
};

AttentionParams zero_attention(int dim, int dl, int categories);
AttentionParams init_attention(int dim, int dl, int categories, uint64_t seed);

struct TransformerOutput {
  Mat fhat;       // M x d_l
  Mat attention;  // M x C
  Mat fused;      // M x C probabilities
};

TransformerOutput transformer_propagate(const AttentionParams& att, const Mat& F, const PrototypeBank& bank);

struct AttentionLoss {
  double loss = 0.0;
  AttentionParams grad;
};

/// Cross-entropy of the fused prediction over labeled rows and its exact
/// gradient with respect to every attention parameter.
AttentionLoss attention_loss_and_grad(const AttentionParams& att, const Mat& F, const PrototypeBank& bank,
                                      std::span<const int> labels);

void for_each_block(AttentionParams& p, const std::function<void(std::span<double>)>& fn);
Vec flatten(const AttentionParams& p);
void unflatten(const Vec& flat, AttentionParams& p);
Vec flatten(const Backbone& b);
void unflatten(const Vec& flat, Backbone& b);

}  // namespace otoc
