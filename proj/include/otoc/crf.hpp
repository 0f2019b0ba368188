#pragma once

#include <optional>
#include <vector>

#include <Eigen/SparseCore>

#include "otoc/common.hpp"
#include "otoc/supervoxel.hpp"

namespace otoc {

struct KernelHyper {
  double lambdaColor = 1.0, lambdaPos = 1.0, lambdaUnary = 1.0, lambdaRel = 1.0;
  double sigmaColor = 1.0, sigmaPos = 1.0, sigmaUnary = 1.0, sigmaRel = 1.0;
  int denseCap = 4096;  // dense all-pairs up to this many nodes
  int sparseNeighbors = 64;
};

/// Normalized per-super-voxel features feeding the Gaussian kernel. Blocks
/// may be empty (0 columns), which drops that term.
struct KernelFeatures {
  Mat color;     // M x 3
  Mat position;  // M x 3
  Mat unary;     // M x D (network features), optional
  Mat relation;  // M x D (relation embeddings), optional
};

/// Symmetric non-negative affinities with zero diagonal.
class PairwiseKernel {
 public:
  PairwiseKernel() = default;
  static PairwiseKernel dense(Mat weights);
  static PairwiseKernel sparse(Eigen::SparseMatrix<double> weights);

  size_t size() const { return static_cast<size_t>(dense_ ? dense_->rows() : sparse_.rows()); }
  bool is_dense() const { return dense_.has_value(); }
  double weight(int a, int b) const;

  /// Calls fn(neighbor, weight) for every non-zero k(j, .).
  template <typename Fn>
  void for_each_neighbor(int j, Fn&& fn) const {
    if (dense_) {
      for (Eigen::Index b = 0; b < dense_->rows(); ++b) {
        const double w = (*dense_)(b, j);
        if (w != 0.0) fn(static_cast<int>(b), w);
      }
    } else {
      for (Eigen::SparseMatrix<double>::InnerIterator it(sparse_, j); it; ++it) {
        if (it.value() != 0.0) fn(static_cast<int>(it.row()), it.value());
      }
    }
  }

 private:
  std::optional<Mat> dense_;
  Eigen::SparseMatrix<double> sparse_;  // column-major, symmetric
};

/// Gaussian affinity of two feature rows under `hyper` (no Potts factor).
double kernel_value(const KernelFeatures& feats, int a, int b, const KernelHyper& hyper);

/// Dense all-pairs when M <= denseCap, otherwise symmetrized kNN pairs in
/// joint (position, color) space. `graph` contributes its adjacency edges in
/// the sparse case.
PairwiseKernel pairwise_kernel(const SuperVoxelGraph& graph, const KernelFeatures& feats, const KernelHyper& hyper);
PairwiseKernel pairwise_kernel(const KernelFeatures& feats, const KernelHyper& hyper,
                               const std::vector<std::vector<int>>* extraEdges = nullptr);

inline constexpr double kUnaryFloor = 1e-12;

struct MeanFieldOptions {
  int sweeps = 10;
  double tol = 1e-5;
};

struct MeanFieldResult {
  Mat Q;  // M x C
  int sweeps = 0;
  double lastDelta = 0.0;
};

/// Sequential (Gauss-Seidel) mean-field updates with Potts compatibility:
/// Q_j(l) ∝ unary_j(l) exp(-Σ_j' k(j,j') (1 - Q_j'(l))), nodes in index order.
MeanFieldResult mean_field(const Mat& unary, const PairwiseKernel& kernel, const MeanFieldOptions& opts = {});

/// Clamps at kUnaryFloor and renormalizes rows.
Mat clamp_unary(const Mat& unary);

/// Variational free energy whose coordinate minimizer is the update above.
double free_energy(const Mat& Q, const Mat& unary, const PairwiseKernel& kernel);

/// One sequential sweep over all nodes, in place. Returns max |ΔQ|.
double mean_field_sweep(Mat& Q, const Mat& clampedUnary, const PairwiseKernel& kernel);

}  // namespace otoc
