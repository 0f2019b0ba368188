#include "otoc/crf.hpp"

#include <algorithm>
#include <cmath>

namespace otoc {

PairwiseKernel PairwiseKernel::dense(Mat weights) {
  if (weights.rows() != weights.cols()) throw Error("kernel must be square");
  PairwiseKernel k;
  weights.diagonal().setZero();
  k.dense_ = std::move(weights);
  return k;
}

PairwiseKernel PairwiseKernel::sparse(Eigen::SparseMatrix<double> weights) {
  if (weights.rows() != weights.cols()) throw Error("kernel must be square");
  PairwiseKernel k;
  weights.prune([](Eigen::Index r, Eigen::Index c, double) { return r != c; });
  weights.makeCompressed();
  k.sparse_ = std::move(weights);
  return k;
}

double PairwiseKernel::weight(int a, int b) const {
  if (a == b) return 0.0;
  return dense_ ? (*dense_)(a, b) : sparse_.coeff(a, b);
}

namespace {

double block_term(const Mat& block, int a, int b, double lambda, double sigma) {
  if (block.cols() == 0 || lambda == 0.0) return 0.0;
  return lambda * (block.row(a) - block.row(b)).squaredNorm() / (2.0 * sigma * sigma);
}

}  // namespace

double kernel_value(const KernelFeatures& f, int a, int b, const KernelHyper& h) {
  const double e = block_term(f.color, a, b, h.lambdaColor, h.sigmaColor) +
                   block_term(f.position, a, b, h.lambdaPos, h.sigmaPos) +
                   block_term(f.unary, a, b, h.lambdaUnary, h.sigmaUnary) +
                   block_term(f.relation, a, b, h.lambdaRel, h.sigmaRel);
  return std::exp(-e);
}

PairwiseKernel pairwise_kernel(const KernelFeatures& feats, const KernelHyper& hyper,
                               const std::vector<std::vector<int>>* extraEdges) {
  const Eigen::Index m = std::max({feats.color.rows(), feats.position.rows(), feats.unary.rows(), feats.relation.rows()});
  for (const Mat* block : {&feats.color, &feats.position, &feats.unary, &feats.relation}) {
    if (block->cols() > 0 && block->rows() != m) throw Error("kernel feature blocks disagree on node count");
  }
  if (m <= hyper.denseCap) {
    Mat w = Mat::Zero(m, m);
    for (Eigen::Index a = 0; a < m; ++a) {
      for (Eigen::Index b = a + 1; b < m; ++b) {
        const double v = kernel_value(feats, static_cast<int>(a), static_cast<int>(b), hyper);
        w(a, b) = v;
        w(b, a) = v;
      }
    }
    return PairwiseKernel::dense(std::move(w));
  }

  // kNN pairs in joint (position, color) space, brute force.
  std::vector<Eigen::Triplet<double>> trips;
  const int k = std::min<int>(hyper.sparseNeighbors, static_cast<int>(m) - 1);
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(m));
  auto joint = [&](Eigen::Index a, Eigen::Index b) {
    double d = 0.0;
    if (feats.position.cols() > 0) d += (feats.position.row(a) - feats.position.row(b)).squaredNorm();
    if (feats.color.cols() > 0) d += (feats.color.row(a) - feats.color.row(b)).squaredNorm();
    return d;
  };
  auto add = [&](int a, int b) {
    const double v = kernel_value(feats, a, b, hyper);
    trips.emplace_back(a, b, v);
    trips.emplace_back(b, a, v);
  };
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) dist[b] = {a == b ? INFINITY : joint(a, b), static_cast<int>(b)};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int t = 0; t < k; ++t) add(static_cast<int>(a), dist[t].second);
  }
  if (extraEdges) {
    for (size_t a = 0; a < extraEdges->size(); ++a) {
      for (int b : (*extraEdges)[a]) {
        if (static_cast<int>(a) < b) add(static_cast<int>(a), b);
      }
    }
  }
  Eigen::SparseMatrix<double> w(m, m);
  // Duplicates (mutual neighbors) carry identical values; keep one.
  w.setFromTriplets(trips.begin(), trips.end(), [](double x, double) { return x; });
  return PairwiseKernel::sparse(std::move(w));
}

PairwiseKernel pairwise_kernel(const SuperVoxelGraph& graph, const KernelFeatures& feats, const KernelHyper& hyper) {
  return pairwise_kernel(feats, hyper, &graph.adjacency);
}

Mat clamp_unary(const Mat& unary) {
  Mat u = unary.cwiseMax(kUnaryFloor);
  for (Eigen::Index j = 0; j < u.rows(); ++j) u.row(j) /= u.row(j).sum();
  return u;
}

double mean_field_sweep(Mat& Q, const Mat& unary, const PairwiseKernel& kernel) {
  const Eigen::Index C = Q.cols();
  double delta = 0.0;
  Eigen::RowVectorXd msg(C), next(C);
  for (Eigen::Index j = 0; j < Q.rows(); ++j) {
    msg.setZero();
    kernel.for_each_neighbor(static_cast<int>(j), [&](int b, double w) { msg += w * Q.row(b); });
    const double top = msg.maxCoeff();
    if (msg.minCoeff() == top) {
      // Uniform messages cancel in the normalization.
      next = unary.row(j);
    } else {
      next = unary.row(j).array() * (msg.array() - top).exp();
      next /= next.sum();
    }
    delta = std::max(delta, (next - Q.row(j)).cwiseAbs().maxCoeff());
    Q.row(j) = next;
  }
  return delta;
}

MeanFieldResult mean_field(const Mat& unary, const PairwiseKernel& kernel, const MeanFieldOptions& opts) {
  if (static_cast<size_t>(unary.rows()) != kernel.size()) throw Error("mean_field: unary/kernel size mismatch");
  const Mat u = clamp_unary(unary);
  MeanFieldResult r;
  r.Q = u;
  for (int s = 0; s < opts.sweeps; ++s) {
    r.lastDelta = mean_field_sweep(r.Q, u, kernel);
    r.sweeps = s + 1;
    if (r.lastDelta < opts.tol) break;
  }
  return r;
}

double free_energy(const Mat& Q, const Mat& unary, const PairwiseKernel& kernel) {
  const Mat u = clamp_unary(unary);
  double f = 0.0;
  for (Eigen::Index j = 0; j < Q.rows(); ++j) {
    for (Eigen::Index l = 0; l < Q.cols(); ++l) {
      const double q = Q(j, l);
      f -= q * std::log(u(j, l));
      if (q > 0.0) f += q * std::log(q);
    }
    kernel.for_each_neighbor(static_cast<int>(j), [&](int b, double w) {
      if (b > j) f += w * (1.0 - Q.row(j).dot(Q.row(b)));
    });
  }
  return f;
}

}  // namespace otoc
