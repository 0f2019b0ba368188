#include "otoc/neural.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "otoc/spatial.hpp"

namespace otoc {

// ---------------------------------------------------------------------------
// Featurization

PointFeatures featurize(const PointCloud& cloud, const FeatureParams& params) {
  validate_cloud(cloud);
  if (params.neighbors < 1) throw Error("featurize: neighbor count must be >= 1");
  const size_t n = cloud.size();
  const std::vector<Vec3> pos = to_double(cloud.positions);

  Vec3 lo = pos[0], hi = pos[0];
  for (const auto& p : pos) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = (hi - lo).maxCoeff();
  const double scale = extent > 0.0 ? 1.0 / extent : 0.0;

  // Cells hold a handful of points for typical surface scans.
  const double cell = std::max(extent / std::cbrt(static_cast<double>(n)) * 1.5, 1e-6);
  const SpatialGrid grid(pos, cell);

  PointFeatures feats;
  feats.values.resize(static_cast<Eigen::Index>(n), kFeatureDim);
  for (size_t i = 0; i < n; ++i) {
    auto row = feats.values.row(static_cast<Eigen::Index>(i));
    const Vec3 rel = (pos[i] - lo) * scale;
    row(0) = rel.x();
    row(1) = rel.y();
    row(2) = rel.z();
    row(3) = cloud.colors[i][0] / 255.0;
    row(4) = cloud.colors[i][1] / 255.0;
    row(5) = cloud.colors[i][2] / 255.0;
    row(6) = std::clamp((pos[i].z() - lo.z()) / params.heightScale, 0.0, 1.0);

    const auto nb = grid.knn(pos[i], params.neighbors);
    Vec3 mean = Vec3::Zero();
    for (int j : nb) mean += pos[j];
    mean /= static_cast<double>(nb.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (int j : nb) {
      const Vec3 d = pos[j] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(nb.size());
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov, Eigen::EigenvaluesOnly);
    const double l1 = std::max(eig.eigenvalues()(2), 0.0);
    const double l2 = std::max(eig.eigenvalues()(1), 0.0);
    const double l3 = std::max(eig.eigenvalues()(0), 0.0);
    if (l1 < 1e-12) {
      row(7) = row(8) = row(9) = 0.0;
    } else {
      row(7) = std::clamp((l1 - l2) / l1, 0.0, 1.0);
      row(8) = std::clamp((l2 - l3) / l1, 0.0, 1.0);
      row(9) = std::clamp(l3 / l1, 0.0, 1.0);
    }
  }
  return feats;
}

PointFeatures gather_rows(const PointFeatures& feats, std::span<const int> rows) {
  PointFeatures out;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), feats.values.cols());
  for (size_t k = 0; k < rows.size(); ++k) out.values.row(static_cast<Eigen::Index>(k)) = feats.values.row(rows[k]);
  return out;
}

PointFeatures concat_rows(std::span<const PointFeatures* const> parts) {
  Eigen::Index rows = 0, cols = kFeatureDim;
  for (const auto* p : parts) {
    rows += p->values.rows();
    cols = p->values.cols();
  }
  PointFeatures out;
  out.values.resize(rows, cols);
  Eigen::Index at = 0;
  for (const auto* p : parts) {
    out.values.middleRows(at, p->values.rows()) = p->values;
    at += p->values.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

NetworkDims ModelParams::dims() const {
  return {static_cast<int>(backbone.W1.cols()), static_cast<int>(backbone.W1.rows()),
          static_cast<int>(backbone.W2.rows()), static_cast<int>(Wc.rows())};
}

ModelParams zero_model(const NetworkDims& d) {
  ModelParams p;
  p.backbone.W1 = Mat::Zero(d.hidden, d.features);
  p.backbone.b1 = Vec::Zero(d.hidden);
  p.backbone.W2 = Mat::Zero(d.embed, d.hidden);
  p.backbone.b2 = Vec::Zero(d.embed);
  p.Wc = Mat::Zero(d.categories, d.embed);
  p.bc = Vec::Zero(d.categories);
  p.Wo = Mat::Zero(3, d.embed);
  p.bo = Vec::Zero(3);
  return p;
}

ModelParams init_model(const NetworkDims& d, uint64_t seed) {
  if (d.features < 1 || d.hidden < 1 || d.embed < 1 || d.categories < 1) throw Error("invalid network dims");
  ModelParams p = zero_model(d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Mat& m, double stddev) {
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = stddev * normal(rng);
  };
  fill(p.backbone.W1, std::sqrt(2.0 / d.features));
  fill(p.backbone.W2, std::sqrt(1.0 / d.hidden));
  fill(p.Wc, std::sqrt(1.0 / d.embed));
  fill(p.Wo, 0.1 * std::sqrt(1.0 / d.embed));
  return p;
}

void check_model(const ModelParams& p) {
  const auto d = p.dims();
  const bool ok = p.backbone.b1.size() == d.hidden && p.backbone.W2.cols() == d.hidden &&
                  p.backbone.b2.size() == d.embed && p.Wc.cols() == d.embed && p.bc.size() == d.categories &&
                  p.Wo.rows() == 3 && p.Wo.cols() == d.embed && p.bo.size() == 3;
  if (!ok) throw Error("model dimensions are inconsistent");
  bool finite = true;
  for_each_block(p, [&](ParamGroup, std::span<const double> w) {
    for (double v : w) finite = finite && std::isfinite(v);
  });
  if (!finite) throw Error("model has non-finite weights");
}

namespace {

template <typename M>
std::span<double> as_span(M& m) {
  return {m.data(), static_cast<size_t>(m.size())};
}
template <typename M>
std::span<const double> as_cspan(const M& m) {
  return {m.data(), static_cast<size_t>(m.size())};
}

}  // namespace

void for_each_block(ModelParams& p, const std::function<void(ParamGroup, std::span<double>)>& fn) {
  fn(ParamGroup::Backbone, as_span(p.backbone.W1));
  fn(ParamGroup::Backbone, as_span(p.backbone.b1));
  fn(ParamGroup::Backbone, as_span(p.backbone.W2));
  fn(ParamGroup::Backbone, as_span(p.backbone.b2));
  fn(ParamGroup::CategoryHead, as_span(p.Wc));
  fn(ParamGroup::CategoryHead, as_span(p.bc));
  fn(ParamGroup::OffsetHead, as_span(p.Wo));
  fn(ParamGroup::OffsetHead, as_span(p.bo));
}

void for_each_block(const ModelParams& p, const std::function<void(ParamGroup, std::span<const double>)>& fn) {
  fn(ParamGroup::Backbone, as_cspan(p.backbone.W1));
  fn(ParamGroup::Backbone, as_cspan(p.backbone.b1));
  fn(ParamGroup::Backbone, as_cspan(p.backbone.W2));
  fn(ParamGroup::Backbone, as_cspan(p.backbone.b2));
  fn(ParamGroup::CategoryHead, as_cspan(p.Wc));
  fn(ParamGroup::CategoryHead, as_cspan(p.bc));
  fn(ParamGroup::OffsetHead, as_cspan(p.Wo));
  fn(ParamGroup::OffsetHead, as_cspan(p.bo));
}

void for_each_block(const ModelParams& a, ModelParams& b,
                    const std::function<void(ParamGroup, std::span<const double>, std::span<double>)>& fn) {
  std::vector<std::pair<ParamGroup, std::span<const double>>> lhs;
  for_each_block(a, [&](ParamGroup g, std::span<const double> w) { lhs.emplace_back(g, w); });
  size_t k = 0;
  for_each_block(b, [&](ParamGroup g, std::span<double> w) {
    if (lhs[k].second.size() != w.size()) throw Error("parameter shape mismatch");
    fn(g, lhs[k].second, w);
    ++k;
  });
}

Vec flatten(const ModelParams& p) {
  std::vector<double> flat;
  for_each_block(p, [&](ParamGroup, std::span<const double> w) { flat.insert(flat.end(), w.begin(), w.end()); });
  return Eigen::Map<Vec>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

void unflatten(const Vec& flat, ModelParams& p) {
  Eigen::Index at = 0;
  for_each_block(p, [&](ParamGroup, std::span<double> w) {
    if (at + static_cast<Eigen::Index>(w.size()) > flat.size()) throw Error("flat parameter vector too short");
    std::copy(flat.data() + at, flat.data() + at + w.size(), w.begin());
    at += static_cast<Eigen::Index>(w.size());
  });
  if (at != flat.size()) throw Error("flat parameter vector too long");
}

// ---------------------------------------------------------------------------
// Forward / backward

BackboneCache backbone_forward(const Backbone& bb, const Eigen::Ref<const Mat>& X) {
  if (X.rows() != bb.W1.cols()) throw Error("feature dimension mismatch");
  BackboneCache c;
  c.Z1.noalias() = bb.W1 * X;
  c.Z1.colwise() += bb.b1;
  c.H = c.Z1.cwiseMax(0.0);
  c.U.noalias() = bb.W2 * c.H;
  c.U.colwise() += bb.b2;
  return c;
}

void backbone_backward(const Backbone& bb, const Eigen::Ref<const Mat>& X, const BackboneCache& cache,
                       const Mat& dU, Backbone& grad) {
  grad.W2.noalias() += dU * cache.H.transpose();
  grad.b2 += dU.rowwise().sum();
  Mat dZ1 = bb.W2.transpose() * dU;
  dZ1 = dZ1.cwiseProduct((cache.Z1.array() > 0.0).cast<double>().matrix());
  grad.W1.noalias() += dZ1 * X.transpose();
  grad.b1 += dZ1.rowwise().sum();
}

Mat softmax_columns(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - mx).exp().matrix();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

Mat softmax_rows(const Mat& logits) { return softmax_columns(logits.transpose()).transpose(); }

Prediction forward_points(const ModelParams& params, const PointFeatures& feats) {
  check_model(params);
  const Mat X = feats.columns();
  const BackboneCache c = backbone_forward(params.backbone, X);
  Mat logits = params.Wc * c.U;
  logits.colwise() += params.bc;
  Mat offs = params.Wo * c.U;
  offs.colwise() += params.bo;
  Prediction pred;
  pred.pointProbs = softmax_columns(logits).transpose();
  pred.pointEmbed = c.U.transpose();
  pred.pointOffset = offs.transpose();
  return pred;
}

Prediction forward(const ModelParams& params, const PointFeatures& feats, const SuperVoxelPartition& part) {
  Prediction pred = forward_points(params, feats);
  pred.pooledProbs = pool_probs(pred.pointProbs, part);
  pred.pooledEmbed = pool_rows(pred.pointEmbed, part);
  pred.pooledOffset = pool_rows(pred.pointOffset, part);
  return pred;
}

namespace {

/// Loss and dL/dlogits for a batch given as columns.
double ce_columns(const Mat& logits, std::span<const int> labels, const std::optional<std::vector<double>>& weights,
                  Mat& dLogits) {
  const Mat probs = softmax_columns(logits);
  dLogits = Mat::Zero(logits.rows(), logits.cols());
  double total = 0.0, norm = 0.0;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0) continue;
    if (y >= logits.rows()) throw Error("label " + std::to_string(y) + " exceeds category count");
    const double w = weights ? (*weights)[static_cast<size_t>(y)] : 1.0;
    if (w == 0.0) continue;
    total -= w * std::log(std::max(probs(y, i), 1e-300));
    norm += w;
    dLogits.col(i) = w * probs.col(i);
    dLogits(y, i) -= w;
  }
  if (norm == 0.0) throw Error("no labeled points");
  dLogits /= norm;
  return total / norm;
}

}  // namespace

LossAndGrad ce_loss_and_grad(const ModelParams& params, const PointFeatures& feats, std::span<const int> labels,
                             const std::optional<std::vector<double>>& classWeights) {
  if (labels.size() != feats.size()) throw Error("labels length mismatch");
  std::vector<int> rows;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) rows.push_back(static_cast<int>(i));
  }
  if (rows.empty()) throw Error("no labeled points");
  const PointFeatures sub = gather_rows(feats, rows);
  std::vector<int> sublabels;
  sublabels.reserve(rows.size());
  for (int r : rows) sublabels.push_back(labels[r]);

  const Mat X = sub.columns();
  const BackboneCache c = backbone_forward(params.backbone, X);
  Mat logits = params.Wc * c.U;
  logits.colwise() += params.bc;

  LossAndGrad out;
  out.grad = zero_model(params.dims());
  Mat dLogits;
  out.loss = ce_columns(logits, sublabels, classWeights, dLogits);
  out.grad.Wc.noalias() = dLogits * c.U.transpose();
  out.grad.bc = dLogits.rowwise().sum();
  const Mat dU = params.Wc.transpose() * dLogits;
  backbone_backward(params.backbone, X, c, dU, out.grad.backbone);
  return out;
}

std::vector<double> inverse_frequency_weights(std::span<const int> labels, int categories) {
  std::vector<double> count(static_cast<size_t>(categories), 0.0);
  for (int y : labels) {
    if (y >= 0 && y < categories) count[static_cast<size_t>(y)] += 1.0;
  }
  std::vector<double> w(static_cast<size_t>(categories), 0.0);
  double sum = 0.0;
  int present = 0;
  for (size_t c = 0; c < w.size(); ++c) {
    if (count[c] > 0.0) {
      w[c] = 1.0 / count[c];
      sum += w[c];
      ++present;
    }
  }
  if (present > 0) {
    for (auto& v : w) v *= present / sum;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Training

bool TrainMask::allows(ParamGroup g) const {
  switch (g) {
    case ParamGroup::Backbone: return backbone;
    case ParamGroup::CategoryHead: return categoryHead;
    case ParamGroup::OffsetHead: return offsetHead;
  }
  return false;
}

void sgd_step(ModelParams& params, const ModelGrad& grad, ModelGrad& velocity, double lr, double momentum,
              const TrainMask& mask) {
  for_each_block(grad, velocity, [&](ParamGroup g, std::span<const double> gr, std::span<double> v) {
    if (!mask.allows(g)) return;
    for (size_t k = 0; k < v.size(); ++k) v[k] = momentum * v[k] + gr[k];
  });
  for_each_block(velocity, params, [&](ParamGroup g, std::span<const double> v, std::span<double> w) {
    if (!mask.allows(g)) return;
    for (size_t k = 0; k < w.size(); ++k) w[k] -= lr * v[k];
  });
}

double cosine_lr(double base, int epoch, int epochs, bool enabled) {
  if (!enabled || epochs <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

std::vector<std::vector<int>> epoch_batches(std::span<const int> pool, int64_t cap, int batchSize,
                                            std::mt19937_64& rng) {
  std::vector<int> order(pool.begin(), pool.end());
  const size_t take = cap > 0 ? std::min(order.size(), static_cast<size_t>(cap)) : order.size();
  // Partial Fisher-Yates: the first `take` entries become a uniform sample.
  for (size_t k = 0; k < take && k + 1 < order.size(); ++k) {
    std::uniform_int_distribution<size_t> pick(k, order.size() - 1);
    std::swap(order[k], order[pick(rng)]);
  }
  order.resize(take);
  const size_t bs = batchSize > 0 ? static_cast<size_t>(batchSize) : std::max<size_t>(take, 1);
  std::vector<std::vector<int>> batches;
  for (size_t at = 0; at < take; at += bs) {
    batches.emplace_back(order.begin() + static_cast<long>(at), order.begin() + static_cast<long>(std::min(take, at + bs)));
  }
  return batches;
}

TrainResult train(ModelParams params, const PointFeatures& feats, std::span<const int> labels, int epochs,
                  uint64_t seed, const TrainOptions& options) {
  check_model(params);
  if (labels.size() != feats.size()) throw Error("labels length mismatch");
  std::vector<int> pool;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) pool.push_back(static_cast<int>(i));
  }
  if (pool.empty()) throw Error("no labeled points to train on");

  TrainResult result;
  const TrainSchedule& sch = params.schedule;
  ModelGrad velocity = zero_model(params.dims());
  std::mt19937_64 rng(seed);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = cosine_lr(sch.learningRate, epoch, epochs, sch.cosineDecay);
    double sum = 0.0;
    size_t steps = 0;
    for (const auto& batch : epoch_batches(pool, sch.sampleCap, sch.batchSize, rng)) {
      const PointFeatures bf = gather_rows(feats, batch);
      std::vector<int> bl;
      bl.reserve(batch.size());
      for (int i : batch) bl.push_back(labels[i]);
      LossAndGrad lg = ce_loss_and_grad(params, bf, bl, options.classWeights);
      if (!std::isfinite(lg.loss)) {
        throw Error("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
      }
      sgd_step(params, lg.grad, velocity, lr, sch.momentum, options.mask);
      if (options.afterStep) options.afterStep(params);
      sum += lg.loss;
      ++steps;
    }
    result.lossCurve.push_back(steps ? sum / static_cast<double>(steps) : 0.0);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace otoc
