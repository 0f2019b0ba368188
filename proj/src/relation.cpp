#include "otoc/relation.hpp"

#include <cmath>
#include <random>

namespace otoc {

RelationParams relation_from_model(const ModelParams& model) { return {model.backbone}; }

RelationParams init_relation(const NetworkDims& dims, uint64_t seed) { return {init_model(dims, seed).backbone}; }

PrototypeBank init_bank(int categories, int dim, uint64_t seed, double momentum, double temperature) {
  if (categories < 1 || dim < 1) throw Error("invalid bank shape");
  PrototypeBank bank;
  bank.momentum = momentum;
  bank.temperature = temperature;
  bank.keys.resize(categories, dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int c = 0; c < categories; ++c) {
    do {
      for (int d = 0; d < dim; ++d) bank.keys(c, d) = normal(rng);
    } while (bank.keys.row(c).norm() < 1e-12);
    bank.keys.row(c).normalize();
  }
  return bank;
}

Mat normalize_rows(const Mat& rows, std::vector<int>* degenerate) {
  Mat out = rows;
  for (Eigen::Index j = 0; j < out.rows(); ++j) {
    const double norm = out.row(j).norm();
    if (norm > 0.0 && std::isfinite(norm)) {
      out.row(j) /= norm;
    } else {
      out.row(j).setZero();
      out(j, 0) = 1.0;
      if (degenerate) degenerate->push_back(static_cast<int>(j));
    }
  }
  return out;
}

Embedding embed(const RelationParams& rel, const PointFeatures& feats, const SuperVoxelPartition& part) {
  const Mat X = feats.columns();
  const BackboneCache c = backbone_forward(rel.backbone, X);
  Embedding e;
  e.pooled = pool_rows(c.U.transpose(), part);
  e.f = normalize_rows(e.pooled, &e.degenerate);
  if (!e.degenerate.empty()) {
    log_warning(std::to_string(e.degenerate.size()) + " zero embedding(s) replaced by e_0");
  }
  return e;
}

ContrastiveResult contrastive_loss_and_grad(const Mat& f, const PrototypeBank& bank, std::span<const int> labels) {
  if (static_cast<size_t>(f.rows()) != labels.size()) throw Error("contrastive: labels length mismatch");
  if (f.cols() != bank.keys.cols()) throw Error("contrastive: embedding dimension mismatch");
  const Mat probs = relation_probs(f, bank);
  ContrastiveResult out;
  out.grad = Mat::Zero(f.rows(), f.cols());
  Mat dz = Mat::Zero(f.rows(), bank.keys.rows());
  for (Eigen::Index j = 0; j < f.rows(); ++j) {
    const int y = labels[static_cast<size_t>(j)];
    if (y < 0) continue;
    if (y >= bank.categories()) throw Error("contrastive: label exceeds category count");
    out.loss -= std::log(std::max(probs(j, y), 1e-300));
    dz.row(j) = probs.row(j);
    dz(j, y) -= 1.0;
    ++out.labeled;
  }
  if (out.labeled == 0) throw Error("contrastive: no labeled super-voxels");
  out.loss /= out.labeled;
  out.grad = dz * bank.keys / (bank.temperature * out.labeled);
  return out;
}

Vec bank_blend(const PrototypeBank& bank, const Eigen::Ref<const Vec>& f, int category) {
  if (category < 0 || category >= bank.categories()) throw Error("bank update: invalid category");
  if (f.size() != bank.dim()) throw Error("bank update: dimension mismatch");
  return bank.momentum * bank.keys.row(category).transpose() + (1.0 - bank.momentum) * f;
}

void bank_update(PrototypeBank& bank, const Eigen::Ref<const Vec>& f, int category) {
  const Vec blended = bank_blend(bank, f, category);
  if (bank.momentum == 1.0) return;  // identity; avoid renormalization drift
  const double norm = blended.norm();
  if (norm > 0.0) bank.keys.row(category) = blended.transpose() / norm;
}

Mat relation_probs(const Mat& f, const PrototypeBank& bank) {
  if (f.cols() != bank.keys.cols()) throw Error("relation_probs: dimension mismatch");
  return softmax_rows(f * bank.keys.transpose() / bank.temperature);
}

Mat combine_probs(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("combine_probs: shape mismatch");
  Mat out = a.cwiseProduct(b);
  for (Eigen::Index j = 0; j < out.rows(); ++j) {
    const double s = out.row(j).sum();
    if (s > 0.0) {
      out.row(j) /= s;
    } else {
      out.row(j).setConstant(1.0 / static_cast<double>(out.cols()));
    }
  }
  return out;
}

RelationParams weight_ema(const RelationParams& rel, const ModelParams& model, double m) {
  const Backbone& t = model.backbone;
  const Backbone& r = rel.backbone;
  if (r.W1.rows() != t.W1.rows() || r.W1.cols() != t.W1.cols() || r.W2.rows() != t.W2.rows() ||
      r.W2.cols() != t.W2.cols() || r.b1.size() != t.b1.size() || r.b2.size() != t.b2.size()) {
    throw Error("weight_ema: shape mismatch");
  }
  RelationParams out;
  out.backbone.W1 = m * r.W1 + (1.0 - m) * t.W1;
  out.backbone.b1 = m * r.b1 + (1.0 - m) * t.b1;
  out.backbone.W2 = m * r.W2 + (1.0 - m) * t.W2;
  out.backbone.b2 = m * r.b2 + (1.0 - m) * t.b2;
  return out;
}

RelationLoss relation_loss_and_grad(const RelationParams& rel, const PointFeatures& feats,
                                    const SuperVoxelPartition& part, std::span<const int> svBatch,
                                    std::span<const int> svLabels, const PrototypeBank& bank) {
  if (svBatch.size() != svLabels.size()) throw Error("relation loss: batch/label length mismatch");
  std::vector<int> rows;
  std::vector<int> owner;  // batch slot of each gathered point
  for (size_t b = 0; b < svBatch.size(); ++b) {
    for (int i : part.members[svBatch[b]]) {
      rows.push_back(i);
      owner.push_back(static_cast<int>(b));
    }
  }
  const Mat X = gather_rows(feats, rows).columns();
  const BackboneCache c = backbone_forward(rel.backbone, X);
  const Eigen::Index D = c.U.rows();
  const auto B = static_cast<Eigen::Index>(svBatch.size());

  Mat pooled = Mat::Zero(B, D);
  std::vector<double> count(svBatch.size(), 0.0);
  for (size_t k = 0; k < rows.size(); ++k) {
    pooled.row(owner[k]) += c.U.col(static_cast<Eigen::Index>(k)).transpose();
    count[owner[k]] += 1.0;
  }
  for (Eigen::Index b = 0; b < B; ++b) pooled.row(b) /= count[b];
  std::vector<int> degenerate;
  const Mat f = normalize_rows(pooled, &degenerate);

  const ContrastiveResult cr = contrastive_loss_and_grad(f, bank, svLabels);
  // Back through normalization: dL/dg = (I - f f^T) dL/df / |g|.
  Mat dPooled = Mat::Zero(B, D);
  for (Eigen::Index b = 0; b < B; ++b) {
    const double norm = pooled.row(b).norm();
    if (!(norm > 0.0)) continue;
    const auto fb = f.row(b);
    const auto gb = cr.grad.row(b);
    dPooled.row(b) = (gb - fb * fb.dot(gb)) / norm;
  }
  Mat dU(D, static_cast<Eigen::Index>(rows.size()));
  for (size_t k = 0; k < rows.size(); ++k) {
    dU.col(static_cast<Eigen::Index>(k)) = dPooled.row(owner[k]).transpose() / count[owner[k]];
  }

  RelationLoss out;
  out.loss = cr.loss;
  out.f = f;
  out.grad.W1 = Mat::Zero(rel.backbone.W1.rows(), rel.backbone.W1.cols());
  out.grad.b1 = Vec::Zero(rel.backbone.b1.size());
  out.grad.W2 = Mat::Zero(rel.backbone.W2.rows(), rel.backbone.W2.cols());
  out.grad.b2 = Vec::Zero(rel.backbone.b2.size());
  backbone_backward(rel.backbone, X, c, dU, out.grad);
  return out;
}

// ---------------------------------------------------------------------------

AttentionParams zero_attention(int dim, int dl, int categories) {
  if (dim < 1 || dl < 1 || categories < 1) throw Error("invalid attention dims");
  AttentionParams a;
  a.Wq = Mat::Zero(dl, dim);
  a.Wk = Mat::Zero(dl, dim);
  a.Wv = Mat::Zero(dl, dim);
  a.bq = Vec::Zero(dl);
  a.bk = Vec::Zero(dl);
  a.bv = Vec::Zero(dl);
  a.Wf = Mat::Zero(categories, dim + dl);
  a.bf = Vec::Zero(categories);
  return a;
}

AttentionParams init_attention(int dim, int dl, int categories, uint64_t seed) {
  AttentionParams a = zero_attention(dim, dl, categories);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Mat& m, double stddev) {
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = stddev * normal(rng);
  };
  const double s = std::sqrt(1.0 / dim);
  fill(a.Wq, s);
  fill(a.Wk, s);
  fill(a.Wv, s);
  fill(a.Wf, std::sqrt(1.0 / (dim + dl)));
  return a;
}

namespace {

struct AttentionCache {
  Mat Q, KK, VV, A, Fhat, Z, P;
};

AttentionCache attention_forward(const AttentionParams& att, const Mat& F, const PrototypeBank& bank) {
  const Eigen::Index D = F.cols();
  if (att.Wq.cols() != D || bank.keys.cols() != D) throw Error("transformer: dimension mismatch");
  if (att.Wf.rows() != bank.keys.rows() || att.Wf.cols() != D + att.dl()) {
    throw Error("transformer: fusion layer shape mismatch");
  }
  AttentionCache c;
  c.Q = F * att.Wq.transpose();
  c.Q.rowwise() += att.bq.transpose();
  c.KK = bank.keys * att.Wk.transpose();
  c.KK.rowwise() += att.bk.transpose();
  c.VV = bank.keys * att.Wv.transpose();
  c.VV.rowwise() += att.bv.transpose();
  c.A = softmax_rows(c.Q * c.KK.transpose() / std::sqrt(static_cast<double>(att.dl())));
  c.Fhat = c.A * c.VV;
  c.Z = F * att.Wf.leftCols(D).transpose() + c.Fhat * att.Wf.rightCols(att.dl()).transpose();
  c.Z.rowwise() += att.bf.transpose();
  c.P = softmax_rows(c.Z);
  return c;
}

}  // namespace

TransformerOutput transformer_propagate(const AttentionParams& att, const Mat& F, const PrototypeBank& bank) {
  AttentionCache c = attention_forward(att, F, bank);
  return {std::move(c.Fhat), std::move(c.A), std::move(c.P)};
}

AttentionLoss attention_loss_and_grad(const AttentionParams& att, const Mat& F, const PrototypeBank& bank,
                                      std::span<const int> labels) {
  if (static_cast<size_t>(F.rows()) != labels.size()) throw Error("attention loss: labels length mismatch");
  const AttentionCache c = attention_forward(att, F, bank);
  const Eigen::Index D = F.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(att.dl()));

  Mat G = Mat::Zero(c.P.rows(), c.P.cols());
  AttentionLoss out;
  int labeled = 0;
  for (Eigen::Index j = 0; j < F.rows(); ++j) {
    const int y = labels[static_cast<size_t>(j)];
    if (y < 0) continue;
    if (y >= c.P.cols()) throw Error("attention loss: label exceeds category count");
    out.loss -= std::log(std::max(c.P(j, y), 1e-300));
    G.row(j) = c.P.row(j);
    G(j, y) -= 1.0;
    ++labeled;
  }
  if (labeled == 0) throw Error("attention loss: no labeled rows");
  out.loss /= labeled;
  G /= labeled;

  AttentionParams& g = out.grad;
  g = zero_attention(static_cast<int>(D), att.dl(), static_cast<int>(c.P.cols()));
  g.Wf.leftCols(D) = G.transpose() * F;
  g.Wf.rightCols(att.dl()) = G.transpose() * c.Fhat;
  g.bf = G.colwise().sum().transpose();

  const Mat dFhat = G * att.Wf.rightCols(att.dl());
  const Mat dVV = c.A.transpose() * dFhat;
  const Mat dA = dFhat * c.VV.transpose();
  Mat dS = c.A.cwiseProduct(dA);
  const Vec rowDot = dS.rowwise().sum();
  dS = c.A.cwiseProduct(dA.colwise() - rowDot);
  const Mat dQ = dS * c.KK * scale;
  const Mat dKK = dS.transpose() * c.Q * scale;

  g.Wq = dQ.transpose() * F;
  g.bq = dQ.colwise().sum().transpose();
  g.Wk = dKK.transpose() * bank.keys;
  g.bk = dKK.colwise().sum().transpose();
  g.Wv = dVV.transpose() * bank.keys;
  g.bv = dVV.colwise().sum().transpose();
  return out;
}

void for_each_block(AttentionParams& p, const std::function<void(std::span<double>)>& fn) {
  for (Mat* m : {&p.Wq, &p.Wk, &p.Wv, &p.Wf}) fn({m->data(), static_cast<size_t>(m->size())});
  for (Vec* v : {&p.bq, &p.bk, &p.bv, &p.bf}) fn({v->data(), static_cast<size_t>(v->size())});
}

Vec flatten(const AttentionParams& p) {
  AttentionParams copy = p;
  std::vector<double> flat;
  for_each_block(copy, [&](std::span<double> w) { flat.insert(flat.end(), w.begin(), w.end()); });
  return Eigen::Map<Vec>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

void unflatten(const Vec& flat, AttentionParams& p) {
  Eigen::Index at = 0;
  for_each_block(p, [&](std::span<double> w) {
    if (at + static_cast<Eigen::Index>(w.size()) > flat.size()) throw Error("flat attention vector too short");
    std::copy(flat.data() + at, flat.data() + at + w.size(), w.begin());
    at += static_cast<Eigen::Index>(w.size());
  });
  if (at != flat.size()) throw Error("flat attention vector too long");
}

Vec flatten(const Backbone& b) {
  Vec out(b.W1.size() + b.b1.size() + b.W2.size() + b.b2.size());
  Eigen::Index at = 0;
  out.segment(at, b.W1.size()) = Eigen::Map<const Vec>(b.W1.data(), b.W1.size());
  at += b.W1.size();
  out.segment(at, b.b1.size()) = b.b1;
  at += b.b1.size();
  out.segment(at, b.W2.size()) = Eigen::Map<const Vec>(b.W2.data(), b.W2.size());
  at += b.W2.size();
  out.segment(at, b.b2.size()) = b.b2;
  return out;
}

void unflatten(const Vec& flat, Backbone& b) {
  if (flat.size() != b.W1.size() + b.b1.size() + b.W2.size() + b.b2.size()) throw Error("backbone size mismatch");
  Eigen::Index at = 0;
  Eigen::Map<Vec>(b.W1.data(), b.W1.size()) = flat.segment(at, b.W1.size());
  at += b.W1.size();
  b.b1 = flat.segment(at, b.b1.size());
  at += b.b1.size();
  Eigen::Map<Vec>(b.W2.data(), b.W2.size()) = flat.segment(at, b.W2.size());
  at += b.W2.size();
  b.b2 = flat.segment(at, b.b2.size());
}

}  // namespace otoc
