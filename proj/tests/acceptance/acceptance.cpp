// Acceptance checks. Each criterion prints one PASS/FAIL line; the exit
// status is non-zero when any selected criterion fails.
//
//   acceptance [criterion...] [--cli PATH] [--golden PATH] [--write-golden]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fd.hpp"
#include "otoc/checkpoint.hpp"
#include "otoc/config.hpp"
#include "otoc/crf.hpp"
#include "otoc/eval.hpp"
#include "otoc/instance.hpp"
#include "otoc/relation.hpp"
#include "otoc/selftrain.hpp"
#include "otoc/synth.hpp"
#include "testing.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace otoc;
using otoc::testing::central_diff;
using otoc::testing::compare_gradients;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Options {
  fs::path cli;
  fs::path golden;
  bool writeGolden = false;
};

Options gOpts;

// ---------------------------------------------------------------------------
// Gradients

constexpr double kStep = 1e-5;
constexpr double kGradTol = 1e-4;
// Finite differences are meaningless across a ReLU or |.| kink; instances
// with any kink argument closer than this are redrawn.
constexpr double kKinkMargin = 1e-2;

struct RandomNet {
  ModelParams model;
  PointFeatures feats;
};

RandomNet random_net(std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<int> hid(3, 8), emb(2, 6), cat(2, 5);
  NetworkDims d{kFeatureDim, hid(rng), emb(rng), cat(rng)};
  RandomNet r;
  r.model = init_model(d, rng());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto* v : {&r.model.backbone.b1, &r.model.backbone.b2, &r.model.bc, &r.model.bo}) {
    for (Eigen::Index k = 0; k < v->size(); ++k) (*v)[k] = 0.5 * normal(rng);
  }
  r.model.Wo *= 10.0;
  r.feats.values.resize(n, kFeatureDim);
  for (Eigen::Index k = 0; k < r.feats.values.size(); ++k) r.feats.values.data()[k] = normal(rng);
  return r;
}

double min_relu_margin(const ModelParams& m, const PointFeatures& feats) {
  const BackboneCache c = backbone_forward(m.backbone, feats.columns());
  return c.Z1.cwiseAbs().minCoeff();
}

double loss_at(ModelParams m, const Vec& flat, const std::function<double(const ModelParams&)>& loss) {
  unflatten(flat, m);
  return loss(m);
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240501);
  double worst[3] = {0, 0, 0};
  int redrawn[3] = {0, 0, 0};
  long checked[3] = {0, 0, 0};
  constexpr int kInstances = 100;

  // Cross-entropy of the point network, with and without class weights.
  for (int inst = 0; inst < kInstances;) {
    const int n = std::uniform_int_distribution<int>(3, 12)(rng);
    RandomNet r = random_net(rng, n);
    if (min_relu_margin(r.model, r.feats) < kKinkMargin) {
      ++redrawn[0];
      continue;
    }
    const int C = r.model.dims().categories;
    std::vector<int> labels(n);
    for (auto& y : labels) y = std::uniform_int_distribution<int>(-1, C - 1)(rng);
    labels[0] = 0;
    std::optional<std::vector<double>> weights;
    if (inst % 2) {
      weights.emplace(C);
      for (auto& w : *weights) w = std::uniform_real_distribution<double>(0.2, 2.0)(rng);
    }
    auto f = [&](const ModelParams& m) { return ce_loss_and_grad(m, r.feats, labels, weights).loss; };
    const Vec analytic = flatten(ce_loss_and_grad(r.model, r.feats, labels, weights).grad);
    const Vec numeric = central_diff([&](const Vec& x) { return loss_at(r.model, x, f); }, flatten(r.model), kStep);
    const auto cmp = compare_gradients(analytic, numeric);
    worst[0] = std::max(worst[0], cmp.maxRel);
    checked[0] += cmp.checked;
    ++inst;
  }

  // Prototype contrastive loss with respect to the embeddings.
  for (int inst = 0; inst < kInstances; ++inst) {
    std::uniform_int_distribution<int> mdist(2, 10), ddist(2, 8), cdist(2, 6);
    const int M = mdist(rng), D = ddist(rng), C = cdist(rng);
    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const PrototypeBank bank = init_bank(C, D, rng(), 0.9, tau);
    Mat f(M, D);
    std::normal_distribution<double> normal(0.0, 0.5);
    for (Eigen::Index k = 0; k < f.size(); ++k) f.data()[k] = normal(rng);
    std::vector<int> labels(M);
    for (auto& y : labels) y = std::uniform_int_distribution<int>(-1, C - 1)(rng);
    labels[0] = C - 1;
    const ContrastiveResult res = contrastive_loss_and_grad(f, bank, labels);
    const Vec analytic = Eigen::Map<const Vec>(res.grad.data(), res.grad.size());
    const Vec numeric = central_diff(
        [&](const Vec& x) {
          const Mat fx = Eigen::Map<const Mat>(x.data(), M, D);
          return contrastive_loss_and_grad(fx, bank, labels).loss;
        },
        Eigen::Map<const Vec>(f.data(), f.size()), kStep);
    const auto cmp = compare_gradients(analytic, numeric);
    worst[1] = std::max(worst[1], cmp.maxRel);
    checked[1] += cmp.checked;
  }

  // L1 offset loss toward pseudo-instance centroids.
  for (int inst = 0; inst < kInstances;) {
    const int n = std::uniform_int_distribution<int>(4, 14)(rng);
    RandomNet r = random_net(rng, n);
    PointCloud cloud = otoc::testing::random_cloud(static_cast<size_t>(n), rng(), 2.0);
    const int M = std::uniform_int_distribution<int>(2, std::min(n, 6))(rng);
    std::vector<int> svId(n);
    for (int i = 0; i < n; ++i) svId[i] = i < M ? i : std::uniform_int_distribution<int>(0, M - 1)(rng);
    const SuperVoxelPartition part = make_partition(cloud, svId);
    InstancePseudoLabels labels;
    labels.seeds = {{0, 1}, {1, 1}};
    std::uniform_real_distribution<double> cu(-1.0, 1.0);
    labels.centroid = {Vec3(cu(rng), cu(rng), cu(rng)), Vec3(cu(rng), cu(rng), cu(rng))};
    labels.instance.resize(M);
    for (auto& v : labels.instance) v = std::uniform_int_distribution<int>(-1, 1)(rng);
    labels.instance[0] = 0;
    std::vector<int> subset;
    const bool useSubset = inst % 2 == 1;
    for (int j = 0; j < M; ++j) {
      if (!useSubset || j % 2 == 0) subset.push_back(j);
    }
    const std::vector<int>* svs = useSubset ? &subset : nullptr;

    // Reject draws with a residual component near the |.| kink.
    const Prediction pred = forward(r.model, r.feats, part);
    double margin = min_relu_margin(r.model, r.feats);
    for (int j = 0; j < M; ++j) {
      if (labels.instance[j] < 0) continue;
      const Vec3 target = labels.centroid[labels.instance[j]] - part.meanPos[j];
      margin = std::min(margin, (pred.pooledOffset.row(j).transpose() - target).cwiseAbs().minCoeff());
    }
    if (margin < kKinkMargin) {
      ++redrawn[2];
      continue;
    }
    auto f = [&](const ModelParams& m) { return offset_loss_and_grad(m, r.feats, part, labels, svs).loss; };
    const Vec analytic = flatten(offset_loss_and_grad(r.model, r.feats, part, labels, svs).grad);
    const Vec numeric = central_diff([&](const Vec& x) { return loss_at(r.model, x, f); }, flatten(r.model), kStep);
    const auto cmp = compare_gradients(analytic, numeric);
    worst[2] = std::max(worst[2], cmp.maxRel);
    checked[2] += cmp.checked;
    ++inst;
  }

  const double secs = seconds_since(t0);
  const bool ok = worst[0] < kGradTol && worst[1] < kGradTol && worst[2] < kGradTol && secs < 60.0;
  return {ok, fmt("max rel err ce %.2e, contrastive %.2e, offset %.2e over %d instances each "
                  "(%ld/%ld/%ld coords; redrawn at kinks %d/%d/%d); %.1fs",
                  worst[0], worst[1], worst[2], kInstances, checked[0], checked[1], checked[2], redrawn[0],
                  redrawn[1], redrawn[2], secs)};
}

// ---------------------------------------------------------------------------
// Mean field

Mat random_unary(std::mt19937_64& rng, int M, int C) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Mat p(M, C);
  for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = u(rng);
  for (int j = 0; j < M; ++j) p.row(j) /= p.row(j).sum();
  return p;
}

Mat random_kernel(std::mt19937_64& rng, int M, double density) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat k = Mat::Zero(M, M);
  for (int a = 0; a < M; ++a) {
    for (int b = a + 1; b < M; ++b) {
      if (u(rng) < density) k(a, b) = k(b, a) = u(rng);
    }
  }
  return k;
}

// Independent fixed-point oracle: damped parallel (Jacobi) iteration of the
// Potts mean-field equations, written from the update formula only.
Mat damped_fixed_point(const Mat& unary, const Mat& kernel) {
  const Eigen::Index M = unary.rows(), C = unary.cols();
  Mat Q = unary;
  for (int it = 0; it < 100000; ++it) {
    Mat next(M, C);
    for (Eigen::Index j = 0; j < M; ++j) {
      for (Eigen::Index l = 0; l < C; ++l) {
        double e = std::log(unary(j, l));
        for (Eigen::Index b = 0; b < M; ++b) {
          if (b != j) e -= kernel(j, b) * (1.0 - Q(b, l));
        }
        next(j, l) = std::exp(e);
      }
      next.row(j) /= next.row(j).sum();
    }
    const Mat blended = 0.5 * Q + 0.5 * next;
    const double delta = (blended - Q).cwiseAbs().maxCoeff();
    Q = blended;
    if (delta < 1e-15) break;
  }
  return Q;
}

Outcome mean_field_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(77);

  // (a) zero coupling.
  bool exact = true;
  for (int inst = 0; inst < 50; ++inst) {
    const int M = std::uniform_int_distribution<int>(1, 40)(rng), C = std::uniform_int_distribution<int>(2, 5)(rng);
    const Mat unary = random_unary(rng, M, C);
    const MeanFieldResult r = mean_field(unary, PairwiseKernel::dense(Mat::Zero(M, M)));
    exact = exact && r.Q == clamp_unary(unary) && r.Q.isApprox(unary, 1e-15);
  }

  // (b) free energy per sequential sweep.
  double worstRise = -INFINITY;
  int sweeps = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const int M = std::uniform_int_distribution<int>(2, 50)(rng), C = std::uniform_int_distribution<int>(2, 5)(rng);
    const Mat unary = random_unary(rng, M, C);
    const PairwiseKernel k = PairwiseKernel::dense(random_kernel(rng, M, 0.5));
    const Mat u = clamp_unary(unary);
    Mat Q = u;
    double F = free_energy(Q, unary, k);
    for (int s = 0; s < 20; ++s) {
      mean_field_sweep(Q, u, k);
      const double next = free_energy(Q, unary, k);
      worstRise = std::max(worstRise, next - F);
      F = next;
      ++sweeps;
    }
  }

  // (c) 2-node fixed points: the documented instance plus random ones.
  double worstGap = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    Mat unary;
    Mat kernel = Mat::Zero(2, 2);
    if (inst == 0) {
      unary.resize(2, 2);
      unary << 0.8, 0.2, 0.6, 0.4;
      kernel(0, 1) = kernel(1, 0) = 1.0;
    } else {
      const int C = std::uniform_int_distribution<int>(2, 5)(rng);
      unary = random_unary(rng, 2, C);
      kernel(0, 1) = kernel(1, 0) = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    }
    const MeanFieldResult r = mean_field(unary, PairwiseKernel::dense(kernel), {1000, 1e-14});
    worstGap = std::max(worstGap, (r.Q - damped_fixed_point(clamp_unary(unary), kernel)).cwiseAbs().maxCoeff());
  }

  const double secs = seconds_since(t0);
  const bool ok = exact && worstRise <= 1e-9 && worstGap <= 1e-6 && secs < 60.0;
  return {ok, fmt("zero kernel exact %s; max free-energy rise %.2e over %d sweeps; 2-node oracle gap %.2e; %.1fs",
                  exact ? "yes" : "no", worstRise, sweeps, worstGap, secs)};
}

// ---------------------------------------------------------------------------
// EMA and bank closed forms

Outcome ema_bank_suite() {
  double err = 0.0;
  PrototypeBank bank;
  bank.keys = Mat(1, 2);
  bank.keys << 1.0, 0.0;
  bank.momentum = 0.9;
  const Vec f = Eigen::Vector2d(0.0, 1.0);
  const Vec blend = bank_blend(bank, f, 0);
  err = std::max(err, (blend - Eigen::Vector2d(0.9, 0.1)).cwiseAbs().maxCoeff());
  PrototypeBank updated = bank;
  bank_update(updated, f, 0);
  const double hand = 1.0 / std::sqrt(0.82);
  const double normErr = (updated.keys.row(0) - Eigen::RowVector2d(0.9 * hand, 0.1 * hand)).cwiseAbs().maxCoeff();
  const bool rounded = std::abs(updated.keys(0, 0) - 0.9939) < 1e-4 && std::abs(updated.keys(0, 1) - 0.1104) < 1e-4;

  PrototypeBank frozen = bank;
  frozen.momentum = 1.0;
  bank_update(frozen, f, 0);
  PrototypeBank replace = bank;
  replace.momentum = 0.0;
  bank_update(replace, f, 0);
  const bool identities = frozen.keys == bank.keys && replace.keys.row(0) == f.transpose();

  const NetworkDims dims{kFeatureDim, 4, 3, 2};
  auto constant_model = [&](double v) {
    ModelParams m = zero_model(dims);
    for_each_block(m, [&](ParamGroup, std::span<double> w) { std::fill(w.begin(), w.end(), v); });
    return m;
  };
  const RelationParams r2 = relation_from_model(constant_model(2.0));
  const RelationParams once = weight_ema(r2, constant_model(4.0), 0.9);
  const Vec onceFlat = flatten(once.backbone);
  err = std::max(err, (onceFlat.array() - 2.2).abs().maxCoeff());
  RelationParams twice = relation_from_model(constant_model(0.0));
  twice = weight_ema(twice, constant_model(1.0), 0.9);
  twice = weight_ema(twice, constant_model(1.0), 0.9);
  err = std::max(err, (flatten(twice.backbone).array() - 0.19).abs().maxCoeff());
  const bool emaIdentity = flatten(weight_ema(r2, constant_model(4.0), 1.0).backbone) == flatten(r2.backbone);

  const bool ok = err <= 1e-12 && normErr <= 1e-12 && rounded && identities && emaIdentity;
  return {ok, fmt("max closed-form error %.1e (bank blend, EMA 2.2 and 0.19); normalized row (%.4f, %.4f); "
                  "m=1 and m=0 identities %s",
                  std::max(err, normErr), updated.keys(0, 0), updated.keys(0, 1),
                  identities && emaIdentity ? "hold" : "broken")};
}

// ---------------------------------------------------------------------------
// Partition and pooling

PointCloud fuzz_cloud(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> sizes(1, 300), blobs(1, 5);
  const int n = sizes(rng);
  const int k = blobs(rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Eigen::Vector3f> centers;
  std::vector<float> spreads;
  for (int b = 0; b < k; ++b) {
    centers.emplace_back(static_cast<float>(4 * u(rng)), static_cast<float>(4 * u(rng)), static_cast<float>(u(rng)));
    spreads.push_back(static_cast<float>(0.01 + u(rng)));
  }
  PointCloud c;
  c.sceneId = "fuzz";
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::uniform_int_distribution<int> col(0, 255);
  for (int i = 0; i < n; ++i) {
    const int b = std::uniform_int_distribution<int>(0, k - 1)(rng);
    c.positions.push_back(centers[b] + spreads[b] * Eigen::Vector3f(g(rng), g(rng), g(rng)));
    // Occasional exact duplicates.
    if (i > 0 && u(rng) < 0.05) c.positions.back() = c.positions[i - 1];
    c.colors.push_back({static_cast<uint8_t>(col(rng)), static_cast<uint8_t>(col(rng)), static_cast<uint8_t>(col(rng))});
  }
  return c;
}

Outcome partition_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1000);
  int violations = 0;
  double worstSimplex = 0.0, worstMean = 0.0;
  long points = 0, svs = 0;
  std::string first;
  auto fail = [&](const std::string& what) {
    if (violations++ == 0) first = what;
  };
  for (int inst = 0; inst < 1000; ++inst) {
    const PointCloud cloud = fuzz_cloud(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PartitionParams pp;
    pp.voxelSeedSpacing = 0.05 + 1.5 * u(rng);
    pp.colorWeight = 3.0 * u(rng);
    pp.spatialWeight = 0.1 + 3.0 * u(rng);
    pp.maxIter = std::uniform_int_distribution<int>(1, 10)(rng);
    pp.rAdj = 0.02 + 0.3 * u(rng);
    const SuperVoxelPartition p = partition(cloud, pp);
    points += static_cast<long>(cloud.size());
    svs += static_cast<long>(p.size());

    if (p.svId.size() != cloud.size()) fail("svId length");
    std::vector<int> hits(cloud.size(), 0);
    for (size_t j = 0; j < p.size(); ++j) {
      if (p.members[j].empty()) fail("empty super-voxel");
      for (int i : p.members[j]) {
        if (i < 0 || static_cast<size_t>(i) >= cloud.size()) {
          fail("member out of range");
          continue;
        }
        ++hits[i];
        if (p.svId[i] != static_cast<int>(j)) fail("svId disagrees with members");
      }
    }
    for (int h : hits) {
      if (h != 1) fail(h == 0 ? "point not covered" : "point in two super-voxels");
    }

    // Pool random simplex rows and compare with hand-computed member means.
    const int C = std::uniform_int_distribution<int>(2, 6)(rng);
    Mat probs(cloud.size(), C);
    for (Eigen::Index k = 0; k < probs.size(); ++k) probs.data()[k] = -std::log(u(rng) + 1e-300);
    for (Eigen::Index i = 0; i < probs.rows(); ++i) probs.row(i) /= probs.row(i).sum();
    const Mat pooled = pool_probs(probs, p);
    for (size_t j = 0; j < p.size(); ++j) {
      if (pooled.row(j).minCoeff() < 0.0) fail("negative pooled probability");
      worstSimplex = std::max(worstSimplex, std::abs(pooled.row(j).sum() - 1.0));
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(C);
      for (int i : p.members[j]) mean += probs.row(i);
      mean /= static_cast<double>(p.members[j].size());
      worstMean = std::max(worstMean, (mean - pooled.row(j)).cwiseAbs().maxCoeff());
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = violations == 0 && worstSimplex <= 1e-6 && worstMean <= 1e-12;
  return {ok, fmt("1000 clouds, %ld points, %ld super-voxels; %d cover/disjointness violations%s%s; "
                  "max |row sum - 1| %.1e; max pooled-mean error %.1e; %.1fs",
                  points, svs, violations, violations ? ", first: " : "", first.c_str(), worstSimplex, worstMean,
                  secs)};
}

// ---------------------------------------------------------------------------
// Suite runs (shared by the trend, coverage and instance criteria)

struct Suite {
  RunConfig config;
  std::vector<SceneData> train, heldout;
  size_t points = 0, clicks = 0;
};

Suite& suite() {
  static std::optional<Suite> s;
  if (!s) {
    s.emplace();
    s->config = suite_config();
    const auto scenes = gen_suite(s->config.suite);
    std::vector<SceneData> prepared(scenes.size());
    parallel_for(scenes.size(), [&](size_t i) {
      prepared[i] = prepare_scene(scenes[i].cloud, scenes[i].clicks, s->config.partition, s->config.features);
    });
    for (size_t i = 0; i < scenes.size(); ++i) {
      s->points += scenes[i].cloud.size();
      s->clicks += scenes[i].clicks.clicks.size();
      (scenes[i].heldout ? s->heldout : s->train).push_back(std::move(prepared[i]));
    }
  }
  return *s;
}

struct TimedRun {
  SelfTrainResult result;
  double seconds = 0.0;
};

const TimedRun& selftrain_run(const std::string& ablation) {
  static std::map<std::string, TimedRun> cache;
  auto it = cache.find(ablation);
  if (it == cache.end()) {
    Suite& s = suite();
    const auto t0 = std::chrono::steady_clock::now();
    TimedRun run;
    run.result = run_selftrain(s.train, s.heldout, ablation_config(ablation, s.config.selftrain));
    run.seconds = seconds_since(t0);
    it = cache.emplace(ablation, std::move(run)).first;
  }
  return it->second;
}

struct InstanceOutcome {
  double ap25 = 0.0, baselineAp25 = 0.0;
  double trainAp25 = 0.0, trainBaselineAp25 = 0.0;
  double seconds = 0.0;
};

const InstanceOutcome& instance_run() {
  static std::optional<InstanceOutcome> out;
  if (!out) {
    Suite& s = suite();
    const TimedRun& st = selftrain_run("unet+rel+gp");
    const auto t0 = std::chrono::steady_clock::now();
    const InstanceRun run = run_instance(st.result.state.model, s.train, st.result.history.back(), s.config.instance);
    auto score = [&](const std::vector<SceneData>& scenes, bool offsets) {
      std::vector<InstanceScene> eval(scenes.size());
      parallel_for(scenes.size(), [&](size_t i) {
        eval[i] = {predict_instances(run.model, scenes[i], s.config.instance, offsets).instances,
                   gt_instances(scenes[i].cloud)};
      });
      return instance_ap(eval, 0.25);
    };
    out.emplace();
    out->ap25 = score(s.heldout, true);
    out->baselineAp25 = score(s.heldout, false);
    out->trainAp25 = score(s.train, true);
    out->trainBaselineAp25 = score(s.train, false);
    out->seconds = seconds_since(t0);
  }
  return *out;
}

std::vector<double> series(const SelfTrainResult& r, double IterationReport::*field) {
  std::vector<double> v;
  for (const auto& rep : r.reports) v.push_back(rep.*field);
  return v;
}

std::string join(const std::vector<double>& v, const char* f = "%.3f") {
  std::string s;
  for (size_t k = 0; k < v.size(); ++k) s += (k ? " " : "") + fmt(f, v[k]);
  return s;
}

// Golden calibration: values of the committed reference run. Comparisons use
// an absolute tolerance that absorbs floating-point differences between
// compilers and libm versions.
constexpr double kGoldenTol = 0.01;

json golden() {
  if (gOpts.golden.empty() || !fs::exists(gOpts.golden)) return json();
  return read_json_file(gOpts.golden);
}

bool matches_golden(const json& g, const char* key, const std::vector<double>& v, std::string& note) {
  if (g.is_null() || !g.contains(key)) {
    note += fmt("; no golden '%s'", key);
    return false;
  }
  const auto ref = g.at(key).get<std::vector<double>>();
  if (ref.size() != v.size()) {
    note += fmt("; golden '%s' length differs", key);
    return false;
  }
  for (size_t k = 0; k < v.size(); ++k) {
    if (!(std::abs(ref[k] - v[k]) <= kGoldenTol)) {
      note += fmt("; '%s'[%zu] = %.4f vs golden %.4f", key, k, v[k], ref[k]);
      return false;
    }
  }
  return true;
}

Outcome trend_suite() {
  Suite& s = suite();
  const TimedRun& full = selftrain_run("unet+rel+gp");
  const TimedRun& unet = selftrain_run("unet");
  const auto fullMiou = series(full.result, &IterationReport::valMiou);
  const auto unetMiou = series(unet.result, &IterationReport::valMiou);
  const double clickFraction = static_cast<double>(s.clicks) / static_cast<double>(s.points);
  const bool fiveIters = fullMiou.size() == 5 && unetMiou.size() == 5;
  const double gain = fiveIters ? fullMiou[4] - fullMiou[0] : NAN;
  const double gap = fiveIters ? fullMiou[4] - unetMiou[4] : NAN;
  const double secs = full.seconds + unet.seconds;
  std::string note;
  const json g = golden();
  const bool gold = matches_golden(g, "relgpValMiou", fullMiou, note) & matches_golden(g, "unetValMiou", unetMiou, note);
  const bool ok = fiveIters && clickFraction < 0.001 && gain >= 0.05 && gap >= 0.02 && gold && secs < 900.0;
  return {ok, fmt("held-out mIoU unet+rel+gp [%s], unet [%s]; iter5-iter1 %+.1f pts, rel+gp-unet %+.1f pts; "
                  "%zu train + %zu held-out scenes, clicks %.4f%% of points; %.0fs%s",
                  join(fullMiou).c_str(), join(unetMiou).c_str(), 100 * gain, 100 * gap, s.train.size(),
                  s.heldout.size(), 100 * clickFraction, secs, note.c_str())};
}

Outcome coverage_suite() {
  const TimedRun& full = selftrain_run("unet+rel+gp");
  const auto cov = series(full.result, &IterationReport::coverage);
  bool monotone = cov.size() == 5;
  for (size_t k = 1; k < cov.size(); ++k) monotone = monotone && cov[k] >= cov[k - 1];
  std::string note;
  const bool gold = matches_golden(golden(), "relgpCoverage", cov, note);
  const bool ok = monotone && !cov.empty() && cov.back() >= 0.8 && gold;
  return {ok, fmt("coverage per iteration [%s]; non-decreasing %s; final %.1f%%%s", join(cov).c_str(),
                  monotone ? "yes" : "no", cov.empty() ? 0.0 : 100 * cov.back(), note.c_str())};
}

// Touching chairs: clicks at the floor center and at each seat center.
struct ChairsOutcome {
  bool purePartition = false;
  double kmeansIou = 0.0;
  int chairs = 0;
  int matched = 0;
};

ChairsOutcome touching_chairs() {
  ChairsOutcome out;
  const PointCloud cloud = gen_touching_chairs(1);
  ClickAnnotation ann{cloud.sceneId, {}};
  const Vec3 targets[3] = {{0.5, 0.25, 0.0}, {0.24, 0.24, 0.45}, {0.72, 0.24, 0.45}};
  for (const Vec3& t : targets) {
    size_t best = 0;
    double bd = INFINITY;
    for (size_t i = 0; i < cloud.size(); ++i) {
      const double d = (cloud.positions[i].cast<double>() - t).squaredNorm();
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    ann.clicks.push_back({static_cast<int64_t>(best), (*cloud.semanticGt)[best], (*cloud.instanceGt)[best]});
  }
  PartitionParams pp;
  pp.voxelSeedSpacing = 0.15;
  const SceneData scene = prepare_scene(cloud, ann, pp);
  const auto& part = scene.part();

  // Preconditions of the construction: no super-voxel mixes the two chairs,
  // and raw-coordinate K-Means from the seat clicks recovers each chair
  // (point IoU >= 0.9 with its ground truth).
  out.purePartition = true;
  for (size_t j = 0; j < part.size(); ++j) {
    const int g = (*cloud.instanceGt)[part.members[j][0]];
    for (int i : part.members[j]) out.purePartition = out.purePartition && (*cloud.instanceGt)[i] == g;
  }
  std::vector<int> sem(part.size());
  for (size_t j = 0; j < part.size(); ++j) sem[j] = (*cloud.semanticGt)[part.members[j][0]];
  const InstancePseudoLabels km = seeded_kmeans(click_seeds(ann, part), raw_coords(part), sem);
  const auto gt = gt_instances(cloud);
  out.kmeansIou = 1.0;
  for (size_t k = 1; k < ann.clicks.size(); ++k) {
    std::vector<int> pts;
    for (size_t j = 0; j < part.size(); ++j) {
      if (km.instance[j] == static_cast<int>(k)) pts.insert(pts.end(), part.members[j].begin(), part.members[j].end());
    }
    std::sort(pts.begin(), pts.end());
    double iou = 0.0;
    for (const auto& g : gt) {
      if (g.category == kChair) iou = std::max(iou, point_set_iou(pts, g.points));
    }
    out.kmeansIou = std::min(out.kmeansIou, iou);
  }

  std::vector<SceneData> scenes{scene};
  SelfTrainConfig st = suite_config().selftrain;
  st.iterations = 3;
  const SelfTrainResult semantic = run_selftrain(scenes, {}, st);
  InstanceConfig ic;
  ic.iterations = 2;
  ic.schedule.epochsFirst = 400;
  ic.schedule.epochsLater = 400;
  const InstanceRun run = run_instance(semantic.state.model, scenes, semantic.history.back(), ic);
  for (const auto& inst : run.predictions[0].instances) {
    if (inst.category != kChair) continue;
    ++out.chairs;
    for (const auto& g : gt) {
      if (g.category == kChair && point_set_iou(inst.points, g.points) >= 0.5) {
        ++out.matched;
        break;
      }
    }
  }
  return out;
}

// K-Means rounds on random seeded instances: inertia must never increase.
std::pair<double, int> kmeans_fuzz() {
  std::mt19937_64 rng(4242);
  double worstRise = -INFINITY;
  int rounds = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const int M = std::uniform_int_distribution<int>(3, 80)(rng);
    const int C = std::uniform_int_distribution<int>(1, 3)(rng);
    std::vector<Vec3> coords(M);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& c : coords) c = Vec3(g(rng), g(rng), g(rng));
    std::vector<int> sem(M);
    for (auto& c : sem) c = std::uniform_int_distribution<int>(-1, C - 1)(rng);
    std::vector<InstanceSeed> seeds;
    const int K = std::uniform_int_distribution<int>(1, std::min(M, 6))(rng);
    std::vector<int> order(M);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int k = 0; k < K; ++k) {
      if (sem[order[k]] < 0) sem[order[k]] = 0;
      seeds.push_back({order[k], sem[order[k]]});
    }
    InstancePseudoLabels labels = seeded_assign(seeds, coords, sem);
    double prev = kmeans_inertia(labels, coords);
    for (int r = 0; r < 30; ++r) {
      const InstancePseudoLabels next = seeded_assign(seeds, coords, sem, &labels.centroid);
      const double cur = kmeans_inertia(next, coords);
      worstRise = std::max(worstRise, cur - prev);
      ++rounds;
      const bool same = next.instance == labels.instance;
      labels = next;
      prev = cur;
      if (same) break;
    }
  }
  return {worstRise, rounds};
}

Outcome instance_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const ChairsOutcome chairs = touching_chairs();
  const auto [rise, rounds] = kmeans_fuzz();
  const InstanceOutcome& ap = instance_run();
  std::string note;
  const bool gold = matches_golden(golden(), "instanceAp25", {ap.ap25, ap.baselineAp25}, note);
  const bool ok = chairs.purePartition && chairs.kmeansIou >= 0.9 && chairs.chairs == 2 && chairs.matched == 2 &&
                  ap.ap25 >= ap.baselineAp25 && rise <= 1e-9 && gold;
  return {ok, fmt("touching chairs: %d chair instances, %d matched at IoU>=0.5 (pure partition %s, raw K-Means "
                  "chair IoU %.3f); held-out AP@0.25 %.3f vs raw-coordinate baseline %.3f (train scenes %.3f vs %.3f); "
                  "K-Means max inertia rise %.1e over %d rounds; %.0fs%s",
                  chairs.chairs, chairs.matched, chairs.purePartition ? "yes" : "no",
                  chairs.kmeansIou, ap.ap25, ap.baselineAp25, ap.trainAp25, ap.trainBaselineAp25,
                  rise, rounds, seconds_since(t0), note.c_str())};
}

// ---------------------------------------------------------------------------
// Formats

int run_cli(const std::vector<std::string>& args) {
  std::string cmd = "\"" + gOpts.cli.string() + "\" -q";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

Outcome format_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  otoc::testing::TempDir dir("acceptance_format");
  std::vector<std::string> problems;

  // Scenes: save, load, save again.
  int scenesChecked = 0;
  {
    std::mt19937_64 rng(5);
    std::vector<PointCloud> clouds;
    SceneSpec spec;
    spec.density = 100.0;
    for (uint64_t seed = 1; seed <= 3; ++seed) {
      spec.seed = seed;
      clouds.push_back(gen_scene(spec));
    }
    for (int k = 0; k < 20; ++k) clouds.push_back(otoc::testing::random_cloud(1 + rng() % 500, rng(), 10.0));
    clouds.push_back(gen_touching_chairs(3));
    for (size_t k = 0; k < clouds.size(); ++k) {
      const fs::path a = dir / fmt("s%zu.otoc", k), b = dir / fmt("s%zu_again.otoc", k);
      save_scene(clouds[k], a);
      const PointCloud back = load_scene(a);
      save_scene(back, b);
      PointCloud renamed = clouds[k];
      renamed.sceneId = back.sceneId;
      if (!(back == renamed) || read_file_bytes(a) != read_file_bytes(b)) problems.push_back(fmt("scene %zu", k));
      ++scenesChecked;
    }
  }

  // Config: defaults, the suite preset and a sparse override all round-trip.
  {
    const json sparse = {{"selftrain", {{"mode", "transformer"}, {"kernel", {{"lambdaRel", 0.5}}}}},
                         {"instance", {{"radius", 0.25}}}};
    for (const RunConfig& c : {RunConfig{}, suite_config(), config_from_json(sparse)}) {
      const json j = config_to_json(c);
      if (config_to_json(config_from_json(j)) != j) problems.push_back("config round trip");
      if (config_to_json(config_from_json(json::parse(j.dump()))) != j) problems.push_back("config text round trip");
    }
    const RunConfig s = config_from_json(sparse);
    if (s.selftrain.mode != PropagationMode::Transformer || s.selftrain.kernel.lambdaRel != 0.5 ||
        s.instance.radius != 0.25 || s.selftrain.kernel.lambdaColor != 1.0) {
      problems.push_back("config overrides");
    }
  }

  // End-to-end: two seeded selftrain runs through the CLI.
  bool identical = false;
  if (gOpts.cli.empty() || !fs::exists(gOpts.cli)) {
    problems.push_back("CLI binary not found");
  } else {
    RunConfig small = suite_config();
    small.suite.scenes = 4;
    small.suite.heldout = 1;
    small.suite.scene.density = 150.0;
    small.selftrain.iterations = 2;
    write_json_file(dir / "small.json", config_to_json(small));
    const fs::path data = dir / "suite";
    int rc = run_cli({"gen-suite", "--out", data.string(), "--config", (dir / "small.json").string(), "--seed", "7"});
    for (const char* out : {"run_a", "run_b"}) {
      if (rc == 0) {
        rc = run_cli({"selftrain", "--config", (data / "manifest.json").string(), "--out", (dir / out).string(),
                      "--seed", "7"});
      }
    }
    if (rc != 0) {
      problems.push_back(fmt("CLI exit status %d", rc));
    } else {
      identical = true;
      for (const char* f : {"reports.json", "final.ckpt", "pseudo_labels.json", "iter_1.ckpt", "iter_2.ckpt"}) {
        const auto a = read_file_bytes(dir / "run_a" / f), b = read_file_bytes(dir / "run_b" / f);
        if (a.empty() || a != b) {
          identical = false;
          problems.push_back(std::string("selftrain output differs: ") + f);
        }
      }
    }
  }

  std::string detail = fmt("%d scenes byte-stable; config round trip; seeded CLI selftrain reproducible %s; %.0fs",
                           scenesChecked, identical ? "bit for bit" : "NO", seconds_since(t0));
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

struct Criterion {
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {"gradients", gradient_suite},     {"mean-field", mean_field_suite},   {"ema-bank", ema_bank_suite},
    {"partition-pooling", partition_suite}, {"selftrain-trend", trend_suite}, {"coverage-trend", coverage_suite},
    {"instance", instance_suite},      {"format", format_suite},
};

void write_golden() {
  const TimedRun& full = selftrain_run("unet+rel+gp");
  const TimedRun& unet = selftrain_run("unet");
  const InstanceOutcome& ap = instance_run();
  const json g = {{"relgpValMiou", series(full.result, &IterationReport::valMiou)},
                  {"relgpCoverage", series(full.result, &IterationReport::coverage)},
                  {"unetValMiou", series(unet.result, &IterationReport::valMiou)},
                  {"instanceAp25", {ap.ap25, ap.baselineAp25}},
                  {"config", config_to_json(suite().config)}};
  write_json_file(gOpts.golden, g);
  std::printf("wrote %s\n", gOpts.golden.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  set_verbose(false);
  std::vector<std::string> selected;
  for (int k = 1; k < argc; ++k) {
    const std::string a = argv[k];
    if (a == "--cli" && k + 1 < argc) {
      gOpts.cli = argv[++k];
    } else if (a == "--golden" && k + 1 < argc) {
      gOpts.golden = argv[++k];
    } else if (a == "--write-golden") {
      gOpts.writeGolden = true;
    } else {
      selected.push_back(a);
    }
  }
  if (gOpts.writeGolden) {
    if (gOpts.golden.empty()) {
      std::fprintf(stderr, "--write-golden needs --golden PATH\n");
      return 1;
    }
    write_golden();
    return 0;
  }

  const auto t0 = std::chrono::steady_clock::now();
  int failures = 0, ran = 0;
  for (const auto& c : kCriteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.name) == selected.end()) continue;
    ++ran;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  if (ran == 0) {
    std::fprintf(stderr, "no such criterion\n");
    return 1;
  }
  if (ran > 1) std::printf("%d/%d criteria passed in %.0fs\n", ran - failures, ran, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
