#include "otoc/selftrain.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <random>
#include <thread>

#include "otoc/eval.hpp"

namespace otoc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void validate_config(const SelfTrainConfig& c) {
  if (!(c.confidenceThreshold > 0.0 && c.confidenceThreshold <= 1.0)) {
    throw Error("confidence threshold must be in (0, 1]");
  }
  if (c.iterations < 1) throw Error("iterations must be >= 1");
  if (c.kernelPositionScale <= 0.0 || c.kernelColorScale <= 0.0) throw Error("kernel scales must be positive");
}

struct SvRef {
  size_t scene;
  int sv;
  int label;
};

// Minibatch SGD of the relation backbone on the contrastive loss; the bank
// receives a momentum update for every labeled super-voxel of each batch.
double train_relation(RelationParams& rel, PrototypeBank& bank, std::span<const SceneData> scenes,
                      const std::vector<PseudoLabelSet>& labels, int epochs, const RelationSchedule& sch,
                      uint64_t seed) {
  std::vector<SvRef> refs;
  for (size_t s = 0; s < scenes.size(); ++s) {
    for (size_t j = 0; j < labels[s].size(); ++j) {
      if (labels[s].category[j]) refs.push_back({s, static_cast<int>(j), *labels[s].category[j]});
    }
  }
  if (refs.empty()) return kNaN;
  std::vector<int> pool(refs.size());
  for (size_t k = 0; k < refs.size(); ++k) pool[k] = static_cast<int>(k);

  Vec w = flatten(rel.backbone);
  Vec velocity = Vec::Zero(w.size());
  std::mt19937_64 rng(seed);
  double lastEpoch = kNaN;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = cosine_lr(sch.learningRate, epoch, epochs, true);
    double sum = 0.0;
    size_t steps = 0;
    for (const auto& batch : epoch_batches(pool, sch.sampleCap, sch.batchSize, rng)) {
      // Group the batch by scene; each group's mean loss is weighted by its share.
      std::vector<size_t> order(batch.begin(), batch.end());
      std::stable_sort(order.begin(), order.end(),
                       [&](size_t a, size_t b) { return refs[a].scene < refs[b].scene; });
      Vec grad = Vec::Zero(w.size());
      double loss = 0.0;
      for (size_t start = 0; start < order.size();) {
        const size_t scene = refs[order[start]].scene;
        size_t end = start;
        std::vector<int> svs, lab;
        while (end < order.size() && refs[order[end]].scene == scene) {
          svs.push_back(refs[order[end]].sv);
          lab.push_back(refs[order[end]].label);
          ++end;
        }
        const double share = static_cast<double>(svs.size()) / static_cast<double>(order.size());
        RelationLoss rl =
            relation_loss_and_grad(rel, scenes[scene].feats, scenes[scene].part(), svs, lab, bank);
        loss += share * rl.loss;
        grad += share * flatten(rl.grad);
        for (size_t k = 0; k < svs.size(); ++k) bank_update(bank, rl.f.row(static_cast<Eigen::Index>(k)).transpose(), lab[k]);
        start = end;
      }
      if (!std::isfinite(loss)) throw Error("relation training diverged at epoch " + std::to_string(epoch));
      velocity = sch.momentum * velocity + grad;
      w -= lr * velocity;
      unflatten(w, rel.backbone);
      sum += loss;
      ++steps;
    }
    lastEpoch = steps ? sum / static_cast<double>(steps) : kNaN;
  }
  return lastEpoch;
}

// Full-batch SGD of the attention layers on labeled super-voxels.
double train_attention(AttentionParams& att, const PrototypeBank& bank, const Mat& F, std::span<const int> labels,
                       int epochs, const RelationSchedule& sch) {
  Vec w = flatten(att);
  Vec velocity = Vec::Zero(w.size());
  double loss = kNaN;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    AttentionLoss al = attention_loss_and_grad(att, F, bank, labels);
    if (!std::isfinite(al.loss)) throw Error("attention training diverged at epoch " + std::to_string(epoch));
    velocity = sch.momentum * velocity + flatten(al.grad);
    w -= cosine_lr(sch.learningRate, epoch, epochs, true) * velocity;
    unflatten(w, att);
    loss = al.loss;
  }
  return loss;
}

double label_precision(const PseudoLabelSet& labels, const SceneData& scene) {
  if (!scene.cloud.semanticGt) return kNaN;
  const auto& gt = *scene.cloud.semanticGt;
  double hit = 0.0, total = 0.0;
  for (size_t j = 0; j < labels.size(); ++j) {
    if (!labels.category[j]) continue;
    for (int i : scene.part().members[j]) {
      if (gt[i] < 0) continue;
      total += 1.0;
      if (gt[i] == *labels.category[j]) hit += 1.0;
    }
  }
  return total > 0.0 ? hit / total : kNaN;
}

}  // namespace

PropagationMode parse_mode(const std::string& s) {
  if (s == "unary-only" || s == "unary") return PropagationMode::UnaryOnly;
  if (s == "graph") return PropagationMode::Graph;
  if (s == "transformer") return PropagationMode::Transformer;
  throw Error("unknown propagation mode '" + s + "' (expected unary-only, graph or transformer)");
}

std::string to_string(PropagationMode mode) {
  switch (mode) {
    case PropagationMode::UnaryOnly: return "unary-only";
    case PropagationMode::Graph: return "graph";
    case PropagationMode::Transformer: return "transformer";
  }
  return "graph";
}

SelfTrainConfig ablation_config(const std::string& name, SelfTrainConfig base) {
  if (name == "unet" || name == "3D U-Net") {
    base.mode = PropagationMode::UnaryOnly;
    base.relationFeatures = false;
    base.networkFeatures = false;
  } else if (name == "unet+gp" || name == "3D U-Net+GP") {
    base.mode = PropagationMode::Graph;
    base.relationFeatures = false;
    base.networkFeatures = false;
  } else if (name == "unet+rel+gp" || name == "3D U-Net+Rel+GP") {
    base.mode = PropagationMode::Graph;
    base.relationFeatures = true;
    base.networkFeatures = true;
  } else {
    throw Error("unknown ablation '" + name + "'");
  }
  return base;
}

SceneData prepare_scene(PointCloud cloud, ClickAnnotation annotation, const PartitionParams& partParams,
                        const FeatureParams& featParams) {
  validate_cloud(cloud);
  for (const auto& w : validate_annotation(cloud, annotation)) log_warning(cloud.sceneId + ": " + w);
  SceneData d;
  d.feats = featurize(cloud, featParams);
  d.graph = build_graph(cloud, partition(cloud, partParams), partParams.rAdj);
  d.clicks = expand_clicks(annotation, d.graph.partition);
  d.cloud = std::move(cloud);
  d.annotation = std::move(annotation);
  return d;
}

int argmax_row(const Mat& probs, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index c = 1; c < probs.cols(); ++c) {
    if (probs(row, c) > probs(row, best)) best = static_cast<int>(c);
  }
  return best;
}

std::vector<double> confidence(const Mat& pointProbs, const Mat& svProbs, const SuperVoxelPartition& part) {
  if (static_cast<size_t>(svProbs.rows()) != part.size() ||
      static_cast<size_t>(pointProbs.rows()) != part.point_count()) {
    throw Error("confidence: shape mismatch");
  }
  std::vector<double> conf(part.size(), 0.0);
  for (size_t j = 0; j < part.size(); ++j) {
    const int c = argmax_row(svProbs, static_cast<Eigen::Index>(j));
    double s = 0.0;
    for (int i : part.members[j]) s += std::log(std::max(pointProbs(i, c), kUnaryFloor));
    conf[j] = part.members[j].empty() ? 0.0 : std::exp(s / static_cast<double>(part.members[j].size()));
  }
  return conf;
}

std::vector<double> confidence(const Mat& svProbs, const SuperVoxelPartition& part) {
  if (static_cast<size_t>(svProbs.rows()) != part.size()) throw Error("confidence: shape mismatch");
  std::vector<double> conf(part.size(), 0.0);
  for (size_t j = 0; j < part.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    conf[j] = part.members[j].empty() ? 0.0 : svProbs(r, argmax_row(svProbs, r));
  }
  return conf;
}

PseudoLabelSet select_pseudo_labels(const Mat& svProbs, std::span<const double> conf, double threshold,
                                    const PseudoLabelSet& clicks) {
  const size_t m = clicks.size();
  if (static_cast<size_t>(svProbs.rows()) != m || conf.size() != m) throw Error("select_pseudo_labels: shape mismatch");
  PseudoLabelSet out(m);
  for (size_t j = 0; j < m; ++j) {
    if (clicks.provenance[j] == Provenance::Click) {
      out.category[j] = clicks.category[j];
      out.confidence[j] = 1.0;
      out.provenance[j] = Provenance::Click;
    } else if (conf[j] >= threshold) {
      out.category[j] = argmax_row(svProbs, static_cast<Eigen::Index>(j));
      out.confidence[j] = conf[j];
      out.provenance[j] = Provenance::Propagated;
    }
  }
  return out;
}

Propagation propagate_scene(const SceneData& scene, const SelfTrainState& state, const SelfTrainConfig& config) {
  const auto& part = scene.part();
  Propagation out;
  out.prediction = forward(state.model, scene.feats, part);
  const Prediction& pred = out.prediction;
  switch (config.mode) {
    case PropagationMode::UnaryOnly:
      out.svProbs = pred.pooledProbs;
      out.confidence = confidence(pred.pointProbs, pred.pooledProbs, part);
      return out;
    case PropagationMode::Transformer: {
      out.svProbs = transformer_propagate(state.attention, pred.pooledEmbed, state.bank).fused;
      out.confidence = confidence(out.svProbs, part);
      return out;
    }
    case PropagationMode::Graph:
      break;
  }
  const auto m = static_cast<Eigen::Index>(part.size());
  KernelFeatures kf;
  kf.position.resize(m, 3);
  kf.color.resize(m, 3);
  for (Eigen::Index j = 0; j < m; ++j) {
    kf.position.row(j) = part.meanPos[j].transpose() / config.kernelPositionScale;
    kf.color.row(j) = part.meanColor[j].transpose() / config.kernelColorScale;
  }
  Mat unary = pred.pooledProbs;
  if (config.networkFeatures) kf.unary = normalize_rows(pred.pooledEmbed);
  if (config.relationFeatures) {
    const Embedding emb = embed(state.relation, scene.feats, part);
    unary = combine_probs(unary, relation_probs(emb.f, state.bank));
    kf.relation = emb.f;
  }
  const PairwiseKernel kernel = pairwise_kernel(scene.graph, kf, config.kernel);
  out.svProbs = mean_field(unary, kernel, config.meanField).Q;
  out.confidence = confidence(out.svProbs, part);
  return out;
}

std::vector<int> predict_points(const ModelParams& model, const PointFeatures& feats) {
  const Prediction p = forward_points(model, feats);
  std::vector<int> out(feats.size());
  for (Eigen::Index i = 0; i < p.pointProbs.rows(); ++i) out[i] = argmax_row(p.pointProbs, i);
  return out;
}

double evaluate_miou(const ModelParams& model, std::span<const SceneData> scenes, int categories) {
  std::vector<std::vector<int>> preds(scenes.size());
  parallel_for(scenes.size(), [&](size_t s) { preds[s] = predict_points(model, scenes[s].feats); });
  std::vector<int> pred, gt;
  for (size_t s = 0; s < scenes.size(); ++s) {
    if (!scenes[s].cloud.semanticGt) continue;
    pred.insert(pred.end(), preds[s].begin(), preds[s].end());
    gt.insert(gt.end(), scenes[s].cloud.semanticGt->begin(), scenes[s].cloud.semanticGt->end());
  }
  if (gt.empty()) return kNaN;
  return miou(pred, gt, categories).miou;
}

SelfTrainResult run_selftrain(std::span<const SceneData> scenes, std::span<const SceneData> heldout,
                              const SelfTrainConfig& config, const IterationCallback& onIteration) {
  validate_config(config);
  if (scenes.empty()) throw Error("no training scenes");
  const NetworkDims& dims = config.dims;
  const bool graphRelation = config.mode == PropagationMode::Graph && config.relationFeatures;
  const bool transformer = config.mode == PropagationMode::Transformer;

  SelfTrainResult result;
  SelfTrainState& st = result.state;
  st.model = init_model(dims, mix_seed(config.seed, 1));
  st.model.schedule = config.schedule;
  st.relation = transformer ? relation_from_model(st.model) : init_relation(dims, mix_seed(config.seed, 2));
  st.bank = init_bank(dims.categories, dims.embed, mix_seed(config.seed, 3), config.bankMomentum, config.temperature);
  st.attention = init_attention(dims.embed, dims.embed, dims.categories, mix_seed(config.seed, 4));

  std::vector<PseudoLabelSet> labels;
  for (const auto& s : scenes) labels.push_back(s.clicks);
  size_t clickedSvs = 0;
  for (const auto& l : labels) clickedSvs += l.labeled_count();
  if (clickedSvs == 0) throw Error("no clicks in the training scenes");

  double prevCoverage = -1.0;
  for (int it = 1; it <= config.iterations; ++it) {
    const uint64_t itSeed = mix_seed(config.seed, 100 + static_cast<uint64_t>(it));
    const int epochs = it == 1 ? config.schedule.epochsFirst : config.schedule.epochsLater;
    const int relEpochs = it == 1 ? config.relationSchedule.epochsFirst : config.relationSchedule.epochsLater;

    // (a) Point network on the current labels broadcast to points.
    std::vector<PointFeatures> parts;
    std::vector<int> pointLabels;
    for (size_t s = 0; s < scenes.size(); ++s) {
      const std::vector<int> lab = broadcast_labels(labels[s], scenes[s].part());
      std::vector<int> rows;
      for (size_t i = 0; i < lab.size(); ++i) {
        if (lab[i] >= 0) {
          rows.push_back(static_cast<int>(i));
          pointLabels.push_back(lab[i]);
        }
      }
      parts.push_back(gather_rows(scenes[s].feats, rows));
    }
    std::vector<const PointFeatures*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    const PointFeatures trainFeats = concat_rows(ptrs);
    parts.clear();

    TrainOptions opts;
    if (config.classWeights) opts.classWeights = inverse_frequency_weights(pointLabels, dims.categories);
    if (transformer) {
      opts.afterStep = [&](const ModelParams& p) { st.relation = weight_ema(st.relation, p, config.emaMomentum); };
    }
    TrainResult tr = train(std::move(st.model), trainFeats, pointLabels, epochs, itSeed, opts);
    st.model = std::move(tr.params);

    IterationReport report;
    report.iteration = it;
    report.trainLoss = tr.lossCurve.empty() ? kNaN : tr.lossCurve.back();
    report.relationLoss = kNaN;

    // (a, b) Relation network and bank.
    if (graphRelation) {
      report.relationLoss = train_relation(st.relation, st.bank, scenes, labels, relEpochs, config.relationSchedule,
                                           mix_seed(itSeed, 7));
    } else if (transformer) {
      Mat F(0, dims.embed);
      std::vector<int> svLabels;
      for (size_t s = 0; s < scenes.size(); ++s) {
        const Embedding emb = embed(st.relation, scenes[s].feats, scenes[s].part());
        const Prediction pred = forward(st.model, scenes[s].feats, scenes[s].part());
        for (size_t j = 0; j < labels[s].size(); ++j) {
          if (!labels[s].category[j]) continue;
          const auto r = static_cast<Eigen::Index>(j);
          bank_update(st.bank, emb.f.row(r).transpose(), *labels[s].category[j]);
          F.conservativeResize(F.rows() + 1, Eigen::NoChange);
          F.row(F.rows() - 1) = pred.pooledEmbed.row(r);
          svLabels.push_back(*labels[s].category[j]);
        }
      }
      report.relationLoss = train_attention(st.attention, st.bank, F, svLabels, relEpochs, config.relationSchedule);
    }

    // (c, d) Propagate and threshold, scene by scene.
    std::vector<PseudoLabelSet> next(scenes.size());
    parallel_for(scenes.size(), [&](size_t s) {
      const Propagation prop = propagate_scene(scenes[s], st, config);
      next[s] = select_pseudo_labels(prop.svProbs, prop.confidence, config.confidenceThreshold, scenes[s].clicks);
    });
    labels = std::move(next);

    size_t labeled = 0, total = 0;
    double hit = 0.0, weight = 0.0;
    for (size_t s = 0; s < scenes.size(); ++s) {
      labeled += labels[s].labeled_count();
      total += labels[s].size();
      const double p = label_precision(labels[s], scenes[s]);
      if (!std::isnan(p)) {
        // Point-weighted precision across scenes.
        double n = 0.0;
        for (size_t j = 0; j < labels[s].size(); ++j) {
          if (labels[s].category[j]) n += static_cast<double>(scenes[s].part().members[j].size());
        }
        hit += p * n;
        weight += n;
      }
    }
    report.labeled = labeled;
    report.clicked = clickedSvs;
    report.coverage = total ? static_cast<double>(labeled) / static_cast<double>(total) : 0.0;
    report.precision = weight > 0.0 ? hit / weight : kNaN;
    report.valMiou = heldout.empty() ? kNaN : evaluate_miou(st.model, heldout, dims.categories);
    log_info("iteration " + std::to_string(it) + ": coverage " + std::to_string(report.coverage) + ", precision " +
             std::to_string(report.precision) + ", loss " + std::to_string(report.trainLoss) + ", val mIoU " +
             std::to_string(report.valMiou));

    result.history.push_back(labels);
    result.reports.push_back(report);
    if (onIteration) onIteration(report, st);

    if (it == 1 && config.iterations > 1 && labeled <= clickedSvs) {
      throw Error(
          "self-training aborted: no super-voxel reached the confidence threshold after the first iteration "
          "(the network did not converge on the clicks; add clicks or lower the threshold)");
    }
    if (config.earlyStopDelta > 0.0 && prevCoverage >= 0.0 &&
        std::abs(report.coverage - prevCoverage) < config.earlyStopDelta) {
      log_info("coverage change below " + std::to_string(config.earlyStopDelta) + "; stopping");
      break;
    }
    prevCoverage = report.coverage;
  }
  return result;
}

nlohmann::json report_to_json(const IterationReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"iteration", r.iteration},         {"coverage", r.coverage}, {"precision", num(r.precision)},
          {"trainLoss", num(r.trainLoss)},    {"relationLoss", num(r.relationLoss)},
          {"valMiou", num(r.valMiou)},        {"labeled", r.labeled},   {"clicked", r.clicked}};
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  const size_t workers = std::min<size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex failureMutex;
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failureMutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace otoc
