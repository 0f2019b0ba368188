#include "otoc/instance.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>

#include "otoc/spatial.hpp"

namespace otoc {

std::vector<InstanceSeed> click_seeds(const ClickAnnotation& ann, const SuperVoxelPartition& part) {
  std::vector<InstanceSeed> seeds;
  for (const auto& c : ann.clicks) {
    if (c.pointIndex < 0 || static_cast<size_t>(c.pointIndex) >= part.point_count()) {
      throw Error("click point index out of range");
    }
    seeds.push_back({part.svId[static_cast<size_t>(c.pointIndex)], c.categoryId});
  }
  return seeds;
}

InstancePseudoLabels seeded_assign(std::span<const InstanceSeed> seeds, std::span<const Vec3> coords,
                                   std::span<const int> semLabels, const std::vector<Vec3>* centroids) {
  if (seeds.empty()) throw Error("seeded_assign: no seeds");
  if (semLabels.size() != coords.size()) throw Error("seeded_assign: label length mismatch");
  if (centroids && centroids->size() != seeds.size()) throw Error("seeded_assign: centroid count mismatch");
  const size_t m = coords.size();
  InstancePseudoLabels out;
  out.seeds.assign(seeds.begin(), seeds.end());
  out.instance.assign(m, -1);

  std::vector<Vec3> centers;
  if (centroids) {
    centers = *centroids;
  } else {
    for (const auto& s : seeds) centers.push_back(coords[s.sv]);
  }
  for (size_t j = 0; j < m; ++j) {
    if (semLabels[j] < 0) continue;
    double best = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < seeds.size(); ++k) {
      if (seeds[k].category != semLabels[j]) continue;
      const double d = (coords[j] - centers[k]).squaredNorm();
      if (d < best) {
        best = d;
        out.instance[j] = static_cast<int>(k);
      }
    }
  }
  for (size_t k = 0; k < seeds.size(); ++k) out.instance[seeds[k].sv] = static_cast<int>(k);

  out.centroid = centers;
  std::vector<Vec3> sum(seeds.size(), Vec3::Zero());
  std::vector<double> count(seeds.size(), 0.0);
  for (size_t j = 0; j < m; ++j) {
    if (out.instance[j] < 0) continue;
    sum[out.instance[j]] += coords[j];
    count[out.instance[j]] += 1.0;
  }
  for (size_t k = 0; k < seeds.size(); ++k) {
    if (count[k] > 0.0) out.centroid[k] = sum[k] / count[k];
  }
  return out;
}

double kmeans_inertia(const InstancePseudoLabels& labels, std::span<const Vec3> coords) {
  double s = 0.0;
  for (size_t j = 0; j < labels.size(); ++j) {
    if (labels.instance[j] >= 0) s += (coords[j] - labels.centroid[labels.instance[j]]).squaredNorm();
  }
  return s;
}

InstancePseudoLabels seeded_kmeans(std::span<const InstanceSeed> seeds, std::span<const Vec3> coords,
                                   std::span<const int> semLabels, int maxRounds) {
  InstancePseudoLabels cur = seeded_assign(seeds, coords, semLabels);
  for (int round = 1; round < maxRounds; ++round) {
    InstancePseudoLabels next = seeded_assign(seeds, coords, semLabels, &cur.centroid);
    const bool stable = next.instance == cur.instance;
    cur = std::move(next);
    if (stable) break;
  }
  return cur;
}

InstancePseudoLabels filter_components(const InstancePseudoLabels& labels, const SuperVoxelGraph& graph,
                                       int minPoints) {
  const auto& part = graph.partition;
  if (labels.size() != graph.size()) throw Error("filter_components: size mismatch");
  InstancePseudoLabels out = labels;
  std::fill(out.instance.begin(), out.instance.end(), -1);
  for (size_t k = 0; k < labels.seeds.size(); ++k) {
    std::vector<bool> mask(labels.size());
    for (size_t j = 0; j < labels.size(); ++j) mask[j] = labels.instance[j] == static_cast<int>(k);
    const std::vector<int> comp = connected_components(graph.adjacency, &mask);
    const int keep = comp[labels.seeds[k].sv];
    size_t points = 0;
    Vec3 sum = Vec3::Zero();
    std::vector<int> kept;
    for (size_t j = 0; j < labels.size(); ++j) {
      if (keep < 0 || comp[j] != keep) continue;
      kept.push_back(static_cast<int>(j));
      points += part.members[j].size();
      sum += part.meanPos[j] * static_cast<double>(part.members[j].size());
    }
    if (points < static_cast<size_t>(std::max(minPoints, 0)) || points == 0) continue;
    for (int j : kept) out.instance[j] = static_cast<int>(k);
    out.centroid[k] = sum / static_cast<double>(points);
  }
  return out;
}

LossAndGrad offset_loss_and_grad(const ModelParams& params, const PointFeatures& feats,
                                 const SuperVoxelPartition& part, const InstancePseudoLabels& labels,
                                 const std::vector<int>* svs) {
  if (labels.size() != part.size()) throw Error("offset loss: label size mismatch");
  std::vector<int> used;
  if (svs) {
    for (int j : *svs) {
      if (labels.instance[j] >= 0) used.push_back(j);
    }
  } else {
    for (size_t j = 0; j < labels.size(); ++j) {
      if (labels.instance[j] >= 0) used.push_back(static_cast<int>(j));
    }
  }
  if (used.empty()) throw Error("offset loss: no labeled super-voxels");

  std::vector<int> rows;
  std::vector<Eigen::Index> start;
  for (int j : used) {
    start.push_back(static_cast<Eigen::Index>(rows.size()));
    rows.insert(rows.end(), part.members[j].begin(), part.members[j].end());
  }
  start.push_back(static_cast<Eigen::Index>(rows.size()));
  const Mat X = gather_rows(feats, rows).columns();
  const BackboneCache c = backbone_forward(params.backbone, X);
  Mat off = params.Wo * c.U;
  off.colwise() += params.bo;

  LossAndGrad out;
  out.grad = zero_model(params.dims());
  Mat dOff = Mat::Zero(3, off.cols());
  const double L = static_cast<double>(used.size());
  for (size_t k = 0; k < used.size(); ++k) {
    const int j = used[k];
    const Eigen::Index n = start[k + 1] - start[k];
    const Vec3 o = off.middleCols(start[k], n).rowwise().mean();
    const Vec3 target = labels.centroid[labels.instance[j]] - part.meanPos[j];
    const Vec3 r = o - target;
    out.loss += r.cwiseAbs().sum() / L;
    const Vec3 g = r.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); }) /
                   (L * static_cast<double>(n));
    dOff.middleCols(start[k], n).colwise() = g;
  }
  out.grad.Wo.noalias() = dOff * c.U.transpose();
  out.grad.bo = dOff.rowwise().sum();
  const Mat dU = params.Wo.transpose() * dOff;
  backbone_backward(params.backbone, X, c, dU, out.grad.backbone);
  return out;
}

InstancePrediction cluster_inference(std::span<const Vec3> coords, std::span<const int> svCategory,
                                     const SuperVoxelPartition& part, const Mat& pointProbs, double radius,
                                     int minPoints) {
  const size_t m = coords.size();
  if (svCategory.size() != m || part.size() != m) throw Error("cluster_inference: size mismatch");
  InstancePrediction pred;
  pred.pointInstance.assign(part.point_count(), -1);
  const SpatialGrid grid(coords, std::max(radius, 1e-6));
  std::vector<int> cluster(m, -1);
  int next = 0;
  std::deque<int> queue;
  for (size_t s = 0; s < m; ++s) {
    if (cluster[s] >= 0 || svCategory[s] < 0) continue;
    const int cat = svCategory[s];
    std::vector<int> group{static_cast<int>(s)};
    cluster[s] = next;
    queue.assign(1, static_cast<int>(s));
    while (!queue.empty()) {
      const int a = queue.front();
      queue.pop_front();
      grid.for_each_in_radius(coords[a], radius, [&](int b) {
        if (cluster[b] >= 0 || svCategory[b] != cat) return;
        cluster[b] = next;
        group.push_back(b);
        queue.push_back(b);
      });
    }
    ++next;
    InstanceEntry e;
    e.category = cat;
    for (int j : group) e.points.insert(e.points.end(), part.members[j].begin(), part.members[j].end());
    if (e.points.size() < static_cast<size_t>(std::max(minPoints, 1))) continue;
    std::sort(e.points.begin(), e.points.end());
    double score = 0.0;
    for (int i : e.points) score += pointProbs(i, cat);
    e.score = score / static_cast<double>(e.points.size());
    for (int i : e.points) pred.pointInstance[i] = static_cast<int>(pred.instances.size());
    pred.instances.push_back(std::move(e));
  }
  return pred;
}

std::vector<Vec3> shifted_coords(const Prediction& pred, const SuperVoxelPartition& part) {
  std::vector<Vec3> out(part.size());
  for (size_t j = 0; j < part.size(); ++j) {
    out[j] = part.meanPos[j] + pred.pooledOffset.row(static_cast<Eigen::Index>(j)).transpose();
  }
  return out;
}

std::vector<Vec3> raw_coords(const SuperVoxelPartition& part) { return part.meanPos; }

InstancePrediction predict_instances(const ModelParams& model, const SceneData& scene, const InstanceConfig& config,
                                     bool useOffsets) {
  const Prediction pred = forward(model, scene.feats, scene.part());
  std::vector<int> cats(scene.part().size());
  for (size_t j = 0; j < cats.size(); ++j) cats[j] = argmax_row(pred.pooledProbs, static_cast<Eigen::Index>(j));
  const std::vector<Vec3> coords = useOffsets ? shifted_coords(pred, scene.part()) : raw_coords(scene.part());
  return cluster_inference(coords, cats, scene.part(), pred.pointProbs, config.radius, config.minPoints);
}

namespace {

struct SvRef {
  size_t scene;
  int sv;
};

void add_into(const ModelGrad& src, ModelGrad& dst, double scale) {
  for_each_block(src, dst, [&](ParamGroup, std::span<const double> s, std::span<double> d) {
    for (size_t k = 0; k < d.size(); ++k) d[k] += scale * s[k];
  });
}

}  // namespace

InstanceRun run_instance(ModelParams model, std::span<const SceneData> scenes,
                         std::span<const PseudoLabelSet> semantic, const InstanceConfig& config) {
  if (scenes.size() != semantic.size()) throw Error("run_instance: one pseudo-label set per scene required");
  if (config.iterations < 1) throw Error("run_instance: iterations must be >= 1");
  check_model(model);
  InstanceRun run;
  const TrainSchedule& sch = config.schedule;

  std::vector<std::vector<int>> semLabels(scenes.size());
  std::vector<std::vector<int>> pointLabels(scenes.size());
  for (size_t s = 0; s < scenes.size(); ++s) {
    semLabels[s].assign(semantic[s].size(), -1);
    for (size_t j = 0; j < semantic[s].size(); ++j) {
      if (semantic[s].category[j]) semLabels[s][j] = *semantic[s].category[j];
    }
    pointLabels[s] = broadcast_labels(semantic[s], scenes[s].part());
  }

  for (int it = 1; it <= config.iterations; ++it) {
    // Pseudo instances from raw (first iteration) or shifted coordinates.
    std::vector<InstancePseudoLabels> pseudo(scenes.size());
    parallel_for(scenes.size(), [&](size_t s) {
      const auto& part = scenes[s].part();
      const std::vector<InstanceSeed> seeds = click_seeds(scenes[s].annotation, part);
      if (seeds.empty()) {
        pseudo[s].instance.assign(part.size(), -1);
        return;
      }
      const std::vector<Vec3> coords =
          it == 1 ? raw_coords(part) : shifted_coords(forward(model, scenes[s].feats, part), part);
      pseudo[s] = filter_components(seeded_kmeans(seeds, coords, semLabels[s], config.kmeansRounds), scenes[s].graph,
                                    config.minPoints);
    });

    std::vector<SvRef> refs;
    for (size_t s = 0; s < scenes.size(); ++s) {
      for (size_t j = 0; j < pseudo[s].size(); ++j) {
        if (pseudo[s].instance[j] >= 0) refs.push_back({s, static_cast<int>(j)});
      }
    }
    if (refs.empty()) throw Error("run_instance: no pseudo instances survived filtering");
    std::vector<int> pool(refs.size());
    for (size_t k = 0; k < refs.size(); ++k) pool[k] = static_cast<int>(k);

    const bool frozen = it == 1;
    TrainMask mask;
    if (frozen) mask = TrainMask{false, false, true};
    const int epochs = it == 1 ? sch.epochsFirst : sch.epochsLater;
    ModelGrad velocity = zero_model(model.dims());
    std::mt19937_64 rng(mix_seed(config.seed, static_cast<uint64_t>(it)));
    for (int epoch = 0; epoch < epochs; ++epoch) {
      const double lr = cosine_lr(sch.learningRate, epoch, epochs, sch.cosineDecay);
      double sum = 0.0;
      size_t steps = 0;
      for (const auto& batch : epoch_batches(pool, sch.sampleCap, sch.batchSize, rng)) {
        std::vector<size_t> order(batch.begin(), batch.end());
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return refs[a].scene < refs[b].scene; });
        ModelGrad grad = zero_model(model.dims());
        double loss = 0.0;
        for (size_t start = 0; start < order.size();) {
          const size_t s = refs[order[start]].scene;
          std::vector<int> svs;
          size_t end = start;
          while (end < order.size() && refs[order[end]].scene == s) svs.push_back(refs[order[end++]].sv);
          const double share = static_cast<double>(svs.size()) / static_cast<double>(order.size());
          const auto& part = scenes[s].part();
          LossAndGrad off = offset_loss_and_grad(model, scenes[s].feats, part, pseudo[s], &svs);
          loss += share * config.offsetWeight * off.loss;
          add_into(off.grad, grad, share * config.offsetWeight);
          if (!frozen) {
            std::vector<int> rows, lab;
            for (int j : svs) {
              for (int i : part.members[j]) {
                if (pointLabels[s][i] < 0) continue;
                rows.push_back(i);
                lab.push_back(pointLabels[s][i]);
              }
            }
            if (!rows.empty()) {
              LossAndGrad ce = ce_loss_and_grad(model, gather_rows(scenes[s].feats, rows), lab);
              loss += share * ce.loss;
              add_into(ce.grad, grad, share);
            }
          }
          start = end;
        }
        if (!std::isfinite(loss)) throw Error("instance training diverged at epoch " + std::to_string(epoch));
        sgd_step(model, grad, velocity, lr, sch.momentum, mask);
        sum += loss;
        ++steps;
      }
      run.lossCurve.push_back(steps ? sum / static_cast<double>(steps) : 0.0);
    }
    run.pseudo = std::move(pseudo);
  }

  run.predictions.resize(scenes.size());
  parallel_for(scenes.size(),
               [&](size_t s) { run.predictions[s] = predict_instances(model, scenes[s], config, true); });
  run.model = std::move(model);
  return run;
}

}  // namespace otoc
