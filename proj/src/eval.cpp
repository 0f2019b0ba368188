#include "otoc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace otoc {

IoUResult miou(std::span<const int> pred, std::span<const int> gt, int categories) {
  if (pred.size() != gt.size()) throw Error("miou: prediction and ground truth lengths differ");
  std::vector<double> inter(categories, 0.0), predCount(categories, 0.0), gtCount(categories, 0.0);
  bool any = false;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0) continue;
    any = true;
    if (gt[i] >= categories) throw Error("miou: ground-truth category out of range");
    gtCount[gt[i]] += 1.0;
    if (pred[i] >= 0 && pred[i] < categories) {
      predCount[pred[i]] += 1.0;
      if (pred[i] == gt[i]) inter[gt[i]] += 1.0;
    }
  }
  if (!any) throw Error("miou: all ground-truth points unlabeled");
  IoUResult r;
  r.perCategory.assign(categories, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < categories; ++c) {
    const double uni = gtCount[c] + predCount[c] - inter[c];
    if (uni == 0.0) continue;
    r.perCategory[c] = inter[c] / uni;
    sum += r.perCategory[c];
    ++used;
  }
  r.miou = sum / used;
  return r;
}

std::vector<InstanceEntry> gt_instances(const PointCloud& cloud) {
  if (!cloud.instanceGt || !cloud.semanticGt) throw Error("cloud has no instance ground truth");
  std::map<int, InstanceEntry> byId;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const int id = (*cloud.instanceGt)[i];
    if (id < 0) continue;
    auto& e = byId[id];
    e.category = (*cloud.semanticGt)[i];
    e.score = 1.0;
    e.points.push_back(static_cast<int>(i));
  }
  std::vector<InstanceEntry> out;
  for (auto& [id, e] : byId) out.push_back(std::move(e));
  return out;
}

double point_set_iou(const std::vector<int>& a, const std::vector<int>& b) {
  size_t inter = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++inter;
      ++ia;
      ++ib;
    }
  }
  const size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double instance_ap(std::span<const InstanceScene> scenes, double iouThr) {
  struct Ranked {
    double score;
    size_t scene, index;
  };
  std::vector<Ranked> ranked;
  size_t totalGt = 0;
  for (size_t s = 0; s < scenes.size(); ++s) {
    totalGt += scenes[s].gt.size();
    for (size_t k = 0; k < scenes[s].preds.size(); ++k) ranked.push_back({scenes[s].preds[k].score, s, k});
  }
  if (totalGt == 0) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(scenes.size());
  for (size_t s = 0; s < scenes.size(); ++s) taken[s].assign(scenes[s].gt.size(), false);
  std::vector<double> precision, recall;
  double tp = 0.0, fp = 0.0;
  for (const auto& r : ranked) {
    const auto& pred = scenes[r.scene].preds[r.index];
    const auto& gts = scenes[r.scene].gt;
    double best = -1.0;
    size_t bestGt = gts.size();
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[r.scene][g] || gts[g].category != pred.category) continue;
      const double iou = point_set_iou(pred.points, gts[g].points);
      if (iou >= iouThr && iou > best) {
        best = iou;
        bestGt = g;
      }
    }
    if (bestGt < gts.size()) {
      taken[r.scene][bestGt] = true;
      tp += 1.0;
    } else {
      fp += 1.0;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(totalGt));
  }
  // All-point interpolation: precision envelope from the right.
  for (size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prevRecall = 0.0;
  for (size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prevRecall) * precision[k];
    prevRecall = recall[k];
  }
  return ap;
}

double instance_ap(const std::vector<InstanceEntry>& preds, const std::vector<InstanceEntry>& gt, double iouThr) {
  const InstanceScene scene{preds, gt};
  return instance_ap(std::span<const InstanceScene>(&scene, 1), iouThr);
}

PointCloud error_map(std::span<const int> pred, const PointCloud& gtCloud) {
  if (!gtCloud.semanticGt) throw Error("error_map requires semantic ground truth");
  if (pred.size() != gtCloud.size()) throw Error("error_map: prediction length mismatch");
  PointCloud out = gtCloud;
  for (size_t i = 0; i < pred.size(); ++i) {
    const int g = (*gtCloud.semanticGt)[i];
    out.colors[i] = (g >= 0 && pred[i] != g) ? Rgb{255, 0, 0} : Rgb{160, 160, 160};
  }
  return out;
}

nlohmann::json instances_to_json(const std::string& sceneId, const InstancePrediction& pred) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : pred.instances) {
    list.push_back({{"category", e.category}, {"score", e.score}, {"points", e.points}});
  }
  return {{"scene", sceneId}, {"instances", list}};
}

InstancePrediction instances_from_json(const nlohmann::json& j, size_t pointCount) {
  try {
    InstancePrediction pred;
    pred.pointInstance.assign(pointCount, -1);
    for (const auto& e : j.at("instances")) {
      InstanceEntry entry;
      entry.category = e.at("category").get<int>();
      entry.score = e.at("score").get<double>();
      entry.points = e.at("points").get<std::vector<int>>();
      std::sort(entry.points.begin(), entry.points.end());
      for (int p : entry.points) {
        if (p < 0 || static_cast<size_t>(p) >= pointCount) throw Error("instance point index out of range");
        pred.pointInstance[p] = static_cast<int>(pred.instances.size());
      }
      pred.instances.push_back(std::move(entry));
    }
    return pred;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed instance prediction: ") + e.what());
  }
}

nlohmann::json semantic_to_json(const std::string& sceneId, std::span<const int> labels) {
  return {{"scene", sceneId}, {"labels", std::vector<int>(labels.begin(), labels.end())}};
}

std::vector<int> semantic_from_json(const nlohmann::json& j) {
  try {
    return j.at("labels").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed semantic prediction: ") + e.what());
  }
}

}  // namespace otoc
