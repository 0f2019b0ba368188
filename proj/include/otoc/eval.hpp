#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "otoc/scene.hpp"

namespace otoc {

struct IoUResult {
  std::vector<double> perCategory;  // NaN for categories absent from both
  double miou = 0.0;
};

/// IoU per category over points with gt >= 0; the mean skips categories
/// absent from both prediction and ground truth.
IoUResult miou(std::span<const int> pred, std::span<const int> gt, int categories);

struct InstanceEntry {
  int category = 0;
  double score = 0.0;
  std::vector<int> points;  // ascending
};

struct InstancePrediction {
  std::vector<int> pointInstance;  // per point, -1 = none
  std::vector<InstanceEntry> instances;
};

/// Ground-truth instances of a cloud (instance id -> points, category).
std::vector<InstanceEntry> gt_instances(const PointCloud& cloud);

struct InstanceScene {
  std::vector<InstanceEntry> preds;
  std::vector<InstanceEntry> gt;
};

/// Score-sorted greedy one-to-one matching to same-category ground truth
/// at IoU >= thr; area under the interpolated precision-recall curve, with
/// predictions of all scenes ranked together.
double instance_ap(std::span<const InstanceScene> scenes, double iouThr);
double instance_ap(const std::vector<InstanceEntry>& preds, const std::vector<InstanceEntry>& gt, double iouThr);

double point_set_iou(const std::vector<int>& a, const std::vector<int>& b);

/// Mispredicted labeled points red, everything else gray.
PointCloud error_map(std::span<const int> pred, const PointCloud& gtCloud);

nlohmann::json instances_to_json(const std::string& sceneId, const InstancePrediction& pred);
InstancePrediction instances_from_json(const nlohmann::json& j, size_t pointCount);

nlohmann::json semantic_to_json(const std::string& sceneId, std::span<const int> labels);
std::vector<int> semantic_from_json(const nlohmann::json& j);

}  // namespace otoc
