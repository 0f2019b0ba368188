#pragma once

#include <filesystem>

#include <json.hpp>

#include "otoc/instance.hpp"
#include "otoc/neural.hpp"
#include "otoc/selftrain.hpp"
#include "otoc/supervoxel.hpp"
#include "otoc/synth.hpp"

namespace otoc {

/// Every hyperparameter of a run. JSON keys mirror the field names; missing
/// keys take defaults, unknown keys are rejected.
struct RunConfig {
  PartitionParams partition;
  FeatureParams features;
  SelfTrainConfig selftrain;
  InstanceConfig instance;
  SuiteSpec suite;
};

nlohmann::json config_to_json(const RunConfig& c);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Settings used by the acceptance suite and `gen-suite`: the default
/// hyperparameters with schedules shortened to fit a single-core budget.
RunConfig suite_config();

}  // namespace otoc
