#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "otoc/neural.hpp"
#include "otoc/relation.hpp"

namespace otoc {

struct Checkpoint {
  ModelParams model;
  std::optional<RelationParams> relation;
  std::optional<PrototypeBank> bank;
  std::optional<AttentionParams> attention;
  nlohmann::json meta = nlohmann::json::object();
};

// "OTCK" | u32 header length | JSON header | f64 payload (little-endian).
// The header lists every weight block with its shape, in payload order.
std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json schedule_to_json(const TrainSchedule& s);
TrainSchedule schedule_from_json(const nlohmann::json& j, TrainSchedule base = {});

}  // namespace otoc
