#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pagnol/model.hpp"
#include "pagnol/training.hpp"

namespace pagnol {

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);
nlohmann::json plan_to_json(const TrainPlan& p);
TrainPlan plan_from_json(const nlohmann::json& j);

// Self-describing checkpoint: an 8-byte magic, a JSON header (config, plan,
// step, seed, tensor index, checksum) and little-endian float32 tensor data.
struct Checkpoint {
  Model model;
  std::optional<OptimizerState> optimizer;
  TrainPlan plan;
  std::int64_t step = 0;
  // Additional named float tensors (classifier heads, soft prompts).
  std::map<std::string, std::vector<float>> extras;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, const OptimizerState* optimizer,
                     const TrainPlan& plan, std::int64_t step,
                     const std::map<std::string, std::vector<float>>& extras = {},
                     const nlohmann::json& metadata = nlohmann::json::object());

// Throws IoError on missing, truncated or corrupt files. With
// load_optimizer=false the optimizer moments are skipped even if present.
Checkpoint load_checkpoint(const std::filesystem::path& path, bool load_optimizer = true);

}  // namespace pagnol
