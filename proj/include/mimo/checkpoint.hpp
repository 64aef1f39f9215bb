#pragma once

#include "mimo/arch.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mimo {

// "mimo" (one multi-subnetwork model), "dropout" (one model evaluated with
// MC dropout) or "ensemble" (several single-subnetwork members).
enum class ModelKind { mimo, dropout, ensemble };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

struct CheckpointInfo {
  ModelKind kind = ModelKind::mimo;
  int epoch = 0;
  long step = 0;
  bool diagnostic = false;  // written when training aborted
};

struct Checkpoint {
  CheckpointInfo info;
  std::vector<MimoModel> models;  // one entry except for ensembles
};

// Directory layout: manifest.json plus one raw little-endian float32 blob per
// parameter tensor. Ensemble members are stored with a "member.<k>." prefix.
void save_checkpoint(const std::filesystem::path& dir, const CheckpointInfo& info,
                     std::span<const MimoModel* const> models);
void save_checkpoint(const std::filesystem::path& dir, const CheckpointInfo& info,
                     const MimoModel& model);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Hex SHA-256 over manifest.json followed by every blob in manifest order.
std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace mimo
