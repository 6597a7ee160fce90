#pragma once

// Checkpoint file:
//   "DBFCKPT1" | u64 LE header length | JSON header | one DBFT record per parameter
// The header lists parameter names, groups and shapes (in record order), the
// model config, and the stage provenance ("init" | "stage1" | "stage2").

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dbfusion/model.hpp"

namespace dbf {

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::string stage() const { return header.at("stage").get<std::string>(); }
  ModelConfig model_config() const;
  const Tensor& tensor(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const MultimodalModel& model, const std::string& stage,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies every parameter of `ckpt` into `model`; names and shapes must match.
void apply_checkpoint(MultimodalModel& model, const Checkpoint& ckpt);
std::unique_ptr<MultimodalModel> load_model(const std::filesystem::path& path);

// SHA-256 over the storage-precision bytes of every parameter in `group`.
std::string group_hash(const ParameterStore& store, const std::string& group);
std::string group_hash(const Checkpoint& ckpt, const std::string& group);

}  // namespace dbf
