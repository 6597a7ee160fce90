#pragma once

// `dbfusion` command-line driver. Exit codes: 0 ok, 1 runtime failure,
// 2 usage error, 3 config error.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dbfusion/alignment.hpp"
#include "dbfusion/model.hpp"
#include "dbfusion/synth_data.hpp"
#include "dbfusion/training.hpp"

namespace dbf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string data;
  std::string data_sha256;  // manifest hash, filled in when data is set
  std::string out;
  std::string checkpoint;
  std::string pairs;

  ModelConfig model;
  StageSpec stage;
  std::size_t max_pairs = 2000;

  std::size_t n = 5000;
  ShapeMix mix;

  // Checks a finetune/viz run against the loaded checkpoint.
  std::optional<FusionStrategy> expect_strategy;
  std::optional<std::vector<FeatureKey>> expect_features;

  AlignmentOptions align;
  FusionStrategy align_strategy = FusionStrategy::ChannelIntegration;
  std::vector<FeatureKey> align_features{kCanonicalOrder.begin(), kCanonicalOrder.end()};
  std::size_t seeds = 3;
  std::size_t records = 256;
  std::string subset = "all";  // all | text-heavy | multi-object
  std::vector<FeatureKey> remove;
  bool depth_only = false;

  std::size_t viz_records = 1;
  std::size_t scale = 8;
};

// Resolves a raw config (file merged with flags) into a checked RunConfig.
// Throws ConfigError naming the offending key.
RunConfig validate_config(const nlohmann::json& raw);
// The resolved view written to <out>/config.json; only sections the command uses.
nlohmann::ordered_json to_json(const RunConfig& cfg);

// Keeps large tensor buffers on the heap instead of fresh mmaps (glibc only).
void tune_allocator();

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace dbf::cli
