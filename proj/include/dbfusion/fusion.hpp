#pragma once

// Depth-breadth fusion of a FeatureBundle and the MLP projector into the
// language-model embedding space.

#include <string_view>
#include <vector>

#include "dbfusion/nn.hpp"
#include "dbfusion/vision_encoder.hpp"

namespace dbf {

enum class FusionStrategy { TokenIntegration, AveragePooling, ChannelIntegration };

std::string_view strategy_name(FusionStrategy s);  // token | pool | channel
FusionStrategy strategy_from_name(std::string_view name);

struct FusedFeatures {
  Tensor tokens;  // L x C
  FusionStrategy strategy = FusionStrategy::ChannelIntegration;
  std::size_t k = 0;
};

// Token count and width a strategy produces from k features of n_v x d.
std::size_t fused_length(FusionStrategy s, std::size_t k, std::size_t n_v);
std::size_t fused_width(FusionStrategy s, std::size_t k, std::size_t d);

// `order` must list every feature present in `bundle` exactly once.
FusedFeatures fuse(const FeatureBundle& bundle, FusionStrategy strategy, const std::vector<FeatureKey>& order);
// Fuses in canonical order [depth, caption, ocr, grounding] restricted to present keys.
FusedFeatures fuse(const FeatureBundle& bundle, FusionStrategy strategy);

struct ProjectorConfig {
  FusionStrategy strategy = FusionStrategy::ChannelIntegration;
  std::size_t k = 4;
  std::size_t feature_width = 64;
  std::size_t d_model = 128;

  std::size_t input_width() const { return fused_width(strategy, k, feature_width); }
  std::size_t hidden_width() const { return 2 * input_width(); }
};

// C -> 2C -> d_model with GELU, applied row-wise.
class Projector {
 public:
  static constexpr const char* kGroup = "projector";

  Projector(const ProjectorConfig& cfg, ParameterStore& store, Rng& rng);
  const ProjectorConfig& config() const { return cfg_; }
  Tensor project_to_lm(const FusedFeatures& fused) const;

 private:
  ProjectorConfig cfg_;
  Mlp mlp_;
};

}  // namespace dbf
