#pragma once

// Vision encoder + fusion + projector + toy LM wired into one model.

#include <cstdint>
#include <set>
#include <vector>

#include "json.hpp"

#include "dbfusion/fusion.hpp"
#include "dbfusion/nn.hpp"
#include "dbfusion/toy_lm.hpp"
#include "dbfusion/vision_encoder.hpp"

namespace dbf {

struct ModelConfig {
  EncoderConfig encoder;
  LMConfig lm;
  FusionStrategy strategy = FusionStrategy::ChannelIntegration;
  std::vector<FeatureKey> features{kCanonicalOrder.begin(), kCanonicalOrder.end()};
  std::uint64_t seed = 0;

  std::size_t vision_tokens() const { return fused_length(strategy, features.size(), encoder.num_patches()); }
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& c);
nlohmann::json to_json(const LMConfig& c);
nlohmann::json to_json(const ModelConfig& c);
// Missing keys keep their defaults; unknown keys are rejected with ConfigError.
void from_json(const nlohmann::json& j, EncoderConfig& c);
void from_json(const nlohmann::json& j, LMConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

class MultimodalModel {
 public:
  explicit MultimodalModel(const ModelConfig& cfg);
  MultimodalModel(const MultimodalModel&) = delete;
  MultimodalModel& operator=(const MultimodalModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const VisionEncoder& encoder() const { return encoder_; }
  const Projector& projector() const { return projector_; }
  const ToyLM& lm() const { return lm_; }

  // Depth plus every prompt-conditioned feature the config's mask names.
  FeatureBundle bundle(const Tensor& image) const;
  // Bundle with all four features regardless of the configured mask.
  FeatureBundle full_bundle(const Tensor& image) const;
  Tensor vision_embeddings(const Tensor& image) const;
  Tensor logits(const Tensor& image, const TokenSequence& text) const;
  Tensor loss(const Tensor& image, const TokenSequence& text) const;

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  Rng rng_;
  VisionEncoder encoder_;
  Projector projector_;
  ToyLM lm_;
};

}  // namespace dbf
