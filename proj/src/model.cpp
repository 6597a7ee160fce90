#include "dbfusion/model.hpp"

#include <algorithm>

namespace dbf {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(where + "." + key + ": unknown key");
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

ProjectorConfig projector_config(const ModelConfig& c) {
  return ProjectorConfig{c.strategy, c.features.size(), c.encoder.width, c.lm.d_model};
}

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  lm.validate();
  if (features.empty()) throw ConfigError("features: at least one feature is required");
  for (std::size_t i = 0; i < features.size(); ++i)
    for (std::size_t j = i + 1; j < features.size(); ++j)
      if (features[i] == features[j]) throw ConfigError("features: duplicate entry");
  if (vision_tokens() >= lm.max_seq) {
    throw ConfigError("strategy: " + std::string(strategy_name(strategy)) + " yields " +
                      std::to_string(vision_tokens()) + " vision tokens, leaving no room under lm.max_seq " +
                      std::to_string(lm.max_seq));
  }
}

json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"patch", c.patch},
          {"d_backbone", c.d_backbone}, {"width", c.width},
          {"encoder_layers", c.encoder_layers}, {"heads", c.heads},
          {"max_prompt_tokens", c.max_prompt_tokens}, {"window_radius", c.window_radius}};
}

json to_json(const LMConfig& c) {
  return {{"d_model", c.d_model}, {"layers", c.layers}, {"heads", c.heads}, {"vocab", c.vocab}, {"max_seq", c.max_seq}};
}

json to_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"lm", to_json(c.lm)},
          {"strategy", strategy_name(c.strategy)},
          {"features", format_feature_mask(c.features)},
          {"seed", c.seed}};
}

void from_json(const json& j, EncoderConfig& c) {
  const std::string w = "encoder";
  reject_unknown(j, {"image_size", "patch", "d_backbone", "width", "encoder_layers", "heads", "max_prompt_tokens",
                     "window_radius"},
                 w);
  read_key(j, "image_size", c.image_size, w);
  read_key(j, "patch", c.patch, w);
  read_key(j, "d_backbone", c.d_backbone, w);
  read_key(j, "width", c.width, w);
  read_key(j, "encoder_layers", c.encoder_layers, w);
  read_key(j, "heads", c.heads, w);
  read_key(j, "max_prompt_tokens", c.max_prompt_tokens, w);
  read_key(j, "window_radius", c.window_radius, w);
}

void from_json(const json& j, LMConfig& c) {
  const std::string w = "lm";
  reject_unknown(j, {"d_model", "layers", "heads", "vocab", "max_seq"}, w);
  read_key(j, "d_model", c.d_model, w);
  read_key(j, "layers", c.layers, w);
  read_key(j, "heads", c.heads, w);
  read_key(j, "vocab", c.vocab, w);
  read_key(j, "max_seq", c.max_seq, w);
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown(j, {"encoder", "lm", "strategy", "features", "seed"}, "model");
  if (j.contains("encoder")) from_json(j.at("encoder"), c.encoder);
  if (j.contains("lm")) from_json(j.at("lm"), c.lm);
  try {
    if (j.contains("strategy")) c.strategy = strategy_from_name(j.at("strategy").get<std::string>());
  } catch (const Error& e) {
    throw ConfigError(std::string("strategy: ") + e.what());
  }
  try {
    if (j.contains("features")) c.features = parse_feature_mask(j.at("features").get<std::string>());
  } catch (const Error& e) {
    throw ConfigError(std::string("features: ") + e.what());
  }
  read_key(j, "seed", c.seed, "model");
}

MultimodalModel::MultimodalModel(const ModelConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      rng_(cfg.seed),
      encoder_(cfg_.encoder, store_, rng_),
      projector_(projector_config(cfg_), store_, rng_),
      lm_(cfg_.lm, store_, rng_) {}

FeatureBundle MultimodalModel::bundle(const Tensor& image) const {
  std::set<PromptTask> tasks;
  for (auto k : cfg_.features)
    if (k != FeatureKey::Depth) tasks.insert(task_of(k));
  FeatureBundle b;
  if (tasks.empty()) {
    b.depth = encoder_.project_norm(encoder_.patch_embed(image));
  } else {
    b = encoder_.extract_bundle(image, tasks);
  }
  return b.masked(cfg_.features);
}

FeatureBundle MultimodalModel::full_bundle(const Tensor& image) const {
  return encoder_.extract_bundle(image, {kAllTasks.begin(), kAllTasks.end()});
}

Tensor MultimodalModel::vision_embeddings(const Tensor& image) const {
  return projector_.project_to_lm(fuse(bundle(image), cfg_.strategy, cfg_.features));
}

Tensor MultimodalModel::logits(const Tensor& image, const TokenSequence& text) const {
  const Tensor v = vision_embeddings(image);
  return lm_.forward(&v, text);
}

Tensor MultimodalModel::loss(const Tensor& image, const TokenSequence& text) const {
  return caption_loss(logits(image, text), text);
}

}  // namespace dbf
