#pragma once

// Toy prompt-conditioned vision pathway:
//   image -> patchify -> linear -> windowed attention block   (patch_embed)
//         -> linear -> LayerNorm                               (project_norm, gives V)
//   [V + pos_v ; T + pos_t] -> bidirectional encoder -> first N_v rows (V'_task)

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dbfusion/nn.hpp"
#include "dbfusion/tensor.hpp"

namespace dbf {

enum class PromptTask { DetailedCaption, Ocr, DenseRegionCaption };

inline constexpr std::array<PromptTask, 3> kAllTasks = {PromptTask::DetailedCaption, PromptTask::Ocr,
                                                        PromptTask::DenseRegionCaption};

std::string_view prompt_text(PromptTask task);
// Short key used on the CLI and in file names: caption | ocr | grounding.
std::string_view task_key(PromptTask task);
PromptTask task_from_key(std::string_view key);

// Feature slots of a bundle, in canonical fusion order.
enum class FeatureKey { Depth, Caption, Ocr, Grounding };

inline constexpr std::array<FeatureKey, 4> kCanonicalOrder = {FeatureKey::Depth, FeatureKey::Caption,
                                                              FeatureKey::Ocr, FeatureKey::Grounding};

std::string_view feature_key_name(FeatureKey key);  // depth | caption | ocr | grounding
FeatureKey feature_key_from_name(std::string_view name);
FeatureKey feature_key_of(PromptTask task);
PromptTask task_of(FeatureKey key);  // throws for Depth

// Parses "depth,caption,ocr,grounding" (any non-empty subset).
std::vector<FeatureKey> parse_feature_mask(std::string_view csv);
std::string format_feature_mask(const std::vector<FeatureKey>& keys);

struct EncoderConfig {
  std::size_t image_size = 64;
  std::size_t patch = 8;
  std::size_t d_backbone = 32;
  std::size_t width = 64;  // D, the shared multimodal width
  std::size_t encoder_layers = 2;
  std::size_t heads = 4;
  std::size_t max_prompt_tokens = 12;
  std::size_t window_radius = 1;  // 3x3 neighbourhood on the patch grid

  std::size_t grid() const { return image_size / patch; }
  std::size_t num_patches() const { return grid() * grid(); }
  void validate() const;
};

// Closed word-level vocabulary built from the three canonical prompts.
class PromptTokenizer {
 public:
  PromptTokenizer();
  std::vector<std::size_t> encode(std::string_view text, std::size_t max_tokens) const;
  std::size_t vocab_size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct FeatureBundle {
  std::optional<Tensor> depth;
  std::map<PromptTask, Tensor> breadth;

  bool has(FeatureKey key) const;
  const Tensor& get(FeatureKey key) const;
  // Present keys in canonical order.
  std::vector<FeatureKey> keys() const;
  std::size_t size() const { return (depth ? 1 : 0) + breadth.size(); }
  // Copy keeping only `keep` (ablation).
  FeatureBundle masked(const std::vector<FeatureKey>& keep) const;
};

// Checks an H x W x 3 image against the config; throws ConfigError/SpecError.
void validate_image(const Tensor& image, const EncoderConfig& cfg);

class VisionEncoder {
 public:
  static constexpr const char* kGroup = "vision";

  VisionEncoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }

  Tensor patchify(const Tensor& image) const;
  Tensor patch_embed(const Tensor& image) const;
  Tensor project_norm(const Tensor& raw) const;
  Tensor encode_with_prompt(const Tensor& v, PromptTask task) const;
  FeatureBundle extract_bundle(const Tensor& image, const std::set<PromptTask>& tasks) const;

  const PromptTokenizer& prompt_tokenizer() const { return tokenizer_; }

 private:
  EncoderConfig cfg_;
  PromptTokenizer tokenizer_;
  AttentionMask window_mask_;
  Linear patch_linear_;
  TransformerBlock backbone_block_;
  Linear proj_;
  LayerNorm proj_norm_;
  Tensor prompt_embed_;
  Tensor pos_v_;
  Tensor pos_t_;
  std::vector<TransformerBlock> layers_;
};

}  // namespace dbf
