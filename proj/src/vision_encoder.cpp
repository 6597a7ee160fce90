#include "dbfusion/vision_encoder.hpp"

#include <algorithm>
#include <sstream>

namespace dbf {

std::string_view prompt_text(PromptTask task) {
  switch (task) {
    case PromptTask::DetailedCaption: return "describe what is shown in the image with a paragraph";
    case PromptTask::Ocr: return "provide the text shown in the image";
    case PromptTask::DenseRegionCaption: return "locate the objects in the image, with their descriptions";
  }
  throw ArgumentError("unknown prompt task");
}

std::string_view task_key(PromptTask task) { return feature_key_name(feature_key_of(task)); }

PromptTask task_from_key(std::string_view key) { return task_of(feature_key_from_name(key)); }

std::string_view feature_key_name(FeatureKey key) {
  switch (key) {
    case FeatureKey::Depth: return "depth";
    case FeatureKey::Caption: return "caption";
    case FeatureKey::Ocr: return "ocr";
    case FeatureKey::Grounding: return "grounding";
  }
  throw ArgumentError("unknown feature key");
}

FeatureKey feature_key_from_name(std::string_view name) {
  for (auto k : kCanonicalOrder)
    if (feature_key_name(k) == name) return k;
  throw ArgumentError("unknown feature name '" + std::string(name) + "' (expected depth|caption|ocr|grounding)");
}

FeatureKey feature_key_of(PromptTask task) {
  switch (task) {
    case PromptTask::DetailedCaption: return FeatureKey::Caption;
    case PromptTask::Ocr: return FeatureKey::Ocr;
    case PromptTask::DenseRegionCaption: return FeatureKey::Grounding;
  }
  throw ArgumentError("unknown prompt task");
}

PromptTask task_of(FeatureKey key) {
  switch (key) {
    case FeatureKey::Caption: return PromptTask::DetailedCaption;
    case FeatureKey::Ocr: return PromptTask::Ocr;
    case FeatureKey::Grounding: return PromptTask::DenseRegionCaption;
    case FeatureKey::Depth: break;
  }
  throw ArgumentError("depth feature has no prompt task");
}

std::vector<FeatureKey> parse_feature_mask(std::string_view csv) {
  std::vector<FeatureKey> keys;
  std::string item;
  std::istringstream is{std::string(csv)};
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    auto k = feature_key_from_name(item);
    if (std::find(keys.begin(), keys.end(), k) != keys.end()) {
      throw ArgumentError("feature '" + item + "' listed twice");
    }
    keys.push_back(k);
  }
  if (keys.empty()) throw ArgumentError("feature mask must name at least one feature");
  return keys;
}

std::string format_feature_mask(const std::vector<FeatureKey>& keys) {
  std::string out;
  for (auto k : keys) {
    if (!out.empty()) out += ',';
    out += feature_key_name(k);
  }
  return out;
}

void EncoderConfig::validate() const {
  if (patch == 0 || image_size % patch != 0) {
    throw ConfigError("encoder.patch: image size " + std::to_string(image_size) + " not divisible by patch " +
                      std::to_string(patch));
  }
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("encoder.heads: width " + std::to_string(width) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (d_backbone == 0 || encoder_layers == 0 || max_prompt_tokens == 0) {
    throw ConfigError("encoder: d_backbone, encoder_layers and max_prompt_tokens must be positive");
  }
}

PromptTokenizer::PromptTokenizer() {
  for (auto task : kAllTasks) {
    std::istringstream is{std::string(prompt_text(task))};
    std::string w;
    while (is >> w) {
      if (!index_.count(w)) {
        index_.emplace(w, words_.size());
        words_.push_back(w);
      }
    }
  }
}

std::vector<std::size_t> PromptTokenizer::encode(std::string_view text, std::size_t max_tokens) const {
  std::vector<std::size_t> ids;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) {
    auto it = index_.find(w);
    if (it == index_.end()) throw TokenizerError("prompt word '" + w + "' is not in the prompt vocabulary");
    ids.push_back(it->second);
  }
  if (ids.empty()) throw TokenizerError("empty prompt");
  if (ids.size() > max_tokens) {
    throw TokenizerError("prompt has " + std::to_string(ids.size()) + " tokens, limit is " +
                         std::to_string(max_tokens));
  }
  return ids;
}

bool FeatureBundle::has(FeatureKey key) const {
  if (key == FeatureKey::Depth) return depth.has_value();
  return breadth.count(task_of(key)) != 0;
}

const Tensor& FeatureBundle::get(FeatureKey key) const {
  if (!has(key)) throw ArgumentError("bundle has no '" + std::string(feature_key_name(key)) + "' feature");
  if (key == FeatureKey::Depth) return *depth;
  return breadth.at(task_of(key));
}

std::vector<FeatureKey> FeatureBundle::keys() const {
  std::vector<FeatureKey> out;
  for (auto k : kCanonicalOrder)
    if (has(k)) out.push_back(k);
  return out;
}

FeatureBundle FeatureBundle::masked(const std::vector<FeatureKey>& keep) const {
  if (keep.empty()) throw ArgumentError("feature mask must keep at least one feature");
  FeatureBundle out;
  for (auto k : keep) {
    const Tensor& t = get(k);
    if (k == FeatureKey::Depth) {
      out.depth = t;
    } else {
      out.breadth.emplace(task_of(k), t);
    }
  }
  return out;
}

void validate_image(const Tensor& image, const EncoderConfig& cfg) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("image must be H x W x 3, got " + shape_str(image.shape()));
  }
  if (image.dim(0) % cfg.patch != 0 || image.dim(1) % cfg.patch != 0) {
    throw ConfigError("image " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(cfg.patch));
  }
  if (image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size) {
    throw ConfigError("image " + shape_str(image.shape()) + " does not match configured size " +
                      std::to_string(cfg.image_size));
  }
  for (double v : image.data()) {
    if (v < 0.0 || v > 1.0) throw SpecError("image pixel value outside [0,1]");
  }
}

VisionEncoder::VisionEncoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::string g = kGroup;
  const std::size_t patch_dim = cfg_.patch * cfg_.patch * 3;
  window_mask_ = AttentionMask::grid_window(cfg_.grid(), cfg_.grid(), cfg_.window_radius);
  patch_linear_ = Linear(store, "vision.backbone.patch", g, patch_dim, cfg_.d_backbone, rng);
  backbone_block_ = TransformerBlock(store, "vision.backbone.block", g, cfg_.d_backbone, 1, 2 * cfg_.d_backbone, rng);
  proj_ = Linear(store, "vision.proj", g, cfg_.d_backbone, cfg_.width, rng);
  proj_norm_ = LayerNorm(store, "vision.proj_norm", g, cfg_.width);
  prompt_embed_ = store.normal("vision.prompt_embed", g, {tokenizer_.vocab_size(), cfg_.width}, 1.0, rng);
  pos_v_ = store.normal("vision.pos_v", g, {cfg_.num_patches(), cfg_.width}, 0.02, rng);
  pos_t_ = store.normal("vision.pos_t", g, {cfg_.max_prompt_tokens, cfg_.width}, 0.02, rng);
  for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) {
    layers_.emplace_back(store, "vision.encoder." + std::to_string(i), g, cfg_.width, cfg_.heads, 4 * cfg_.width,
                         rng);
  }
}

Tensor VisionEncoder::patchify(const Tensor& image) const {
  validate_image(image, cfg_);
  const std::size_t p = cfg_.patch, g = cfg_.grid(), w = cfg_.image_size;
  const std::size_t patch_dim = p * p * 3;
  std::vector<double> out(g * g * patch_dim);
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      double* dst = out.data() + (pr * g + pc) * patch_dim;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < 3; ++c) *dst++ = image[((pr * p + y) * w + (pc * p + x)) * 3 + c];
    }
  return Tensor({g * g, patch_dim}, std::move(out));
}

Tensor VisionEncoder::patch_embed(const Tensor& image) const {
  return backbone_block_(patch_linear_(patchify(image)), &window_mask_);
}

Tensor VisionEncoder::project_norm(const Tensor& raw) const {
  if (raw.rank() != 2 || raw.dim(1) != cfg_.d_backbone) {
    throw DimensionError("project_norm: expected width " + std::to_string(cfg_.d_backbone) + ", got " +
                         shape_str(raw.shape()));
  }
  return proj_norm_(proj_(raw));
}

Tensor VisionEncoder::encode_with_prompt(const Tensor& v, PromptTask task) const {
  const std::size_t nv = cfg_.num_patches();
  if (v.rank() != 2 || v.dim(0) != nv || v.dim(1) != cfg_.width) {
    throw DimensionError("encode_with_prompt: expected " + std::to_string(nv) + "x" + std::to_string(cfg_.width) +
                         ", got " + shape_str(v.shape()));
  }
  const auto ids = tokenizer_.encode(prompt_text(task), cfg_.max_prompt_tokens);
  Tensor t = add(gather_rows(prompt_embed_, ids), slice(pos_t_, 0, 0, ids.size()));
  Tensor x = concat({add(v, pos_v_), t}, 0);
  for (const auto& layer : layers_) x = layer(x, nullptr);
  return slice(x, 0, 0, nv);
}

FeatureBundle VisionEncoder::extract_bundle(const Tensor& image, const std::set<PromptTask>& tasks) const {
  if (tasks.empty()) throw ArgumentError("extract_bundle: task set is empty");
  FeatureBundle b;
  b.depth = project_norm(patch_embed(image));
  for (auto task : tasks) b.breadth.emplace(task, encode_with_prompt(*b.depth, task));
  return b;
}

}  // namespace dbf
