#include "dbfusion/toy_lm.hpp"

namespace dbf {

void LMConfig::validate() const {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("lm.d_model: " + std::to_string(d_model) + " not divisible by lm.heads " +
                      std::to_string(heads));
  }
  if (vocab < kByteOffset + 128) {
    throw ConfigError("lm.vocab: " + std::to_string(vocab) + " does not cover the byte tokenizer range");
  }
  if (layers == 0 || max_seq == 0) throw ConfigError("lm.layers and lm.max_seq must be positive");
}

namespace {
bool in_charset(unsigned char c) { return c >= 0x20 && c <= 0x7e; }
}  // namespace

TokenSequence tokenize(std::string_view text) {
  TokenSequence s;
  s.ids.reserve(text.size() + 2);
  s.ids.push_back(kBosId);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (!in_charset(c)) {
      throw TokenizerError("byte 0x" + std::to_string(c) + " at offset " + std::to_string(i) +
                           " is outside the corpus character set");
    }
    s.ids.push_back(c + kByteOffset);
  }
  s.ids.push_back(kEosId);
  s.loss_mask.assign(s.ids.size(), true);
  s.loss_mask[0] = false;
  return s;
}

std::string detokenize(const std::vector<std::size_t>& ids) {
  std::string out;
  for (auto id : ids) {
    if (id < kByteOffset) continue;
    out.push_back(static_cast<char>(id - kByteOffset));
  }
  return out;
}

TokenSequence tokenize_instruction(std::string_view prompt, std::string_view answer) {
  const std::string joined = std::string(prompt) + " " + std::string(answer);
  TokenSequence s = tokenize(joined);
  const std::size_t answer_start = 1 + prompt.size() + 1;
  for (std::size_t i = 0; i < s.size(); ++i) s.loss_mask[i] = i >= answer_start;
  return s;
}

ToyLM::ToyLM(const LMConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::string g = kGroup;
  tok_embed_ = store.normal("lm.tok_embed", g, {cfg_.vocab, cfg_.d_model}, 0.2, rng);
  pos_embed_ = store.normal("lm.pos_embed", g, {cfg_.max_seq, cfg_.d_model}, 0.02, rng);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    blocks_.emplace_back(store, "lm.block." + std::to_string(i), g, cfg_.d_model, cfg_.heads, 4 * cfg_.d_model, rng);
  }
  final_norm_ = LayerNorm(store, "lm.final_norm", g, cfg_.d_model);
  head_ = Linear(store, "lm.head", g, cfg_.d_model, cfg_.vocab, rng);
}

Tensor ToyLM::hidden_states(const Tensor* vision, const TokenSequence& text) const {
  if (text.ids.empty()) throw ArgumentError("lm forward: empty token sequence");
  if (text.loss_mask.size() != text.ids.size()) throw ArgumentError("lm forward: loss_mask length mismatch");
  std::size_t prefix = 0;
  if (vision) {
    if (vision->rank() != 2 || vision->dim(1) != cfg_.d_model) {
      throw DimensionError("lm forward: vision embeddings must be L x " + std::to_string(cfg_.d_model) + ", got " +
                           shape_str(vision->shape()));
    }
    prefix = vision->dim(0);
  }
  const std::size_t total = prefix + text.size();
  if (total > cfg_.max_seq) {
    throw SequenceLengthError("sequence of " + std::to_string(total) + " positions (" + std::to_string(prefix) +
                              " vision + " + std::to_string(text.size()) + " text) exceeds max_seq " +
                              std::to_string(cfg_.max_seq));
  }
  for (auto id : text.ids)
    if (id >= cfg_.vocab) throw ArgumentError("token id " + std::to_string(id) + " outside vocabulary");

  Tensor emb = gather_rows(tok_embed_, text.ids);
  Tensor x = vision ? concat({*vision, emb}, 0) : emb;
  x = add(x, slice(pos_embed_, 0, 0, total));
  const AttentionMask mask = AttentionMask::causal_with_prefix(total, prefix);
  for (const auto& b : blocks_) x = b(x, &mask);
  return final_norm_(x);
}

Tensor ToyLM::forward(const Tensor* vision, const TokenSequence& text) const {
  return head_(hidden_states(vision, text));
}

Tensor caption_loss(const Tensor& logits, const TokenSequence& text) {
  if (logits.rank() != 2 || logits.dim(0) < text.size()) {
    throw DimensionError("caption_loss: logits " + shape_str(logits.shape()) + " shorter than text of length " +
                         std::to_string(text.size()));
  }
  if (text.loss_mask.size() != text.size()) throw ArgumentError("caption_loss: loss_mask length mismatch");
  const std::size_t prefix = logits.dim(0) - text.size();
  std::vector<std::size_t> rows, targets;
  for (std::size_t j = 1; j < text.size(); ++j) {
    if (!text.loss_mask[j]) continue;
    rows.push_back(prefix + j - 1);
    targets.push_back(text.ids[j]);
  }
  if (rows.empty()) throw ArgumentError("caption_loss: loss mask selects no positions");
  return cross_entropy_ids(logits, rows, targets);
}

}  // namespace dbf
