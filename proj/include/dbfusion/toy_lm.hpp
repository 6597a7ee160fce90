#pragma once

// Small decoder-only LM. Projected vision rows form a bidirectional prefix that
// every text position can see; text positions attend causally.

#include <string>
#include <string_view>
#include <vector>

#include "dbfusion/nn.hpp"

namespace dbf {

struct LMConfig {
  std::size_t d_model = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t vocab = 512;
  std::size_t max_seq = 256;

  void validate() const;
};

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kByteOffset = 3;

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<bool> loss_mask;  // true where token i is a prediction target

  std::size_t size() const { return ids.size(); }
};

// Byte-level tokenizer over printable ASCII; ids are byte + 3.
TokenSequence tokenize(std::string_view text);
std::string detokenize(const std::vector<std::size_t>& ids);
// [bos] prompt answer [eos] with loss only on the answer bytes and eos.
TokenSequence tokenize_instruction(std::string_view prompt, std::string_view answer);

class ToyLM {
 public:
  static constexpr const char* kGroup = "lm";

  ToyLM(const LMConfig& cfg, ParameterStore& store, Rng& rng);
  const LMConfig& config() const { return cfg_; }

  // vision may be null (text-only pass). Returns logits (L + len) x vocab.
  Tensor forward(const Tensor* vision, const TokenSequence& text) const;
  // Final-layer (post-LayerNorm) hidden states, (L + len) x d_model.
  Tensor hidden_states(const Tensor* vision, const TokenSequence& text) const;

 private:
  LMConfig cfg_;
  Tensor tok_embed_;
  Tensor pos_embed_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear head_;
};

// Mean next-token cross-entropy over positions whose loss_mask is set. The
// vision prefix length is logits.rows - text.size(); vision rows never carry loss.
Tensor caption_loss(const Tensor& logits, const TokenSequence& text);

}  // namespace dbf
