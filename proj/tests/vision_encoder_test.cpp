#include <gtest/gtest.h>

#include "dbfusion/synth_data.hpp"
#include "dbfusion/tensor_io.hpp"
#include "dbfusion/vision_encoder.hpp"
#include "test_support.hpp"

namespace dbf {
namespace {

using testing::max_abs_diff;

struct Fixture {
  EncoderConfig cfg;
  ParameterStore store;
  Rng rng{3};
  VisionEncoder enc{cfg, store, rng};

  void zero(const std::string& name) {
    for (auto& x : store.get(name).tensor.mutable_data()) x = 0.0;
  }
};

Tensor sample_image(std::size_t i) { return render_scene(sample_scene(0, i, ShapeMix{}, 64)); }

bool rows_equal(const Tensor& a, const Tensor& b, std::size_t r) {
  for (std::size_t j = 0; j < a.dim(1); ++j)
    if (a.at(r, j) != b.at(r, j)) return false;
  return true;
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c;
  EXPECT_NO_THROW(c.validate());
  c.width = 66;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.patch = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PromptTokenizer, CanonicalPromptsFitDefaultBudget) {
  PromptTokenizer tok;
  EXPECT_EQ(prompt_text(PromptTask::Ocr), "provide the text shown in the image");
  EXPECT_EQ(prompt_text(PromptTask::DetailedCaption), "describe what is shown in the image with a paragraph");
  EXPECT_EQ(prompt_text(PromptTask::DenseRegionCaption), "locate the objects in the image, with their descriptions");
  for (auto t : kAllTasks) EXPECT_NO_THROW(tok.encode(prompt_text(t), EncoderConfig{}.max_prompt_tokens));
  EXPECT_EQ(tok.encode(prompt_text(PromptTask::Ocr), 12).size(), 7u);
}

TEST(PromptTokenizer, RejectsOverlongAndUnknown) {
  PromptTokenizer tok;
  EXPECT_THROW(tok.encode(prompt_text(PromptTask::DetailedCaption), 8), TokenizerError);
  EXPECT_THROW(tok.encode("summon the dragon", 12), TokenizerError);
  EXPECT_THROW(tok.encode("", 12), TokenizerError);
}

TEST(PromptTokenizer, TooLongPromptSurfacesFromEncoder) {
  EncoderConfig cfg;
  cfg.max_prompt_tokens = 8;
  ParameterStore store;
  Rng rng(1);
  VisionEncoder enc(cfg, store, rng);
  const Tensor v = enc.project_norm(enc.patch_embed(sample_image(0)));
  EXPECT_NO_THROW(enc.encode_with_prompt(v, PromptTask::Ocr));
  EXPECT_THROW(enc.encode_with_prompt(v, PromptTask::DetailedCaption), TokenizerError);
}

TEST(FeatureMask, ParseAndFormat) {
  const auto keys = parse_feature_mask("ocr,depth");
  EXPECT_EQ(keys, (std::vector<FeatureKey>{FeatureKey::Ocr, FeatureKey::Depth}));
  EXPECT_EQ(format_feature_mask(keys), "ocr,depth");
  EXPECT_THROW(parse_feature_mask(""), ArgumentError);
  EXPECT_THROW(parse_feature_mask("ocr,ocr"), ArgumentError);
  EXPECT_THROW(parse_feature_mask("colour"), ArgumentError);
}

TEST(ValidateImage, RejectsBadImages) {
  EncoderConfig cfg;
  EXPECT_THROW(validate_image(Tensor::zeros({64, 64}), cfg), DimensionError);
  EXPECT_THROW(validate_image(Tensor::zeros({60, 60, 3}), cfg), ConfigError);
  EXPECT_THROW(validate_image(Tensor::filled({64, 64, 3}, 1.5), cfg), SpecError);
  EXPECT_NO_THROW(validate_image(Tensor::filled({64, 64, 3}, 1.0), cfg));
}

TEST(PatchEmbed, OneRowPerPatchInRasterOrder) {
  Fixture f;
  const Tensor img = sample_image(1);
  EXPECT_EQ(f.enc.patch_embed(img).shape(), (Shape{64, 32}));
  const Tensor p = f.enc.patchify(img);
  ASSERT_EQ(p.shape(), (Shape{64, 192}));
  // patch (2,5): first pixel is image (16, 40); second row of the patch starts at (17, 40).
  const std::size_t r = 2 * 8 + 5;
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(p.at(r, c), img[(16 * 64 + 40) * 3 + c]);
    EXPECT_EQ(p.at(r, 8 * 3 + c), img[(17 * 64 + 40) * 3 + c]);
  }
}

TEST(PatchEmbed, LocalityFollowsWindow) {
  Fixture f;
  const Tensor a = sample_image(2);
  std::vector<double> px(a.data().begin(), a.data().end());
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) px[(y * 64 + x) * 3 + c] = 1.0 - px[(y * 64 + x) * 3 + c];
  const Tensor b(a.shape(), px);
  const Tensor ea = f.enc.patch_embed(a), eb = f.enc.patch_embed(b);
  const auto window = AttentionMask::grid_window(8, 8, 1);
  std::size_t changed = 0;
  for (std::size_t r = 0; r < 64; ++r) {
    if (window.allowed(r, 0)) {
      EXPECT_FALSE(rows_equal(ea, eb, r)) << "row " << r;
      ++changed;
    } else {
      EXPECT_TRUE(rows_equal(ea, eb, r)) << "row " << r;
    }
  }
  EXPECT_EQ(changed, 4u);  // patches (0,0) (0,1) (1,0) (1,1)
}

TEST(PatchEmbed, ZeroImageGivesIdenticalRows) {
  Fixture f;
  const Tensor e = f.enc.patch_embed(Tensor::zeros({64, 64, 3}));
  for (std::size_t r = 1; r < 64; ++r)
    for (std::size_t j = 0; j < e.dim(1); ++j) ASSERT_EQ(e.at(r, j), e.at(0, j));
}

TEST(ProjectNorm, ShapeUnderDefaults) {
  Fixture f;
  EXPECT_EQ(f.enc.project_norm(f.enc.patch_embed(sample_image(0))).shape(), (Shape{64, 64}));
  EXPECT_THROW(f.enc.project_norm(Tensor::zeros({64, 31})), DimensionError);
}

TEST(ProjectNorm, ZeroProjectionGivesAffineBias) {
  Fixture f;
  f.zero("vision.proj.weight");
  f.zero("vision.proj.bias");
  std::mt19937_64 rng(5);
  const Tensor beta = testing::random_tensor({64}, rng);
  std::copy(beta.data().begin(), beta.data().end(), f.store.get("vision.proj_norm.bias").tensor.mutable_data().begin());
  const Tensor out = f.enc.project_norm(testing::random_tensor({64, 32}, rng));
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t j = 0; j < 64; ++j) ASSERT_EQ(out.at(r, j), beta[j]);
}

TEST(ProjectNorm, GradientMatchesFiniteDifferences) {
  Fixture f;
  std::mt19937_64 rng(9);
  Tensor raw = testing::random_tensor({64, 32}, rng, 1.0, true);
  const Tensor w = testing::random_tensor({64, 64}, rng);
  auto loss = [&] { return sum(mul(f.enc.project_norm(raw), w)); };
  std::vector<Tensor> targets{raw};
  for (auto& p : f.store.all())
    if (p.name.rfind("vision.proj", 0) == 0) targets.push_back(p.tensor);
  for (int trial = 0; trial < 5; ++trial) EXPECT_LT(testing::directional_check(targets, loss, rng), 1e-4);
}

TEST(EncodeWithPrompt, ShapePreservedForEveryTask) {
  Fixture f;
  const Tensor v = f.enc.project_norm(f.enc.patch_embed(sample_image(0)));
  for (auto t : kAllTasks) EXPECT_EQ(f.enc.encode_with_prompt(v, t).shape(), v.shape());
  EXPECT_THROW(f.enc.encode_with_prompt(Tensor::zeros({63, 64}), PromptTask::Ocr), DimensionError);
}

TEST(EncodeWithPrompt, TasksDifferAndDifferFromDepth) {
  Fixture f;
  const Tensor v = f.enc.project_norm(f.enc.patch_embed(sample_image(4)));
  const Tensor a = f.enc.encode_with_prompt(v, PromptTask::DetailedCaption);
  const Tensor b = f.enc.encode_with_prompt(v, PromptTask::Ocr);
  const Tensor c = f.enc.encode_with_prompt(v, PromptTask::DenseRegionCaption);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
  EXPECT_GT(max_abs_diff(a, c), 1e-6);
  EXPECT_GT(max_abs_diff(b, c), 1e-6);
  for (const Tensor* t : {&a, &b, &c}) EXPECT_GT(max_abs_diff(*t, v), 1e-6);
}

// Zeroing every residual branch output plus the positional rows leaves pure identity.
TEST(EncodeWithPrompt, ZeroValuePathReturnsInput) {
  Fixture f;
  f.zero("vision.pos_v");
  for (std::size_t i = 0; i < f.cfg.encoder_layers; ++i) {
    const std::string l = "vision.encoder." + std::to_string(i);
    for (const char* s : {".attn.v.weight", ".attn.v.bias", ".attn.out.bias", ".mlp.down.weight", ".mlp.down.bias"})
      f.zero(l + s);
  }
  const Tensor v = f.enc.project_norm(f.enc.patch_embed(sample_image(3)));
  for (auto t : kAllTasks) EXPECT_EQ(max_abs_diff(f.enc.encode_with_prompt(v, t), v), 0.0);
}

TEST(EncodeWithPrompt, GradientMatchesFiniteDifferences) {
  EncoderConfig cfg;
  cfg.encoder_layers = 1;
  ParameterStore store;
  Rng r(4);
  VisionEncoder enc(cfg, store, r);
  std::mt19937_64 rng(10);
  Tensor v = testing::random_tensor({64, 64}, rng, 1.0, true);
  const Tensor w = testing::random_tensor({64, 64}, rng);
  auto loss = [&] { return sum(mul(enc.encode_with_prompt(v, PromptTask::Ocr), w)); };
  std::vector<Tensor> targets{v};
  for (auto& p : store.all())
    if (p.name.rfind("vision.encoder", 0) == 0 || p.name == "vision.prompt_embed") targets.push_back(p.tensor);
  for (int trial = 0; trial < 5; ++trial) EXPECT_LT(testing::directional_check(targets, loss, rng), 1e-4);
}

TEST(ExtractBundle, FullSubsetAndEmpty) {
  Fixture f;
  const Tensor img = sample_image(5);
  const FeatureBundle full = f.enc.extract_bundle(img, {kAllTasks.begin(), kAllTasks.end()});
  EXPECT_EQ(full.size(), 4u);
  for (auto k : kCanonicalOrder) EXPECT_EQ(full.get(k).shape(), (Shape{64, 64}));
  const FeatureBundle ocr = f.enc.extract_bundle(img, {PromptTask::Ocr});
  EXPECT_EQ(ocr.keys(), (std::vector<FeatureKey>{FeatureKey::Depth, FeatureKey::Ocr}));
  EXPECT_EQ(max_abs_diff(ocr.get(FeatureKey::Ocr), full.get(FeatureKey::Ocr)), 0.0);
  EXPECT_THROW(f.enc.extract_bundle(img, {}), ArgumentError);
  EXPECT_THROW(ocr.get(FeatureKey::Caption), ArgumentError);
}

TEST(ExtractBundle, BitIdenticalAcrossCallsAndInstances) {
  Fixture f, g;
  const Tensor img = sample_image(6);
  const std::set<PromptTask> all{kAllTasks.begin(), kAllTasks.end()};
  const FeatureBundle a = f.enc.extract_bundle(img, all), b = f.enc.extract_bundle(img, all),
                      c = g.enc.extract_bundle(img, all);
  for (auto k : kCanonicalOrder) {
    EXPECT_EQ(encode_tensor(a.get(k)), encode_tensor(b.get(k)));
    EXPECT_EQ(encode_tensor(a.get(k)), encode_tensor(c.get(k)));
  }
}

TEST(FeatureBundle, MaskedKeepsOnlyRequested) {
  Fixture f;
  const FeatureBundle full = f.enc.extract_bundle(sample_image(0), {kAllTasks.begin(), kAllTasks.end()});
  const FeatureBundle m = full.masked({FeatureKey::Caption, FeatureKey::Grounding});
  EXPECT_EQ(m.keys(), (std::vector<FeatureKey>{FeatureKey::Caption, FeatureKey::Grounding}));
  EXPECT_FALSE(m.has(FeatureKey::Depth));
  EXPECT_THROW(full.masked({}), ArgumentError);
}

}  // namespace
}  // namespace dbf
