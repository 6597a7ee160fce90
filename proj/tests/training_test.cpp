#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dbfusion/checkpoint.hpp"
#include "dbfusion/training.hpp"
#include "test_support.hpp"
#include "training_support.hpp"

namespace dbf {
namespace {

using testing::tiny_model_config;
using testing::tiny_records;

StageSpec short_spec(Stage stage, std::size_t steps, std::size_t batch = 4) {
  StageSpec s = stage == Stage::Pretrain ? StageSpec::pretrain_defaults() : StageSpec::finetune_defaults();
  s.steps = steps;
  s.batch = batch;
  return s;
}

std::vector<std::vector<double>> snapshot(const ParameterStore& store) {
  std::vector<std::vector<double>> out;
  for (const auto& p : store.all()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

TEST(StageSpec, DefaultsAndGroups) {
  const auto pre = StageSpec::pretrain_defaults();
  EXPECT_EQ(pre.steps, 2000u);
  EXPECT_EQ(pre.batch, 16u);
  EXPECT_EQ(pre.lr_max, 3e-4);
  EXPECT_EQ(pre.lr_min, 0.0);
  EXPECT_EQ(pre.trainable, (std::set<std::string>{"vision", "projector", "lm"}));
  const auto fin = StageSpec::finetune_defaults();
  EXPECT_EQ(fin.steps, 1000u);
  EXPECT_EQ(fin.lr_max, 1e-4);
  EXPECT_EQ(fin.trainable, (std::set<std::string>{"projector", "lm"}));
}

TEST(StageSpec, ValidationRejectsWrongGroupsAndRates) {
  auto s = StageSpec::finetune_defaults();
  s.trainable.insert("vision");
  EXPECT_THROW(s.validate(), ConfigError);
  s = StageSpec::pretrain_defaults();
  s.trainable.erase("lm");
  EXPECT_THROW(s.validate(), ConfigError);
  s = StageSpec::pretrain_defaults();
  s.batch = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = StageSpec::pretrain_defaults();
  s.lr_min = 1e-3;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(CosineLr, EndpointsAndMidpoint) {
  StageSpec s = StageSpec::pretrain_defaults();
  s.lr_min = 1e-5;
  EXPECT_NEAR(cosine_lr(0, s), s.lr_max, 1e-12);
  EXPECT_NEAR(cosine_lr(s.steps - 1, s), s.lr_min, 1e-12);
  s.steps = 1001;
  EXPECT_NEAR(cosine_lr(500, s), 0.5 * (s.lr_max + s.lr_min), 1e-12);
}

TEST(CosineLr, MonotoneAndInRange) {
  StageSpec s = StageSpec::pretrain_defaults();
  for (std::size_t i = 1; i < s.steps; ++i) {
    ASSERT_LE(cosine_lr(i, s), cosine_lr(i - 1, s));
    ASSERT_GE(cosine_lr(i, s), s.lr_min);
  }
}

TEST(CosineLr, OutOfRangeIsArgumentError) {
  StageSpec s = StageSpec::pretrain_defaults();
  EXPECT_THROW(cosine_lr(s.steps, s), ArgumentError);
  s.steps = 0;
  EXPECT_THROW(cosine_lr(0, s), ArgumentError);
  s.steps = 1;
  EXPECT_EQ(cosine_lr(0, s), s.lr_max);
}

TEST(BatchIndices, PureFunctionOfSeedAndStep) {
  EXPECT_EQ(batch_indices(3, 7, 16, 100), batch_indices(3, 7, 16, 100));
  EXPECT_NE(batch_indices(3, 7, 16, 100), batch_indices(3, 8, 16, 100));
  EXPECT_NE(batch_indices(3, 7, 16, 100), batch_indices(4, 7, 16, 100));
  for (auto i : batch_indices(0, 0, 64, 5)) EXPECT_LT(i, 5u);
  EXPECT_THROW(batch_indices(0, 0, 4, 0), ArgumentError);
}

TEST(Examples, CaptionAndInstructionViews) {
  const auto recs = tiny_records(6);
  const auto caps = caption_examples(recs);
  ASSERT_EQ(caps.size(), 6u);
  EXPECT_EQ(detokenize(caps[2].text.ids), recs[2].caption.caption);
  const auto ins = instruction_examples(recs);
  std::size_t total = 0;
  for (const auto& r : recs) total += r.instructions.size();
  EXPECT_EQ(ins.size(), total);
  EXPECT_EQ(ins[0].id, recs[0].id + "#0");
  EXPECT_EQ(instruction_examples(recs, 5).size(), 5u);
}

TEST(Smooth, TrailingWindow) {
  const auto s = smooth({1, 2, 3, 4, 5}, 2);
  EXPECT_EQ(s, (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
}

TEST(Pretrain, ZeroStepsLeavesParametersIdentical) {
  MultimodalModel model(tiny_model_config());
  const auto before = snapshot(model.params());
  const auto res = pretrain_stage(model, caption_examples(tiny_records(4)), short_spec(Stage::Pretrain, 0));
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(snapshot(model.params()), before);
}

TEST(Pretrain, LogReplaysScheduleAndGradNormsAreFinite) {
  MultimodalModel model(tiny_model_config());
  const auto spec = short_spec(Stage::Pretrain, 12);
  std::vector<LossLogEntry> seen;
  const auto res = pretrain_stage(model, caption_examples(tiny_records(8)), spec,
                                  [&](const LossLogEntry& e) { seen.push_back(e); });
  ASSERT_EQ(res.log.size(), 12u);
  ASSERT_EQ(seen.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(res.log[i].step, i);
    EXPECT_EQ(res.log[i].lr, cosine_lr(i, spec));
    EXPECT_TRUE(std::isfinite(res.log[i].grad_norm));
    EXPECT_GT(res.log[i].grad_norm, 0.0);
    EXPECT_EQ(seen[i].loss, res.log[i].loss);
  }
}

TEST(Pretrain, UpdatesEveryGroupAndRestoresRequiresGrad) {
  MultimodalModel model(tiny_model_config());
  const std::string v0 = group_hash(model.params(), "vision"), p0 = group_hash(model.params(), "projector"),
                    l0 = group_hash(model.params(), "lm");
  model.params().all()[0].tensor.set_requires_grad(false);
  std::vector<bool> flags;
  for (const auto& p : model.params().all()) flags.push_back(p.tensor.requires_grad());
  pretrain_stage(model, caption_examples(tiny_records(4)), short_spec(Stage::Pretrain, 2));
  EXPECT_NE(group_hash(model.params(), "vision"), v0);
  EXPECT_NE(group_hash(model.params(), "projector"), p0);
  EXPECT_NE(group_hash(model.params(), "lm"), l0);
  for (std::size_t i = 0; i < flags.size(); ++i) EXPECT_EQ(model.params().all()[i].tensor.requires_grad(), flags[i]);
}

TEST(Pretrain, SmoothedLossDecreases) {
  MultimodalModel model(tiny_model_config());
  auto spec = short_spec(Stage::Pretrain, 150, 8);
  spec.lr_max = 3e-3;
  const auto res = pretrain_stage(model, caption_examples(tiny_records(64)), spec);
  std::vector<double> losses;
  for (const auto& e : res.log) losses.push_back(e.loss);
  const auto s = smooth(losses, 50);
  EXPECT_LT(s.back(), s[49]);
}

TEST(Pretrain, SameSeedReproducesFinalLoss) {
  auto run = [] {
    MultimodalModel model(tiny_model_config());
    return pretrain_stage(model, caption_examples(tiny_records(8)), short_spec(Stage::Pretrain, 6)).log.back().loss;
  };
  EXPECT_NEAR(run(), run(), 1e-12);
}

TEST(Pretrain, StageKindIsChecked) {
  MultimodalModel model(tiny_model_config());
  const auto data = caption_examples(tiny_records(2));
  EXPECT_THROW(pretrain_stage(model, data, short_spec(Stage::Finetune, 1)), ArgumentError);
  EXPECT_THROW(finetune_stage(model, data, short_spec(Stage::Pretrain, 1)), ArgumentError);
  EXPECT_THROW(pretrain_stage(model, {}, short_spec(Stage::Pretrain, 1)), ArgumentError);
}

TEST(Pretrain, NonFiniteLossAbortsWithDiagnostics) {
  MultimodalModel model(tiny_model_config());
  model.params().get("lm.head.bias").tensor.mutable_data()[5] = NAN;
  try {
    pretrain_stage(model, caption_examples(tiny_records(4)), short_spec(Stage::Pretrain, 3, 2));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("scene-0000"), std::string::npos) << msg;
    EXPECT_NE(msg.find("max grad norm"), std::string::npos) << msg;
  }
}

TEST(Finetune, VisionFrozenProjectorAndLmUpdated) {
  MultimodalModel model(tiny_model_config());
  const auto recs = tiny_records(8);
  pretrain_stage(model, caption_examples(recs), short_spec(Stage::Pretrain, 2));
  const auto before = snapshot(model.params());
  const std::string v0 = group_hash(model.params(), "vision"), p0 = group_hash(model.params(), "projector"),
                    l0 = group_hash(model.params(), "lm");
  finetune_stage(model, instruction_examples(recs), short_spec(Stage::Finetune, 3));
  EXPECT_EQ(group_hash(model.params(), "vision"), v0);
  EXPECT_NE(group_hash(model.params(), "projector"), p0);
  EXPECT_NE(group_hash(model.params(), "lm"), l0);
  const auto after = snapshot(model.params());
  for (std::size_t i = 0; i < after.size(); ++i)
    if (model.params().all()[i].group == "vision") EXPECT_EQ(after[i], before[i]) << model.params().all()[i].name;
}

TEST(Finetune, QuestionTargetsNeverContributeToLoss) {
  MultimodalModel model(tiny_model_config());
  const auto recs = tiny_records(3);
  for (const auto& ex : instruction_examples(recs)) {
    NoGradGuard ng;
    const Tensor logits = model.logits(ex.image, ex.text);
    const double base = caption_loss(logits, ex.text).item();
    for (std::size_t p = 0; p < ex.text.size(); ++p) {
      if (ex.text.loss_mask[p]) continue;
      TokenSequence flipped = ex.text;
      flipped.ids[p] = flipped.ids[p] == 70 ? 71 : 70;
      ASSERT_EQ(caption_loss(logits, flipped).item(), base) << ex.id << " position " << p;
    }
  }
}

TEST(Finetune, SmoothedInstructionLossDecreases) {
  MultimodalModel model(tiny_model_config());
  const auto recs = tiny_records(64);
  auto spec = short_spec(Stage::Finetune, 150, 8);
  spec.lr_max = 3e-3;
  const auto res = finetune_stage(model, instruction_examples(recs), spec);
  std::vector<double> losses;
  for (const auto& e : res.log) losses.push_back(e.loss);
  const auto s = smooth(losses, 50);
  EXPECT_LT(s.back(), s[49]);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter p{"w", "g", Tensor::vector({1.0, -2.0, 3.0})};
  auto g = p.tensor.mutable_grad();
  g[0] = 0.5;
  g[1] = -4.0;
  g[2] = 0.0;
  Adam adam;
  adam.step({&p}, 0.1);
  EXPECT_NEAR(p.tensor[0], 0.9, 1e-6);
  EXPECT_NEAR(p.tensor[1], -1.9, 1e-6);
  EXPECT_EQ(p.tensor[2], 3.0);
  Parameter q{"q", "g", Tensor::vector({1.0})};
  adam.step({&q}, 0.1);
  EXPECT_EQ(q.tensor[0], 1.0);  // no gradient, untouched
}

}  // namespace
}  // namespace dbf
