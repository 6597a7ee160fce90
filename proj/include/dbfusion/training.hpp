#pragma once

// Two-stage recipe: full-model caption pretraining, then instruction
// finetuning with the vision encoder frozen. Adam + cosine decay.

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dbfusion/model.hpp"
#include "dbfusion/synth_data.hpp"

namespace dbf {

enum class Stage { Pretrain, Finetune };

std::string_view stage_name(Stage s);  // "pretrain" | "finetune"

struct StageSpec {
  Stage stage = Stage::Pretrain;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  double lr_max = 3e-4;
  double lr_min = 0.0;
  std::uint64_t seed = 0;
  std::set<std::string> trainable;

  static StageSpec pretrain_defaults();
  static StageSpec finetune_defaults();
  void validate() const;
};

double cosine_lr(std::size_t step, const StageSpec& spec);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Updates every parameter that currently holds a gradient.
  void step(const std::vector<Parameter*>& params, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct TrainingExample {
  std::string id;
  Tensor image;
  TokenSequence text;
};

std::vector<TrainingExample> caption_examples(const std::vector<DatasetRecord>& records);
// First `max_pairs` instruction pairs in manifest order (0 = all).
std::vector<TrainingExample> instruction_examples(const std::vector<DatasetRecord>& records, std::size_t max_pairs = 0);

struct LossLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct StageResult {
  std::vector<LossLogEntry> log;
};

// Indices of the batch drawn at `step`; a pure function of (seed, step).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step, std::size_t batch, std::size_t n);

using StepCallback = std::function<void(const LossLogEntry&)>;

StageResult run_stage(MultimodalModel& model, const std::vector<TrainingExample>& data, const StageSpec& spec,
                      const StepCallback& on_step = {});
StageResult pretrain_stage(MultimodalModel& model, const std::vector<TrainingExample>& captions, const StageSpec& spec,
                           const StepCallback& on_step = {});
StageResult finetune_stage(MultimodalModel& model, const std::vector<TrainingExample>& instructions,
                           const StageSpec& spec, const StepCallback& on_step = {});

// Trailing moving average with the given window (shorter at the start).
std::vector<double> smooth(const std::vector<double>& xs, std::size_t window);

}  // namespace dbf
