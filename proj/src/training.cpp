#include "dbfusion/training.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace dbf {

std::string_view stage_name(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

StageSpec StageSpec::pretrain_defaults() {
  StageSpec s;
  s.stage = Stage::Pretrain;
  s.steps = 2000;
  s.batch = 16;
  s.lr_max = 3e-4;
  s.lr_min = 0.0;
  s.trainable = {VisionEncoder::kGroup, Projector::kGroup, ToyLM::kGroup};
  return s;
}

StageSpec StageSpec::finetune_defaults() {
  StageSpec s;
  s.stage = Stage::Finetune;
  s.steps = 1000;
  s.batch = 16;
  s.lr_max = 1e-4;
  s.lr_min = 0.0;
  s.trainable = {Projector::kGroup, ToyLM::kGroup};
  return s;
}

void StageSpec::validate() const {
  const std::set<std::string> expected = stage == Stage::Pretrain
                                             ? std::set<std::string>{VisionEncoder::kGroup, Projector::kGroup, ToyLM::kGroup}
                                             : std::set<std::string>{Projector::kGroup, ToyLM::kGroup};
  if (trainable != expected) {
    throw ConfigError("trainable: " + std::string(stage_name(stage)) + " must train exactly the " +
                      (stage == Stage::Pretrain ? "vision, projector and lm" : "projector and lm") + " groups");
  }
  if (batch == 0) throw ConfigError("batch: must be at least 1");
  if (!(lr_max >= lr_min) || lr_min < 0.0) throw ConfigError("lr_max/lr_min: need lr_max >= lr_min >= 0");
}

double cosine_lr(std::size_t step, const StageSpec& spec) {
  if (step >= spec.steps) {
    throw ArgumentError("cosine_lr: step " + std::to_string(step) + " outside [0," + std::to_string(spec.steps) + ")");
  }
  if (spec.steps == 1) return spec.lr_max;
  const double frac = static_cast<double>(step) / static_cast<double>(spec.steps - 1);
  return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

void Adam::step(const std::vector<Parameter*>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : params) {
    if (!p->tensor.has_grad()) continue;
    auto& st = state_[p->name];
    const std::size_t n = p->tensor.numel();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    auto g = p->tensor.grad();
    auto w = p->tensor.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = st.m[i] / bc1;
      const double vh = st.v[i] / bc2;
      w[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

std::vector<TrainingExample> caption_examples(const std::vector<DatasetRecord>& records) {
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.id, r.image, tokenize(r.caption.caption)});
  return out;
}

std::vector<TrainingExample> instruction_examples(const std::vector<DatasetRecord>& records, std::size_t max_pairs) {
  std::vector<TrainingExample> out;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.instructions.size(); ++i) {
      if (max_pairs && out.size() >= max_pairs) return out;
      const auto& ins = r.instructions[i];
      out.push_back({r.id + "#" + std::to_string(i), r.image, tokenize_instruction(ins.question, ins.answer)});
    }
  }
  return out;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step, std::size_t batch, std::size_t n) {
  if (n == 0) throw ArgumentError("batch_indices: empty dataset");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), 0x7a11u};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  return out;
}

namespace {

// Freezes groups outside the stage's trainable set for the lifetime of the guard.
class FreezeGuard {
 public:
  FreezeGuard(ParameterStore& store, const std::set<std::string>& trainable) : store_(store) {
    for (auto& p : store_.all()) {
      saved_.push_back(p.tensor.requires_grad());
      p.tensor.set_requires_grad(trainable.count(p.group) != 0);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < saved_.size(); ++i) store_.all()[i].tensor.set_requires_grad(saved_[i]);
  }

 private:
  ParameterStore& store_;
  std::vector<bool> saved_;
};

double max_grad_norm(const std::vector<Parameter*>& params) {
  double mx = 0.0;
  for (const Parameter* p : params) {
    if (!p->tensor.has_grad()) continue;
    double s = 0.0;
    for (double g : p->tensor.grad()) s += g * g;
    mx = std::max(mx, std::sqrt(s));
  }
  return mx;
}

[[noreturn]] void abort_step(std::size_t step, const std::vector<std::size_t>& idx,
                             const std::vector<TrainingExample>& data, double grad_norm, const std::string& why) {
  std::ostringstream os;
  os << "training diverged at step " << step << ": " << why << "; batch ids [";
  for (std::size_t i = 0; i < idx.size(); ++i) os << (i ? "," : "") << data[idx[i]].id;
  os << "]; max grad norm " << grad_norm;
  throw TrainingError(os.str());
}

}  // namespace

StageResult run_stage(MultimodalModel& model, const std::vector<TrainingExample>& data, const StageSpec& spec,
                      const StepCallback& on_step) {
  spec.validate();
  StageResult result;
  if (spec.steps == 0) return result;
  if (data.empty()) throw ArgumentError("training data is empty");

  ParameterStore& store = model.params();
  FreezeGuard freeze(store, spec.trainable);
  std::vector<Parameter*> trainable;
  for (auto& p : store.all())
    if (spec.trainable.count(p.group)) trainable.push_back(&p);

  Adam adam;
  const double inv_batch = 1.0 / static_cast<double>(spec.batch);
  for (std::size_t step = 0; step < spec.steps; ++step) {
    const auto idx = batch_indices(spec.seed, step, spec.batch, data.size());
    store.zero_grad();
    double batch_loss = 0.0;
    try {
      for (std::size_t i : idx) {
        Tensor loss = model.loss(data[i].image, data[i].text);
        batch_loss += loss.item() * inv_batch;
        backward(scale(loss, inv_batch));
      }
    } catch (const NumericError& e) {
      abort_step(step, idx, data, max_grad_norm(trainable), e.what());
    }
    const double gnorm = max_grad_norm(trainable);
    if (!std::isfinite(batch_loss)) abort_step(step, idx, data, gnorm, "loss is not finite");
    if (!std::isfinite(gnorm)) abort_step(step, idx, data, gnorm, "gradient is not finite");
    const double lr = cosine_lr(step, spec);
    adam.step(trainable, lr);
    LossLogEntry entry{step, lr, batch_loss, gnorm};
    result.log.push_back(entry);
    if (on_step) on_step(entry);
  }
  store.zero_grad();
  return result;
}

StageResult pretrain_stage(MultimodalModel& model, const std::vector<TrainingExample>& captions, const StageSpec& spec,
                           const StepCallback& on_step) {
  if (spec.stage != Stage::Pretrain) throw ArgumentError("pretrain_stage: spec is not a pretrain stage");
  return run_stage(model, captions, spec, on_step);
}

StageResult finetune_stage(MultimodalModel& model, const std::vector<TrainingExample>& instructions,
                           const StageSpec& spec, const StepCallback& on_step) {
  if (spec.stage != Stage::Finetune) throw ArgumentError("finetune_stage: spec is not a finetune stage");
  return run_stage(model, instructions, spec, on_step);
}

std::vector<double> smooth(const std::vector<double>& xs, std::size_t window) {
  if (window == 0) throw ArgumentError("smooth: window must be positive");
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace dbf
