#pragma once

#include <vector>

#include "dbfusion/training.hpp"

namespace dbf::testing {

// Small enough that a training step takes a few milliseconds.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.encoder.image_size = 32;
  c.encoder.d_backbone = 8;
  c.encoder.width = 16;
  c.encoder.encoder_layers = 1;
  c.encoder.heads = 2;
  c.lm.d_model = 32;
  c.lm.layers = 1;
  c.lm.heads = 2;
  return c;
}

inline std::vector<DatasetRecord> tiny_records(std::size_t n, std::uint64_t seed = 0) {
  return generate_records(n, seed, ShapeMix{}, 32);
}

// Full-batch Adam on a fixed set of examples; returns the batch loss after the last update.
inline double overfit_single_batch(MultimodalModel& model, const std::vector<TrainingExample>& batch,
                                   std::size_t steps, double lr) {
  std::vector<Parameter*> params;
  for (auto& p : model.params().all()) {
    p.tensor.set_requires_grad(true);
    params.push_back(&p);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  Adam adam;
  for (std::size_t s = 0; s < steps; ++s) {
    model.params().zero_grad();
    for (const auto& ex : batch) backward(scale(model.loss(ex.image, ex.text), inv));
    adam.step(params, lr);
  }
  NoGradGuard ng;
  double loss = 0.0;
  for (const auto& ex : batch) loss += model.loss(ex.image, ex.text).item() * inv;
  return loss;
}

}  // namespace dbf::testing
