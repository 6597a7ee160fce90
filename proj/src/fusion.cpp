#include "dbfusion/fusion.hpp"

#include <algorithm>

namespace dbf {

std::string_view strategy_name(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::TokenIntegration: return "token";
    case FusionStrategy::AveragePooling: return "pool";
    case FusionStrategy::ChannelIntegration: return "channel";
  }
  throw ArgumentError("unknown fusion strategy");
}

FusionStrategy strategy_from_name(std::string_view name) {
  if (name == "token") return FusionStrategy::TokenIntegration;
  if (name == "pool") return FusionStrategy::AveragePooling;
  if (name == "channel") return FusionStrategy::ChannelIntegration;
  throw ArgumentError("unknown fusion strategy '" + std::string(name) + "' (expected token|pool|channel)");
}

std::size_t fused_length(FusionStrategy s, std::size_t k, std::size_t n_v) {
  return s == FusionStrategy::TokenIntegration ? k * n_v : n_v;
}

std::size_t fused_width(FusionStrategy s, std::size_t k, std::size_t d) {
  return s == FusionStrategy::ChannelIntegration ? k * d : d;
}

FusedFeatures fuse(const FeatureBundle& bundle, FusionStrategy strategy, const std::vector<FeatureKey>& order) {
  auto present = bundle.keys();
  auto sorted_order = order;
  std::sort(sorted_order.begin(), sorted_order.end());
  std::sort(present.begin(), present.end());
  if (sorted_order != present) {
    throw ArgumentError("fuse: order [" + format_feature_mask(order) + "] does not match bundle contents [" +
                        format_feature_mask(bundle.keys()) + "]");
  }
  std::vector<Tensor> parts;
  parts.reserve(order.size());
  for (auto key : order) parts.push_back(bundle.get(key));
  for (const auto& p : parts) {
    if (p.shape() != parts.front().shape()) {
      throw DimensionError("fuse: bundle features disagree in shape: " + shape_str(p.shape()) + " vs " +
                           shape_str(parts.front().shape()));
    }
  }
  FusedFeatures out{Tensor(), strategy, parts.size()};
  switch (strategy) {
    case FusionStrategy::TokenIntegration: out.tokens = concat(parts, 0); break;
    case FusionStrategy::AveragePooling: out.tokens = mean_of(parts); break;
    case FusionStrategy::ChannelIntegration: out.tokens = concat(parts, 1); break;
  }
  return out;
}

FusedFeatures fuse(const FeatureBundle& bundle, FusionStrategy strategy) { return fuse(bundle, strategy, bundle.keys()); }

Projector::Projector(const ProjectorConfig& cfg, ParameterStore& store, Rng& rng)
    : cfg_(cfg),
      mlp_(store, "projector." + std::string(strategy_name(cfg.strategy)), kGroup, cfg.input_width(),
           cfg.hidden_width(), cfg.d_model, rng) {}

Tensor Projector::project_to_lm(const FusedFeatures& fused) const {
  if (fused.strategy != cfg_.strategy || fused.tokens.rank() != 2 || fused.tokens.dim(1) != cfg_.input_width()) {
    throw ConfigError("project_to_lm: projector built for " + std::string(strategy_name(cfg_.strategy)) +
                      " with input width " + std::to_string(cfg_.input_width()) + " was fed " +
                      std::string(strategy_name(fused.strategy)) + " features of shape " +
                      shape_str(fused.tokens.shape()));
  }
  return mlp_(fused.tokens);
}

}  // namespace dbf
