#pragma once

// Parameter registry plus the handful of layers the models are built from.

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dbfusion/tensor.hpp"

namespace dbf {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double normal(double stddev) { return std::normal_distribution<double>(0.0, stddev)(engine_); }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Owns every trainable tensor of a model, keyed by a unique name. Insertion
// order is the serialization order.
class ParameterStore {
 public:
  Tensor add(const std::string& name, const std::string& group, Tensor value);
  Tensor normal(const std::string& name, const std::string& group, Shape shape, double stddev, Rng& rng);
  Tensor constant(const std::string& name, const std::string& group, Shape shape, double value);

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  const Parameter& get(const std::string& name) const;
  Parameter& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::vector<Parameter*> group(const std::string& group);
  std::set<std::string> groups() const;

  void zero_grad();
  std::size_t total_size() const;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, const std::string& group, std::size_t in,
         std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, const std::string& group, std::size_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct SelfAttention {
  Linear q, k, v, out;
  std::size_t heads = 1;

  SelfAttention() = default;
  SelfAttention(ParameterStore& store, const std::string& name, const std::string& group, std::size_t width,
                std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& x, const AttentionMask* mask) const;
};

// Two linear layers with GELU between them.
struct Mlp {
  Linear up, down;

  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::string& group, std::size_t in,
      std::size_t hidden, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
};

// Pre-LN transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  SelfAttention attn;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(ParameterStore& store, const std::string& name, const std::string& group, std::size_t width,
                   std::size_t heads, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const AttentionMask* mask) const;
};

}  // namespace dbf
