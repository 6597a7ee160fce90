#include "dbfusion/nn.hpp"

#include <cmath>

namespace dbf {

Tensor ParameterStore::add(const std::string& name, const std::string& group, Tensor value) {
  if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{name, group, value});
  return value;
}

Tensor ParameterStore::normal(const std::string& name, const std::string& group, Shape shape, double stddev,
                              Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal(stddev);
  return add(name, group, Tensor(std::move(shape), std::move(d)));
}

Tensor ParameterStore::constant(const std::string& name, const std::string& group, Shape shape, double value) {
  return add(name, group, Tensor::filled(std::move(shape), value));
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
  return params_[it->second];
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
  return params_[it->second];
}

std::vector<Parameter*> ParameterStore::group(const std::string& group) {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p.group == group) out.push_back(&p);
  return out;
}

std::set<std::string> ParameterStore::groups() const {
  std::set<std::string> g;
  for (const auto& p : params_) g.insert(p.group);
  return g;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Linear::Linear(ParameterStore& store, const std::string& name, const std::string& group, std::size_t in,
               std::size_t out, Rng& rng)
    : weight(store.normal(name + ".weight", group, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
      bias(store.constant(name + ".bias", group, {out}, 0.0)) {}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, const std::string& group, std::size_t width)
    : gain(store.constant(name + ".gain", group, {width}, 1.0)),
      bias(store.constant(name + ".bias", group, {width}, 0.0)) {}

SelfAttention::SelfAttention(ParameterStore& store, const std::string& name, const std::string& group,
                             std::size_t width, std::size_t heads_, Rng& rng)
    : q(store, name + ".q", group, width, width, rng),
      k(store, name + ".k", group, width, width, rng),
      v(store, name + ".v", group, width, width, rng),
      out(store, name + ".out", group, width, width, rng),
      heads(heads_) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError(name + ": width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  }
}

Tensor SelfAttention::operator()(const Tensor& x, const AttentionMask* mask) const {
  return out(attention(q(x), k(x), v(x), heads, mask));
}

Mlp::Mlp(ParameterStore& store, const std::string& name, const std::string& group, std::size_t in,
         std::size_t hidden, std::size_t out, Rng& rng)
    : up(store, name + ".up", group, in, hidden, rng), down(store, name + ".down", group, hidden, out, rng) {}

TransformerBlock::TransformerBlock(ParameterStore& store, const std::string& name, const std::string& group,
                                   std::size_t width, std::size_t heads, std::size_t hidden, Rng& rng)
    : ln1(store, name + ".ln1", group, width),
      ln2(store, name + ".ln2", group, width),
      attn(store, name + ".attn", group, width, heads, rng),
      mlp(store, name + ".mlp", group, width, hidden, width, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x, const AttentionMask* mask) const {
  Tensor h = add(x, attn(ln1(x), mask));
  return add(h, mlp(ln2(h)));
}

}  // namespace dbf
