#pragma once

// Dense f64 tensors with dynamic reverse-mode autodiff.
//
// Every op that touches a tensor with requires_grad() records its parents and a
// backward closure on the result node. backward(loss) walks the recorded graph
// in reverse topological order, accumulates into leaf grads, and then drops the
// recorded links (the "tape") so activations can be freed.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dbfusion/errors.hpp"

namespace dbf {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access, for optimizers and parameter surgery in tests.
  // Mutating a tensor that is part of a live graph invalidates its gradients.
  std::span<double> mutable_data() { return node_->data; }

  double item() const;
  double at(std::size_t i, std::size_t j) const { return node_->data[i * node_->shape[1] + j]; }
  double operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy without graph history.
  Tensor detach() const;
  Tensor clone_parameter() const;

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Named trainable tensor. `group` ties it to a freezable parameter group.
struct Parameter {
  std::string name;
  std::string group;
  Tensor tensor;
};

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kL2NormEps = 1e-12;

// --- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x[n×d] + bias[d] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean_of(const std::vector<Tensor>& xs);

// --- structural -----------------------------------------------------------
Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

// --- reductions / normalization -------------------------------------------
Tensor mean_pool(const Tensor& x, std::size_t axis);
Tensor l2_normalize(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor softmax_rows(const Tensor& logits);

// --- losses -----------------------------------------------------------------
// Mean over rows of -sum_j target_ij * log softmax(logits)_ij. Targets are
// treated as constants.
Tensor softmax_cross_entropy_rows(const Tensor& logits, const Tensor& targets);
// Mean over k of -log softmax(logits[rows[k]])[targets[k]].
Tensor cross_entropy_ids(const Tensor& logits, std::span<const std::size_t> rows,
                         std::span<const std::size_t> targets);

// --- attention ----------------------------------------------------------------
// allow[i*cols + j] != 0 lets query i attend to key j.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  static AttentionMask full(std::size_t n);
  static AttentionMask causal_with_prefix(std::size_t n, std::size_t prefix);
  static AttentionMask grid_window(std::size_t grid_rows, std::size_t grid_cols, std::size_t radius);
  bool allowed(std::size_t i, std::size_t j) const { return allow[i * cols + j] != 0; }
};

// Multi-head scaled dot-product attention over q[n×D], k[m×D], v[m×D].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask* mask = nullptr);

// Populates grads of every leaf reachable from `loss`, then clears the
// recorded graph. `loss` must hold exactly one element.
void backward(const Tensor& loss);

}  // namespace dbf
