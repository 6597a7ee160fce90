#include "dbfusion/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dbf {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void check_finite(const std::vector<double>& d, const char* op) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      std::ostringstream os;
      os << op << ": non-finite value at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

Tensor record(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
              std::function<void(Node&)> fn, const char* op) {
  check_finite(data, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool need = g_grad_enabled &&
              std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    std::ostringstream os;
    os << op << ": expected rank " << r << ", got shape " << shape_str(t.shape());
    throw DimensionError(os.str());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    std::ostringstream os;
    os << op << ": shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape());
    throw DimensionError(os.str());
  }
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->data.assign(1, 0.0); }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  check_finite(data, "Tensor");
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> d;
  d.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    d.insert(d.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(d));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) {
    throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[i];
}

double Tensor::item() const {
  if (numel() != 1) throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone_parameter() const {
  Tensor t = detach();
  t.set_requires_grad(true);
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  return record({m, n}, std::move(out), {a, b},
                [m, k, n](Node& self) {
                  CMap g(self.grad.data(), m, n);
                  auto& pa = *self.parents[0];
                  auto& pb = *self.parents[1];
                  if (pa.requires_grad) {
                    pa.ensure_grad();
                    MMap(pa.grad.data(), m, k).noalias() += g * CMap(pb.data.data(), k, n).transpose();
                  }
                  if (pb.requires_grad) {
                    pb.ensure_grad();
                    MMap(pb.grad.data(), k, n).noalias() += CMap(pa.data.data(), m, k).transpose() * g;
                  }
                },
                "matmul");
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return record({n, m}, std::move(out), {a},
                [m, n](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
                },
                "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return record(a.shape(), std::move(out), {a, b},
                [](Node& self) {
                  for (auto& p : self.parents) {
                    if (!p->requires_grad) continue;
                    p->ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
                  }
                },
                "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return record(a.shape(), std::move(out), {a, b},
                [](Node& self) {
                  for (std::size_t pi = 0; pi < 2; ++pi) {
                    auto& p = *self.parents[pi];
                    if (!p.requires_grad) continue;
                    p.ensure_grad();
                    const double sgn = pi == 0 ? 1.0 : -1.0;
                    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += sgn * self.grad[i];
                  }
                },
                "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return record(a.shape(), std::move(out), {a, b},
                [](Node& self) {
                  auto& pa = *self.parents[0];
                  auto& pb = *self.parents[1];
                  if (pa.requires_grad) {
                    pa.ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
                  }
                  if (pb.requires_grad) {
                    pb.ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
                  }
                },
                "mul");
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return record(a.shape(), std::move(out), {a},
                [s](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
                },
                "scale");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias[j];
  return record(x.shape(), std::move(out), {x, bias},
                [n, d](Node& self) {
                  auto& px = *self.parents[0];
                  auto& pb = *self.parents[1];
                  if (px.requires_grad) {
                    px.ensure_grad();
                    for (std::size_t i = 0; i < n * d; ++i) px.grad[i] += self.grad[i];
                  }
                  if (pb.requires_grad) {
                    pb.ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) pb.grad[j] += self.grad[i * d + j];
                  }
                },
                "add_bias");
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  std::vector<double> out(x.numel());
  std::vector<double> th(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    th[i] = std::tanh(c * (v + a * v * v * v));
    out[i] = 0.5 * v * (1.0 + th[i]);
  }
  return record(x.shape(), std::move(out), {x},
                [th = std::move(th)](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t i = 0; i < th.size(); ++i) {
                    const double v = p.data[i];
                    const double dinner = c * (1.0 + 3.0 * a * v * v);
                    const double d = 0.5 * (1.0 + th[i]) + 0.5 * v * (1.0 - th[i] * th[i]) * dinner;
                    p.grad[i] += self.grad[i] * d;
                  }
                },
                "gelu");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return record(Shape{}, {s}, {x},
                [](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (auto& g : p.grad) g += self.grad[0];
                },
                "sum");
}

Tensor mean_of(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ArgumentError("mean_of: empty tensor list");
  for (const auto& t : xs) require_same_shape(xs.front(), t, "mean_of");
  const double k = static_cast<double>(xs.size());
  std::vector<double> out(xs.front().numel(), 0.0);
  for (const auto& t : xs)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
  for (auto& v : out) v /= k;
  return record(xs.front().shape(), std::move(out), xs,
                [k](Node& self) {
                  for (auto& p : self.parents) {
                    if (!p->requires_grad) continue;
                    p->ensure_grad();
                    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] / k;
                  }
                },
                "mean_of");
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis) {
  if (tensors.empty()) throw ArgumentError("concat: empty tensor list");
  const Shape& ref = tensors.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : tensors) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != ref[i]) ok = false;
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(ref));
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : tensors) {
    offsets.push_back(off);
    const AxisSplit is = split_axis(t.shape(), axis);
    const std::size_t block = is.extent * is.inner;
    for (std::size_t o = 0; o < is.outer; ++o) {
      std::copy_n(t.data().begin() + o * block, block, out.begin() + o * os.extent * os.inner + off * os.inner);
    }
    off += is.extent;
  }
  return record(out_shape, std::move(out), tensors,
                [os, offsets](Node& self) {
                  for (std::size_t ti = 0; ti < self.parents.size(); ++ti) {
                    auto& p = *self.parents[ti];
                    if (!p.requires_grad) continue;
                    p.ensure_grad();
                    const std::size_t block = p.data.size() / os.outer;
                    for (std::size_t o = 0; o < os.outer; ++o) {
                      const double* src = self.grad.data() + o * os.extent * os.inner + offsets[ti] * os.inner;
                      double* dst = p.grad.data() + o * block;
                      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                  }
                },
                "concat");
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) throw DimensionError("slice: axis out of range for " + shape_str(x.shape()));
  if (begin >= end || end > x.dim(axis)) {
    throw ArgumentError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") invalid for extent " + std::to_string(x.dim(axis)));
  }
  const AxisSplit is = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * is.inner;
  std::vector<double> out(is.outer * block);
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(x.data().begin() + o * is.extent * is.inner + begin * is.inner, block, out.begin() + o * block);
  }
  return record(out_shape, std::move(out), {x},
                [is, begin, block](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t o = 0; o < is.outer; ++o) {
                    double* dst = p.grad.data() + o * is.extent * is.inner + begin * is.inner;
                    const double* src = self.grad.data() + o * block;
                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                  }
                },
                "slice");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return record(std::move(shape), std::move(out), {x},
                [](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
                },
                "reshape");
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw ArgumentError("gather_rows: empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v) {
      throw ArgumentError("gather_rows: id " + std::to_string(idx[r]) + " out of range " + std::to_string(v));
    }
    std::copy_n(table.data().begin() + idx[r] * d, d, out.begin() + r * d);
  }
  const std::size_t n = idx.size();
  return record({n, d}, std::move(out), {table},
                [idx = std::move(idx), d](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < d; ++j) p.grad[idx[r] * d + j] += self.grad[r * d + j];
                },
                "gather_rows");
}

// ---------------------------------------------------------------------------
// Reductions / normalization

Tensor mean_pool(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean_pool: axis out of range for " + shape_str(x.shape()));
  const AxisSplit is = split_axis(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  std::vector<double> out(is.outer * is.inner, 0.0);
  const double inv = 1.0 / static_cast<double>(is.extent);
  for (std::size_t o = 0; o < is.outer; ++o)
    for (std::size_t e = 0; e < is.extent; ++e)
      for (std::size_t i = 0; i < is.inner; ++i) out[o * is.inner + i] += x[(o * is.extent + e) * is.inner + i];
  for (auto& v : out) v *= inv;
  return record(out_shape, std::move(out), {x},
                [is, inv](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t o = 0; o < is.outer; ++o)
                    for (std::size_t e = 0; e < is.extent; ++e)
                      for (std::size_t i = 0; i < is.inner; ++i)
                        p.grad[(o * is.extent + e) * is.inner + i] += inv * self.grad[o * is.inner + i];
                },
                "mean_pool");
}

Tensor l2_normalize(const Tensor& x) {
  require_rank(x, 2, "l2_normalize");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(n * d);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    const double nr = std::sqrt(s);
    if (!(nr > kL2NormEps)) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(i) + " has near-zero norm");
    }
    norms[i] = nr;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / nr;
  }
  auto y = out;
  return record(x.shape(), std::move(out), {x},
                [n, d, norms = std::move(norms), y = std::move(y)](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * self.grad[i * d + j];
                    for (std::size_t j = 0; j < d; ++j)
                      p.grad[i * d + j] += (self.grad[i * d + j] - y[i * d + j] * dot) / norms[i];
                  }
                },
                "l2_normalize");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match width of " + shape_str(x.shape()));
  }
  std::vector<double> xhat(n * d), inv_std(n), out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x[i * d + j] - mu) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
    }
  }
  return record(x.shape(), std::move(out), {x, gain, bias},
                [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                  auto& px = *self.parents[0];
                  auto& pg = *self.parents[1];
                  auto& pb = *self.parents[2];
                  if (pg.requires_grad) {
                    pg.ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) pg.grad[j] += self.grad[i * d + j] * xhat[i * d + j];
                  }
                  if (pb.requires_grad) {
                    pb.ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) pb.grad[j] += self.grad[i * d + j];
                  }
                  if (px.requires_grad) {
                    px.ensure_grad();
                    const double invd = 1.0 / static_cast<double>(d);
                    for (std::size_t i = 0; i < n; ++i) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double g = self.grad[i * d + j] * pg.data[j];
                        m1 += g;
                        m2 += g * xhat[i * d + j];
                      }
                      m1 *= invd;
                      m2 *= invd;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double g = self.grad[i * d + j] * pg.data[j];
                        px.grad[i * d + j] += inv_std[i] * (g - m1 - xhat[i * d + j] * m2);
                      }
                    }
                  }
                },
                "layer_norm");
}

namespace {
void softmax_row(const double* in, double* out, std::size_t m) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < m; ++j) out[j] /= s;
}
}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) softmax_row(logits.data().data() + i * m, out.data() + i * m, m);
  auto y = out;
  return record(logits.shape(), std::move(out), {logits},
                [n, m, y = std::move(y)](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  for (std::size_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < m; ++j) dot += y[i * m + j] * self.grad[i * m + j];
                    for (std::size_t j = 0; j < m; ++j)
                      p.grad[i * m + j] += y[i * m + j] * (self.grad[i * m + j] - dot);
                  }
                },
                "softmax_rows");
}

// ---------------------------------------------------------------------------
// Losses

Tensor softmax_cross_entropy_rows(const Tensor& logits, const Tensor& targets) {
  require_rank(logits, 2, "softmax_cross_entropy_rows");
  require_same_shape(logits, targets, "softmax_cross_entropy_rows");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::vector<double> probs(n * m);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) {
      probs[i * m + j] = std::exp(row[j] - lse);
      const double t = targets[i * m + j];
      if (t != 0.0) loss -= t * (row[j] - lse);
    }
  }
  loss /= static_cast<double>(n);
  std::vector<double> tgt(targets.data().begin(), targets.data().end());
  return record(Shape{}, {loss}, {logits},
                [n, m, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  const double g = self.grad[0] / static_cast<double>(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    double tsum = 0.0;
                    for (std::size_t j = 0; j < m; ++j) tsum += tgt[i * m + j];
                    for (std::size_t j = 0; j < m; ++j)
                      p.grad[i * m + j] += g * (probs[i * m + j] * tsum - tgt[i * m + j]);
                  }
                },
                "softmax_cross_entropy_rows");
}

Tensor cross_entropy_ids(const Tensor& logits, std::span<const std::size_t> rows,
                         std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy_ids");
  if (rows.size() != targets.size()) throw ArgumentError("cross_entropy_ids: rows/targets length mismatch");
  if (rows.empty()) throw ArgumentError("cross_entropy_ids: no rows selected");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::vector<std::size_t> r(rows.begin(), rows.end()), t(targets.begin(), targets.end());
  std::vector<double> probs(r.size() * m);
  double loss = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (r[k] >= n || t[k] >= m) throw ArgumentError("cross_entropy_ids: index out of range");
    const double* row = logits.data().data() + r[k] * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) probs[k * m + j] = std::exp(row[j] - lse);
    loss -= row[t[k]] - lse;
  }
  loss /= static_cast<double>(r.size());
  return record(Shape{}, {loss}, {logits},
                [m, r = std::move(r), t = std::move(t), probs = std::move(probs)](Node& self) {
                  auto& p = *self.parents[0];
                  p.ensure_grad();
                  const double g = self.grad[0] / static_cast<double>(r.size());
                  for (std::size_t k = 0; k < r.size(); ++k) {
                    double* dst = p.grad.data() + r[k] * m;
                    for (std::size_t j = 0; j < m; ++j) dst[j] += g * probs[k * m + j];
                    dst[t[k]] -= g;
                  }
                },
                "cross_entropy_ids");
}

// ---------------------------------------------------------------------------
// Attention

AttentionMask AttentionMask::full(std::size_t n) {
  return AttentionMask{n, n, std::vector<std::uint8_t>(n * n, 1)};
}

AttentionMask AttentionMask::causal_with_prefix(std::size_t n, std::size_t prefix) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t limit = i < prefix ? prefix : i + 1;
    for (std::size_t j = 0; j < limit; ++j) m.allow[i * n + j] = 1;
  }
  return m;
}

AttentionMask AttentionMask::grid_window(std::size_t grid_rows, std::size_t grid_cols, std::size_t radius) {
  const std::size_t n = grid_rows * grid_cols;
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ri = i / grid_cols, ci = i % grid_cols;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t rj = j / grid_cols, cj = j % grid_cols;
      const std::size_t dr = ri > rj ? ri - rj : rj - ri;
      const std::size_t dc = ci > cj ? ci - cj : cj - ci;
      if (dr <= radius && dc <= radius) m.allow[i * n + j] = 1;
    }
  }
  return m;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const AttentionMask* mask) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t n = q.dim(0), m = k.dim(0), width = q.dim(1);
  if (k.dim(1) != width || v.dim(1) != width || v.dim(0) != m) {
    throw DimensionError("attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()) + " are incompatible");
  }
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (mask && (mask->rows != n || mask->cols != m)) {
    throw DimensionError("attention: mask extent does not match " + std::to_string(n) + "x" + std::to_string(m));
  }
  const std::size_t dh = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

  std::vector<double> out(n * width);
  std::vector<double> probs(heads * n * m);
  for (std::size_t h = 0; h < heads; ++h) {
    CStrided qh(q.data().data() + h * dh, n, dh, stride);
    CStrided kh(k.data().data() + h * dh, m, dh, stride);
    CStrided vh(v.data().data() + h * dh, m, dh, stride);
    MMap p(probs.data() + h * n * m, n, m);
    p.noalias() = (qh * kh.transpose()) * sc;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j)
        if (!mask || mask->allowed(i, j)) mx = std::max(mx, p(i, j));
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double e = (!mask || mask->allowed(i, j)) ? std::exp(p(i, j) - mx) : 0.0;
        p(i, j) = e;
        s += e;
      }
      p.row(i) /= s;
    }
    MStrided(out.data() + h * dh, n, dh, stride).noalias() = p * vh;
  }
  return record({n, width}, std::move(out), {q, k, v},
                [n, m, width, heads, dh, sc, probs = std::move(probs)](Node& self) {
                  auto& pq = *self.parents[0];
                  auto& pk = *self.parents[1];
                  auto& pv = *self.parents[2];
                  const Eigen::OuterStride<> st(static_cast<Eigen::Index>(width));
                  if (pq.requires_grad) pq.ensure_grad();
                  if (pk.requires_grad) pk.ensure_grad();
                  if (pv.requires_grad) pv.ensure_grad();
                  RowMat dp(n, m), ds(n, m);
                  for (std::size_t h = 0; h < heads; ++h) {
                    CMap p(probs.data() + h * n * m, n, m);
                    CStrided dout(self.grad.data() + h * dh, n, dh, st);
                    CStrided qh(pq.data.data() + h * dh, n, dh, st);
                    CStrided kh(pk.data.data() + h * dh, m, dh, st);
                    CStrided vh(pv.data.data() + h * dh, m, dh, st);
                    dp.noalias() = dout * vh.transpose();
                    if (pv.requires_grad) {
                      MStrided(pv.grad.data() + h * dh, m, dh, st).noalias() += p.transpose() * dout;
                    }
                    ds = p.cwiseProduct(dp);
                    Eigen::VectorXd rs = ds.rowwise().sum();
                    ds -= (p.array().colwise() * rs.array()).matrix();
                    ds *= sc;
                    if (pq.requires_grad) MStrided(pq.grad.data() + h * dh, n, dh, st).noalias() += ds * kh;
                    if (pk.requires_grad) {
                      MStrided(pk.grad.data() + h * dh, m, dh, st).noalias() += ds.transpose() * qh;
                    }
                  }
                },
                "attention");
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ArgumentError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ArgumentError("backward: loss is not connected to any parameter");

  // Iterative post-order DFS; reversing the order gives a valid reverse-topological sweep.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (Node* node : order) {
    if (!node->backward_fn) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace dbf
