#pragma once

// Shared fixtures and independent oracles for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dbfusion/nn.hpp"
#include "dbfusion/tensor.hpp"

namespace dbf::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.data(), b.data()); }

// ||a - n|| / max(||a||, ||n||, 1e-8)
inline double relative_error(std::span<const double> a, std::span<const double> n) {
  double d = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

inline constexpr double kFdStep = 1e-5;

// Central-difference gradient of f with respect to every entry of x.
inline std::vector<double> numeric_gradient(Tensor& x, const std::function<double()>& f, double h = kFdStep) {
  auto d = x.mutable_data();
  std::vector<double> g(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double keep = d[i];
    d[i] = keep + h;
    const double fp = f();
    d[i] = keep - h;
    const double fm = f();
    d[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Random direction over a set of tensors, perturbed in place.
struct Direction {
  std::vector<Tensor> targets;
  std::vector<std::vector<double>> u;

  Direction(std::vector<Tensor> ts, std::mt19937_64& rng) : targets(std::move(ts)) {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& t : targets) {
      std::vector<double> v(t.numel());
      for (auto& x : v) x = nd(rng);
      u.push_back(std::move(v));
    }
  }
  void shift(double s) {
    for (std::size_t k = 0; k < targets.size(); ++k) {
      auto d = targets[k].mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * u[k][i];
    }
  }
  double dot_grad() const {
    double s = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k) {
      if (!targets[k].has_grad()) continue;
      auto g = targets[k].grad();
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * u[k][i];
    }
    return s;
  }
};

// Relative error between the analytic directional derivative (after one
// backward of `loss_fn`) and its central difference along a random direction.
inline double directional_check(std::vector<Tensor> targets, const std::function<Tensor()>& loss_fn,
                                std::mt19937_64& rng, double h = kFdStep) {
  for (auto& t : targets) t.zero_grad();
  backward(loss_fn());
  Direction dir(targets, rng);
  const double analytic = dir.dot_grad();
  double fp, fm;
  {
    NoGradGuard ng;
    dir.shift(h);
    fp = loss_fn().item();
    dir.shift(-2.0 * h);
    fm = loss_fn().item();
    dir.shift(h);
  }
  for (auto& t : targets) t.zero_grad();
  const double numeric = (fp - fm) / (2.0 * h);
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Naive triple loop, independent of the library's GEMM path.
inline std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out[i * n + j] = s;
    }
  return out;
}

// Cyclic Jacobi eigenvalues of a symmetric d x d matrix, sorted descending.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t d) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(d);
  for (std::size_t i = 0; i < d; ++i) ev[i] = a[i * d + i];
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

// -log softmax(row)[target] by explicit log-sum-exp.
inline double lse_nll(std::span<const double> row, std::size_t target) {
  double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s) - row[target];
}

// 8x8 patch grid: a tight background cluster near the origin and a wide
// "object" cluster offset along a fixed direction, placed on a 4x6 block.
struct TwoClusterFixture {
  Tensor feature;
  std::vector<bool> object;  // ground-truth labels, row-major
};

inline TwoClusterFixture two_cluster_fixture(std::uint64_t seed, std::size_t d = 16) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> wide(0.0, 1.0), tight(0.0, 0.05);
  TwoClusterFixture f;
  std::vector<double> data;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const bool obj = r >= 2 && r < 6 && c >= 1 && c < 7;
      f.object.push_back(obj);
      for (std::size_t j = 0; j < d; ++j) data.push_back(obj ? (j == 0 ? 10.0 : 0.0) + wide(rng) : tight(rng));
    }
  f.feature = Tensor({64, d}, data);
  return f;
}

struct PpmImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> rgb;
};

// Minimal P6 parser: header tokens separated by whitespace, maxval 255.
inline PpmImage parse_ppm(const std::string& bytes) {
  PpmImage img;
  std::size_t pos = 0;
  auto token = [&] {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw std::runtime_error("not a P6 file");
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  if (token() != "255") throw std::runtime_error("unsupported maxval");
  ++pos;  // single whitespace before the raster
  if (bytes.size() - pos != img.width * img.height * 3) throw std::runtime_error("raster size mismatch");
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("dbfusion-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace dbf::testing
