#include "dbfusion/pca.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace dbf {

namespace {

void fix_sign(std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  if (v[best] < 0)
    for (auto& e : v) e = -e;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double e : v) s += e * e;
  return std::sqrt(s);
}

void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    double dot = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * b[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
  }
}

// A unit vector orthogonal to `basis`, chosen deterministically from the
// standard basis. Used when the deflated covariance has vanished.
std::vector<double> complete_basis(std::size_t d, const std::vector<std::vector<double>>& basis) {
  std::vector<double> best;
  double best_norm = -1.0;
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> e(d, 0.0);
    e[i] = 1.0;
    orthogonalize(e, basis);
    orthogonalize(e, basis);
    const double n = norm(e);
    if (n > best_norm + 1e-12) {
      best_norm = n;
      best = e;
    }
  }
  for (auto& x : best) x /= best_norm;
  return best;
}

}  // namespace

PcaResult pca_fit(const Tensor& x, std::size_t k) {
  if (x.rank() != 2) throw DimensionError("pca_fit: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n < 2) throw ArgumentError("pca_fit: need at least 2 rows");
  if (k == 0 || k > std::min(n, d)) {
    throw ArgumentError("pca_fit: k=" + std::to_string(k) + " out of range [1," + std::to_string(std::min(n, d)) + "]");
  }

  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x.at(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> xc(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) xc[i * d + j] = x.at(i, j) - mean[j];

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double va = xc[i * d + a];
      if (va == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += va * xc[i * d + b];
    }
  for (auto& c : cov) c /= static_cast<double>(n - 1);

  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
  const double vanish = 1e-13 * std::max(trace, 1e-300);

  std::mt19937_64 rng(0x5eedULL);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  std::vector<std::vector<double>> comps;
  std::vector<double> eig;
  std::vector<double> w(d);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> v(d);
    for (auto& e : v) e = 1.0 + 0.5 * uni(rng);
    orthogonalize(v, comps);
    double nv = norm(v);
    if (nv < 1e-12) {
      v = complete_basis(d, comps);
    } else {
      for (auto& e : v) e /= nv;
    }
    fix_sign(v);

    bool converged = false;
    for (int it = 0; it < kPcaMaxIterations; ++it) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
        w[a] = s;
      }
      orthogonalize(w, comps);
      const double nw = norm(w);
      if (nw <= vanish) {
        // Remaining spectrum is numerically zero: any orthonormal completion is valid.
        if (trace <= 0.0 || norm(v) == 0.0) v = complete_basis(d, comps);
        converged = true;
        break;
      }
      for (auto& e : w) e /= nw;
      fix_sign(w);
      double delta = 0.0;
      for (std::size_t a = 0; a < d; ++a) delta = std::max(delta, std::abs(w[a] - v[a]));
      v = w;
      if (delta < kPcaTolerance) {
        converged = true;
        break;
      }
    }
    if (!converged) {
      throw NumericError("pca_fit: power iteration did not converge for component " + std::to_string(c) +
                         " within " + std::to_string(kPcaMaxIterations) + " iterations");
    }
    double rq = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
      rq += v[a] * s;
    }
    const double lambda = std::max(rq, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
    comps.push_back(v);
    eig.push_back(lambda);
  }

  // Deflation can leave tiny ordering inversions among near-equal eigenvalues.
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return eig[a] > eig[b]; });

  std::vector<double> comp_data(k * d), score_data(n * k), eig_sorted(k);
  for (std::size_t r = 0; r < k; ++r) {
    const auto& v = comps[order[r]];
    eig_sorted[r] = eig[order[r]];
    std::copy(v.begin(), v.end(), comp_data.begin() + r * d);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += xc[i * d + j] * v[j];
      score_data[i * k + r] = s;
    }
  }
  return PcaResult{Tensor({k, d}, std::move(comp_data)), Tensor({n, k}, std::move(score_data)),
                   std::move(eig_sorted), Tensor({d}, std::move(mean))};
}

}  // namespace dbf
