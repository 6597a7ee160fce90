#pragma once

#include <cstddef>
#include <vector>

#include "dbfusion/tensor.hpp"

namespace dbf {

struct PcaResult {
  Tensor components;               // k x d, orthonormal rows
  Tensor scores;                   // n x k, centered(x) * components^T
  std::vector<double> eigenvalues; // nonincreasing
  Tensor mean;                     // d
};

inline constexpr double kPcaTolerance = 1e-9;
inline constexpr int kPcaMaxIterations = 1000;

// Principal components of the rows of x via power iteration with Hotelling
// deflation on the sample covariance (divided by n-1). Each component is
// sign-fixed so its largest-magnitude entry is positive.
PcaResult pca_fit(const Tensor& x, std::size_t k);

}  // namespace dbf
