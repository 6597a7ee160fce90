#pragma once

// PCA colouring of patch features: the first component separates foreground
// from background, and the first three components become RGB.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dbfusion/pca.hpp"

namespace dbf {

struct PatchVisualization {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::optional<std::array<double, 3>>> cells;  // row-major; nullopt = background
  std::string task;
  double threshold = 0.0;
  std::vector<double> eigenvalues;

  std::size_t foreground_count() const;
  bool is_foreground(std::size_t r, std::size_t c) const { return cells[r * cols + c].has_value(); }
};

struct Split {
  double threshold = 0.0;
  std::vector<bool> foreground;
};

// 1-D 2-means on `scores`; the threshold is the midpoint of the two means and
// the side whose mean has the larger magnitude is foreground.
Split two_means_split(const std::vector<double>& scores);

PatchVisualization visualize_feature(const Tensor& feature, std::size_t grid_rows, std::size_t grid_cols,
                                     const std::string& task = "");

// Binary P6; each cell becomes scale x scale pixels, background black.
std::string encode_ppm(const PatchVisualization& viz, std::size_t scale);
void render_ppm(const PatchVisualization& viz, std::size_t scale, const std::filesystem::path& path);

nlohmann::ordered_json viz_sidecar(const PatchVisualization& viz);

// Largest per-cell Euclidean colour distance; background counts as black.
double max_cell_distance(const PatchVisualization& a, const PatchVisualization& b);

}  // namespace dbf
