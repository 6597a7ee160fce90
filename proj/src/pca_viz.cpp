#include "dbfusion/pca_viz.hpp"

#include <algorithm>
#include <cmath>

#include "dbfusion/hash.hpp"

namespace dbf {

std::size_t PatchVisualization::foreground_count() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
}

Split two_means_split(const std::vector<double>& scores) {
  if (scores.size() < 2) throw DegenerateOutputError("two_means_split: need at least two scores");
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw DegenerateOutputError("two_means_split: scores have zero spread");

  std::vector<bool> upper(scores.size());
  for (int iter = 0; iter < 1000; ++iter) {
    const double mid = 0.5 * (lo + hi);
    double sl = 0.0, sh = 0.0;
    std::size_t nl = 0, nh = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      upper[i] = scores[i] > mid;
      if (upper[i]) {
        sh += scores[i];
        ++nh;
      } else {
        sl += scores[i];
        ++nl;
      }
    }
    const double nlo = sl / static_cast<double>(nl), nhi = sh / static_cast<double>(nh);
    if (nlo == lo && nhi == hi) break;
    lo = nlo;
    hi = nhi;
  }
  Split out;
  out.threshold = 0.5 * (lo + hi);
  const bool fg_upper = std::abs(hi) >= std::abs(lo);
  out.foreground.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out.foreground[i] = (scores[i] > out.threshold) == fg_upper;
  return out;
}

PatchVisualization visualize_feature(const Tensor& feature, std::size_t grid_rows, std::size_t grid_cols,
                                     const std::string& task) {
  if (feature.rank() != 2) throw DimensionError("visualize_feature: expected N_v x D, got " + shape_str(feature.shape()));
  const std::size_t n = feature.dim(0);
  if (n != grid_rows * grid_cols) {
    throw DimensionError("visualize_feature: " + std::to_string(n) + " rows do not fill a " +
                         std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
  }
  if (n < 4) throw ArgumentError("visualize_feature: need at least 4 patches");

  PcaResult pca = pca_fit(feature.detach(), 3);
  if (!(pca.eigenvalues[0] > 0.0)) throw DegenerateOutputError("visualize_feature: feature rows are identical");
  std::vector<double> first(n);
  for (std::size_t i = 0; i < n; ++i) first[i] = pca.scores.at(i, 0);
  const Split split = two_means_split(first);

  PatchVisualization viz;
  viz.rows = grid_rows;
  viz.cols = grid_cols;
  viz.task = task;
  viz.threshold = split.threshold;
  viz.eigenvalues = pca.eigenvalues;
  viz.cells.assign(n, std::nullopt);

  std::array<double, 3> lo{}, hi{};
  lo.fill(INFINITY);
  hi.fill(-INFINITY);
  std::size_t fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!split.foreground[i]) continue;
    ++fg;
    for (std::size_t c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], pca.scores.at(i, c));
      hi[c] = std::max(hi[c], pca.scores.at(i, c));
    }
  }
  if (fg == 0) throw DegenerateOutputError("visualize_feature: every patch classified as background");
  for (std::size_t i = 0; i < n; ++i) {
    if (!split.foreground[i]) continue;
    std::array<double, 3> rgb{};
    for (std::size_t c = 0; c < 3; ++c) {
      const double span = hi[c] - lo[c];
      rgb[c] = span > 0.0 ? (pca.scores.at(i, c) - lo[c]) / span : 0.5;
    }
    viz.cells[i] = rgb;
  }
  return viz;
}

namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::string encode_ppm(const PatchVisualization& viz, std::size_t scale) {
  if (scale < 1) throw ArgumentError("render_ppm: scale must be at least 1");
  const std::size_t w = viz.cols * scale, h = viz.rows * scale;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + w * h * 3, '\0');
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto& cell = viz.cells[(y / scale) * viz.cols + x / scale];
      if (!cell) continue;
      char* px = out.data() + header + (y * w + x) * 3;
      for (std::size_t c = 0; c < 3; ++c) px[c] = static_cast<char>(to_byte((*cell)[c]));
    }
  }
  return out;
}

void render_ppm(const PatchVisualization& viz, std::size_t scale, const std::filesystem::path& path) {
  write_file_bytes(path, encode_ppm(viz, scale));
}

nlohmann::ordered_json viz_sidecar(const PatchVisualization& viz) {
  nlohmann::ordered_json j;
  j["task"] = viz.task;
  j["grid"] = {viz.rows, viz.cols};
  j["threshold"] = viz.threshold;
  j["eigenvalues"] = viz.eigenvalues;
  j["foreground_count"] = viz.foreground_count();
  return j;
}

double max_cell_distance(const PatchVisualization& a, const PatchVisualization& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("max_cell_distance: grids differ");
  double best = 0.0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const std::array<double, 3> ca = a.cells[i].value_or(std::array<double, 3>{});
    const std::array<double, 3> cb = b.cells[i].value_or(std::array<double, 3>{});
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += (ca[c] - cb[c]) * (ca[c] - cb[c]);
    best = std::max(best, std::sqrt(s));
  }
  return best;
}

}  // namespace dbf
