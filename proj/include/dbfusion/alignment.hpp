#pragma once

// Cross-modal alignment metric: a trainable projection maps pooled vision
// features onto frozen text features, and the cross-entropy of the row-wise
// softmax over their cosine-similarity matrix (identity target) measures how
// well the two modalities line up.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dbfusion/fusion.hpp"
#include "dbfusion/model.hpp"
#include "dbfusion/synth_data.hpp"

namespace dbf {

struct FeaturePairSet {
  std::vector<Tensor> vision;  // r_n x d'
  std::vector<Tensor> text;    // s_n x d
  std::string encoder = "dbfusion";
  std::string mask;

  std::size_t size() const { return vision.size(); }
  std::size_t vision_width() const { return vision.empty() ? 0 : vision.front().dim(1); }
  std::size_t text_width() const { return text.empty() ? 0 : text.front().dim(1); }
  void validate() const;  // DimensionError / ArgumentError
};

// d' x d projection with N(0, 1/d') entries.
Parameter make_projection(std::size_t vision_width, std::size_t text_width, std::uint64_t seed);

// Per record: project vision rows by P, mean-pool, L2-normalize; text rows are
// mean-pooled and L2-normalized. Rows stack in record order.
std::pair<Tensor, Tensor> pool_normalize_stack(const FeaturePairSet& pairs, const Tensor& projection);

// Mean over rows of -log softmax(F_v F_t^T)_{ii}.
Tensor alignment_loss(const Tensor& vision_rows, const Tensor& text_rows);

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct AlignmentReport {
  std::string label;
  std::uint64_t seed = 0;
  std::vector<CurvePoint> curve;
  double final_loss = 0.0;
  std::size_t n = 0;
  std::size_t vision_width = 0;
  std::size_t text_width = 0;

  double initial_loss() const { return curve.empty() ? 0.0 : curve.front().loss; }
};

struct AlignmentOptions {
  std::size_t steps = 500;
  double lr = 1e-3;
};

// Adam on P alone. Curve entry s is the loss before update s.
AlignmentReport optimize_projection(const FeaturePairSet& pairs, const AlignmentOptions& opts, std::uint64_t seed,
                                    const std::string& label = "");

struct AblationConfig {
  std::string label;
  std::vector<FeatureKey> features;
  FusionStrategy strategy = FusionStrategy::ChannelIntegration;
};

// "full", "depth-only", "minus-<feature>" in that shape.
AblationConfig full_config();
AblationConfig depth_only_config();
AblationConfig minus_config(FeatureKey removed);

// Text features: final LM hidden states over the caption bytes (bos and eos
// excluded), with no vision prefix.
Tensor text_features(const MultimodalModel& model, const std::string& caption);

// Vision and text features of every record under the model's frozen weights.
struct ExtractedCorpus {
  std::vector<FeatureBundle> bundles;  // all four features
  std::vector<Tensor> text;
};
ExtractedCorpus extract_corpus(const MultimodalModel& model, const std::vector<DatasetRecord>& records);

FeaturePairSet build_pairs(const ExtractedCorpus& corpus, const AblationConfig& config);

// Worker cap from DBFUSION_THREADS, else hardware concurrency (at least 1).
std::size_t worker_count();

// One report per (config, seed), ordered by config then seed.
std::vector<AlignmentReport> compare_configs(const ExtractedCorpus& corpus, const std::vector<AblationConfig>& configs,
                                             const AlignmentOptions& opts, const std::vector<std::uint64_t>& seeds);
std::vector<AlignmentReport> compare_configs(const MultimodalModel& model, const std::vector<DatasetRecord>& records,
                                             const std::vector<AblationConfig>& configs, const AlignmentOptions& opts,
                                             const std::vector<std::uint64_t>& seeds);

struct LabelSummary {
  std::string label;
  double mean = 0.0;
  double stddev = 0.0;  // population std over seeds
  std::vector<double> finals;
};

// Labels in first-appearance order.
std::vector<LabelSummary> summarize(const std::vector<AlignmentReport>& reports);
const LabelSummary& summary_for(const std::vector<LabelSummary>& s, const std::string& label);

void write_report_csv(const std::filesystem::path& path, const std::vector<AlignmentReport>& reports);
nlohmann::ordered_json summary_json(const std::vector<AlignmentReport>& reports);
void write_summary_json(const std::filesystem::path& path, const std::vector<AlignmentReport>& reports);

// Reads <dir>/<n>.vision.dbft and <dir>/<n>.text.dbft for n = 0, 1, ... until
// the first missing index.
FeaturePairSet load_feature_pairs(const std::filesystem::path& dir);
void save_feature_pairs(const std::filesystem::path& dir, const FeaturePairSet& pairs);

}  // namespace dbf
