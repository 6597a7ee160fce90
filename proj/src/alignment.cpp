#include "dbfusion/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "dbfusion/tensor_io.hpp"
#include "dbfusion/training.hpp"

namespace dbf {

void FeaturePairSet::validate() const {
  if (vision.size() != text.size()) {
    throw ArgumentError("feature pairs: " + std::to_string(vision.size()) + " vision records vs " +
                        std::to_string(text.size()) + " text records");
  }
  if (vision.empty()) throw ArgumentError("feature pairs: empty set");
  const std::size_t dv = vision_width(), dt = text_width();
  for (std::size_t i = 0; i < vision.size(); ++i) {
    if (vision[i].rank() != 2 || vision[i].dim(1) != dv || vision[i].dim(0) == 0) {
      throw DimensionError("feature pairs: vision record " + std::to_string(i) + " has shape " +
                           shape_str(vision[i].shape()) + ", expected r x " + std::to_string(dv));
    }
    if (text[i].rank() != 2 || text[i].dim(1) != dt || text[i].dim(0) == 0) {
      throw DimensionError("feature pairs: text record " + std::to_string(i) + " has shape " +
                           shape_str(text[i].shape()) + ", expected s x " + std::to_string(dt));
    }
  }
}

Parameter make_projection(std::size_t vision_width, std::size_t text_width, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double sd = 1.0 / std::sqrt(static_cast<double>(vision_width));
  std::vector<double> w(vision_width * text_width);
  for (auto& v : w) v = rng.normal(sd);
  return {"alignment.projection", "alignment", Tensor({vision_width, text_width}, std::move(w), true)};
}

namespace {

Tensor pooled_row(const Tensor& x) { return reshape(mean_pool(x, 0), {1, x.dim(1)}); }

Tensor normalize_records(const Tensor& rows, const char* side) {
  try {
    return l2_normalize(rows);
  } catch (const DegenerateInputError& e) {
    // l2_normalize names the row; rows are records here.
    std::string msg = e.what();
    const auto at = msg.find("row ");
    std::string idx = at == std::string::npos ? "?" : msg.substr(at + 4, msg.find(' ', at + 4) - at - 4);
    throw DegenerateInputError(std::string(side) + " record " + idx + ": pooled feature has zero norm");
  }
}

// N x d' matrix of mean-pooled vision records.
Tensor pooled_vision(const FeaturePairSet& pairs) {
  NoGradGuard ng;
  std::vector<Tensor> rows;
  rows.reserve(pairs.size());
  for (const auto& v : pairs.vision) rows.push_back(pooled_row(v));
  return concat(rows, 0);
}

Tensor normalized_text(const FeaturePairSet& pairs) {
  NoGradGuard ng;
  std::vector<Tensor> rows;
  rows.reserve(pairs.size());
  for (const auto& t : pairs.text) rows.push_back(pooled_row(t));
  return normalize_records(concat(rows, 0), "text");
}

}  // namespace

std::pair<Tensor, Tensor> pool_normalize_stack(const FeaturePairSet& pairs, const Tensor& projection) {
  pairs.validate();
  if (projection.rank() != 2 || projection.dim(0) != pairs.vision_width() || projection.dim(1) != pairs.text_width()) {
    throw DimensionError("projection shape " + shape_str(projection.shape()) + " does not map " +
                         std::to_string(pairs.vision_width()) + " -> " + std::to_string(pairs.text_width()));
  }
  std::vector<Tensor> rows;
  rows.reserve(pairs.size());
  for (const auto& v : pairs.vision) rows.push_back(pooled_row(matmul(v, projection)));
  return {normalize_records(concat(rows, 0), "vision"), normalized_text(pairs)};
}

Tensor alignment_loss(const Tensor& vision_rows, const Tensor& text_rows) {
  if (vision_rows.rank() != 2 || text_rows.rank() != 2 || vision_rows.shape() != text_rows.shape()) {
    throw DimensionError("alignment_loss: F_v " + shape_str(vision_rows.shape()) + " vs F_t " +
                         shape_str(text_rows.shape()));
  }
  const std::size_t n = vision_rows.dim(0);
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return softmax_cross_entropy_rows(matmul(vision_rows, transpose(text_rows)), Tensor({n, n}, std::move(eye)));
}

AlignmentReport optimize_projection(const FeaturePairSet& pairs, const AlignmentOptions& opts, std::uint64_t seed,
                                    const std::string& label) {
  if (opts.steps < 1) throw ArgumentError("optimize_projection: steps must be at least 1");
  pairs.validate();
  AlignmentReport report;
  report.label = label;
  report.seed = seed;
  report.n = pairs.size();
  report.vision_width = pairs.vision_width();
  report.text_width = pairs.text_width();

  // mean(f P) == mean(f) P, so pooling happens once up front.
  const Tensor pooled = pooled_vision(pairs);
  const Tensor text_rows = normalized_text(pairs);
  Parameter proj = make_projection(report.vision_width, report.text_width, seed);
  std::vector<Parameter*> params{&proj};
  Adam adam;
  report.curve.reserve(opts.steps);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    proj.tensor.zero_grad();
    double value = 0.0;
    try {
      Tensor loss = alignment_loss(normalize_records(matmul(pooled, proj.tensor), "vision"), text_rows);
      value = loss.item();
      backward(loss);
    } catch (const NumericError& e) {
      throw TrainingError("alignment optimization diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(value)) {
      throw TrainingError("alignment optimization diverged at step " + std::to_string(step) + ": loss is not finite");
    }
    report.curve.push_back({step, value});
    adam.step(params, opts.lr);
  }
  report.final_loss = report.curve.back().loss;
  return report;
}

AblationConfig full_config() { return {"full", {kCanonicalOrder.begin(), kCanonicalOrder.end()}}; }

AblationConfig depth_only_config() { return {"depth-only", {FeatureKey::Depth}}; }

AblationConfig minus_config(FeatureKey removed) {
  AblationConfig c;
  c.label = "minus-" + std::string(feature_key_name(removed));
  for (FeatureKey k : kCanonicalOrder)
    if (k != removed) c.features.push_back(k);
  return c;
}

Tensor text_features(const MultimodalModel& model, const std::string& caption) {
  NoGradGuard ng;
  const TokenSequence seq = tokenize(caption);
  if (seq.size() < 3) throw ArgumentError("text_features: empty caption");
  const Tensor h = model.lm().hidden_states(nullptr, seq);
  return slice(h, 0, 1, seq.size() - 1).detach();
}

ExtractedCorpus extract_corpus(const MultimodalModel& model, const std::vector<DatasetRecord>& records) {
  NoGradGuard ng;
  ExtractedCorpus out;
  out.bundles.reserve(records.size());
  out.text.reserve(records.size());
  for (const auto& r : records) {
    out.bundles.push_back(model.full_bundle(r.image));
    out.text.push_back(text_features(model, r.caption.caption));
  }
  return out;
}

FeaturePairSet build_pairs(const ExtractedCorpus& corpus, const AblationConfig& config) {
  if (config.features.empty()) throw ArgumentError("ablation config '" + config.label + "': feature mask is empty");
  NoGradGuard ng;
  FeaturePairSet pairs;
  pairs.mask = format_feature_mask(config.features);
  pairs.vision.reserve(corpus.bundles.size());
  for (const auto& b : corpus.bundles) pairs.vision.push_back(fuse(b.masked(config.features), config.strategy).tokens);
  pairs.text = corpus.text;
  return pairs;
}

std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DBFUSION_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("DBFUSION_THREADS: expected a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return n;
}

std::vector<AlignmentReport> compare_configs(const ExtractedCorpus& corpus, const std::vector<AblationConfig>& configs,
                                             const AlignmentOptions& opts, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ArgumentError("compare_configs: no seeds");
  std::vector<FeaturePairSet> pair_sets;
  pair_sets.reserve(configs.size());
  for (const auto& c : configs) pair_sets.push_back(build_pairs(corpus, c));

  const std::size_t jobs = configs.size() * seeds.size();
  std::vector<AlignmentReport> reports(jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t j;
      {
        std::lock_guard lock(mu);
        if (next >= jobs) return;
        j = next++;
      }
      const std::size_t ci = j / seeds.size(), si = j % seeds.size();
      try {
        reports[j] = optimize_projection(pair_sets[ci], opts, seeds[si], configs[ci].label);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t nthreads = std::min(worker_count(), jobs);
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return reports;
}

std::vector<AlignmentReport> compare_configs(const MultimodalModel& model, const std::vector<DatasetRecord>& records,
                                             const std::vector<AblationConfig>& configs, const AlignmentOptions& opts,
                                             const std::vector<std::uint64_t>& seeds) {
  return compare_configs(extract_corpus(model, records), configs, opts, seeds);
}

std::vector<LabelSummary> summarize(const std::vector<AlignmentReport>& reports) {
  std::vector<LabelSummary> out;
  for (const auto& r : reports) {
    auto it = std::find_if(out.begin(), out.end(), [&](const LabelSummary& s) { return s.label == r.label; });
    if (it == out.end()) {
      out.push_back({r.label, 0.0, 0.0, {}});
      it = std::prev(out.end());
    }
    it->finals.push_back(r.final_loss);
  }
  for (auto& s : out) {
    double m = 0.0;
    for (double f : s.finals) m += f;
    m /= static_cast<double>(s.finals.size());
    double v = 0.0;
    for (double f : s.finals) v += (f - m) * (f - m);
    s.mean = m;
    s.stddev = std::sqrt(v / static_cast<double>(s.finals.size()));
  }
  return out;
}

const LabelSummary& summary_for(const std::vector<LabelSummary>& s, const std::string& label) {
  for (const auto& x : s)
    if (x.label == label) return x;
  throw ArgumentError("no summary for label '" + label + "'");
}

void write_report_csv(const std::filesystem::path& path, const std::vector<AlignmentReport>& reports) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "label,seed,step,loss\n" << std::setprecision(17);
  for (const auto& r : reports)
    for (const auto& p : r.curve) os << r.label << ',' << r.seed << ',' << p.step << ',' << p.loss << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

nlohmann::ordered_json summary_json(const std::vector<AlignmentReport>& reports) {
  nlohmann::ordered_json labels = nlohmann::ordered_json::object();
  for (const auto& s : summarize(reports)) {
    labels[s.label] = {{"mean_final_loss", s.mean}, {"std_final_loss", s.stddev}, {"final_losses", s.finals}};
  }
  nlohmann::ordered_json j;
  j["labels"] = labels;
  if (!reports.empty()) {
    j["n"] = reports.front().n;
    j["text_width"] = reports.front().text_width;
    j["steps"] = reports.front().curve.size();
  }
  return j;
}

void write_summary_json(const std::filesystem::path& path, const std::vector<AlignmentReport>& reports) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << summary_json(reports).dump(2) << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

FeaturePairSet load_feature_pairs(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("feature pair directory not found: " + dir.string());
  FeaturePairSet pairs;
  pairs.encoder = "external";
  for (std::size_t n = 0;; ++n) {
    const fs::path v = dir / (std::to_string(n) + ".vision.dbft");
    const fs::path t = dir / (std::to_string(n) + ".text.dbft");
    const bool hv = fs::exists(v), ht = fs::exists(t);
    if (!hv && !ht) break;
    if (hv != ht) throw IoError("feature pair " + std::to_string(n) + " is missing its " + (hv ? "text" : "vision") + " half");
    pairs.vision.push_back(load_tensor(v));
    pairs.text.push_back(load_tensor(t));
  }
  pairs.validate();
  return pairs;
}

void save_feature_pairs(const std::filesystem::path& dir, const FeaturePairSet& pairs) {
  pairs.validate();
  std::filesystem::create_directories(dir);
  for (std::size_t n = 0; n < pairs.size(); ++n) {
    save_tensor(dir / (std::to_string(n) + ".vision.dbft"), pairs.vision[n]);
    save_tensor(dir / (std::to_string(n) + ".text.dbft"), pairs.text[n]);
  }
}

}  // namespace dbf
