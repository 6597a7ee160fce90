#include "dbfusion/cli.hpp"

#include <filesystem>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"

#include "dbfusion/checkpoint.hpp"
#include "dbfusion/hash.hpp"
#include "dbfusion/pca_viz.hpp"

namespace dbf::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError((where.empty() ? "" : where + ".") + key + ": unknown key");
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError((where.empty() ? "" : where + ".") + key + ": wrong type");
  }
}

template <typename F>
auto as_config_error(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what());
  } catch (const json::exception&) {
    throw ConfigError(key + ": wrong type");
  }
}

ShapeMix parse_mix(const json& j) {
  ShapeMix mix;
  std::vector<double> w;
  if (j.is_string()) {
    std::stringstream ss(j.get<std::string>());
    std::string part;
    while (std::getline(ss, part, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(part, &used);
      } catch (const std::exception&) {
        throw ConfigError("gen.mix: '" + part + "' is not a number");
      }
      if (used != part.size()) throw ConfigError("gen.mix: '" + part + "' is not a number");
      w.push_back(v);
    }
  } else {
    w = j.get<std::vector<double>>();
  }
  if (w.size() != 3) throw ConfigError("gen.mix: expected three weights (square,circle,triangle)");
  std::copy(w.begin(), w.end(), mix.weights.begin());
  as_config_error("gen.mix", [&] { mix.validate(); });
  return mix;
}

std::string mix_string(const ShapeMix& mix) {
  std::ostringstream os;
  os << std::setprecision(17) << mix.weights[0] << ',' << mix.weights[1] << ',' << mix.weights[2];
  return os.str();
}

void require_positive(std::size_t v, const std::string& key) {
  if (v == 0) throw ConfigError(key + ": must be at least 1");
}

}  // namespace

RunConfig validate_config(const json& raw) {
  reject_unknown(raw, {"command", "seed", "data", "data_sha256", "out", "checkpoint", "pairs", "model", "stage", "gen",
                       "align", "viz"},
                 "");
  RunConfig c;
  read_key(raw, "command", c.command, "");
  static const std::set<std::string> commands{"gen-data", "pretrain", "finetune", "align", "ablate", "viz"};
  if (!commands.count(c.command)) throw ConfigError("command: unknown subcommand '" + c.command + "'");
  read_key(raw, "seed", c.seed, "");
  read_key(raw, "data", c.data, "");
  read_key(raw, "data_sha256", c.data_sha256, "");
  read_key(raw, "out", c.out, "");
  read_key(raw, "checkpoint", c.checkpoint, "");
  read_key(raw, "pairs", c.pairs, "");

  if (raw.contains("model")) {
    as_config_error("model", [&] { from_json(raw.at("model"), c.model); });
    const json& m = raw.at("model");
    if (m.contains("strategy")) c.expect_strategy = c.model.strategy;
    if (m.contains("features")) c.expect_features = c.model.features;
  }
  c.model.seed = c.seed;
  if (c.command == "pretrain") c.model.validate();

  c.stage = c.command == "finetune" ? StageSpec::finetune_defaults() : StageSpec::pretrain_defaults();
  c.stage.seed = c.seed;
  if (raw.contains("stage")) {
    const json& s = raw.at("stage");
    reject_unknown(s, {"steps", "batch", "lr_max", "lr_min", "max_pairs"}, "stage");
    read_key(s, "steps", c.stage.steps, "stage");
    read_key(s, "batch", c.stage.batch, "stage");
    read_key(s, "lr_max", c.stage.lr_max, "stage");
    read_key(s, "lr_min", c.stage.lr_min, "stage");
    read_key(s, "max_pairs", c.max_pairs, "stage");
  }
  as_config_error("stage", [&] { c.stage.validate(); });

  if (raw.contains("gen")) {
    const json& g = raw.at("gen");
    reject_unknown(g, {"n", "mix", "image_size"}, "gen");
    read_key(g, "n", c.n, "gen");
    read_key(g, "image_size", c.model.encoder.image_size, "gen");
    if (g.contains("mix")) c.mix = as_config_error("gen.mix", [&] { return parse_mix(g.at("mix")); });
  }
  if (c.command == "gen-data") {
    require_positive(c.n, "gen.n");
    if (c.model.encoder.image_size < 16) throw ConfigError("gen.image_size: must be at least 16");
  }

  if (raw.contains("align")) {
    const json& a = raw.at("align");
    reject_unknown(a, {"steps", "lr", "seeds", "records", "subset", "features", "strategy", "remove", "depth_only"},
                   "align");
    read_key(a, "steps", c.align.steps, "align");
    read_key(a, "lr", c.align.lr, "align");
    read_key(a, "seeds", c.seeds, "align");
    read_key(a, "records", c.records, "align");
    read_key(a, "subset", c.subset, "align");
    read_key(a, "depth_only", c.depth_only, "align");
    if (a.contains("features")) {
      c.align_features =
          as_config_error("align.features", [&] { return parse_feature_mask(a.at("features").get<std::string>()); });
    }
    if (a.contains("strategy")) {
      c.align_strategy =
          as_config_error("align.strategy", [&] { return strategy_from_name(a.at("strategy").get<std::string>()); });
    }
    if (a.contains("remove")) {
      const std::string r = a.at("remove").is_string() ? a.at("remove").get<std::string>() : "";
      if (!r.empty()) c.remove = as_config_error("align.remove", [&] { return parse_feature_mask(r); });
    }
  }
  if (c.command == "align" || c.command == "ablate") {
    require_positive(c.align.steps, "align.steps");
    require_positive(c.seeds, "align.seeds");
    require_positive(c.records, "align.records");
    if (!(c.align.lr > 0.0)) throw ConfigError("align.lr: must be positive");
    if (c.subset != "all" && c.subset != kTagTextHeavy && c.subset != kTagMultiObject) {
      throw ConfigError("align.subset: expected all, text-heavy or multi-object");
    }
    if (c.command == "ablate") {
      if (c.remove.empty() && !c.depth_only) throw ConfigError("align.remove: nothing to ablate");
      if (c.remove.size() >= kCanonicalOrder.size()) throw ConfigError("align.remove: cannot remove every feature");
    }
  }

  if (raw.contains("viz")) {
    const json& v = raw.at("viz");
    reject_unknown(v, {"records", "scale"}, "viz");
    read_key(v, "records", c.viz_records, "viz");
    read_key(v, "scale", c.scale, "viz");
  }
  if (c.command == "viz") {
    require_positive(c.viz_records, "viz.records");
    require_positive(c.scale, "viz.scale");
  }

  if (c.out.empty()) {
    if (c.command == "ablate") c.out = "ablation";
    else throw ConfigError("out: output directory is required");
  }
  if ((c.command == "pretrain" || c.command == "finetune") && c.data.empty()) {
    throw ConfigError("data: dataset path is required for " + c.command);
  }
  if (c.command == "finetune" && c.checkpoint.empty()) throw ConfigError("checkpoint: stage-1 checkpoint is required");
  return c;
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["command"] = c.command;
  j["seed"] = c.seed;
  if (c.command != "gen-data") {
    j["data"] = c.data;
    j["data_sha256"] = c.data_sha256;
  }
  j["out"] = c.out;
  if (c.command == "gen-data") {
    j["gen"] = {{"n", c.n}, {"mix", mix_string(c.mix)}, {"image_size", c.model.encoder.image_size}};
  }
  if (c.command == "finetune" || c.command == "align" || c.command == "ablate" || c.command == "viz") {
    j["checkpoint"] = c.checkpoint;
  }
  if (c.command == "pretrain" || c.command == "finetune") {
    j["model"] = ordered_json::parse(to_json(c.model).dump());
    ordered_json s = {{"steps", c.stage.steps}, {"batch", c.stage.batch}, {"lr_max", c.stage.lr_max},
                      {"lr_min", c.stage.lr_min}};
    if (c.command == "finetune") s["max_pairs"] = c.max_pairs;
    j["stage"] = s;
  }
  if (c.command == "align" || c.command == "ablate") {
    ordered_json a = {{"steps", c.align.steps},     {"lr", c.align.lr},       {"seeds", c.seeds},
                      {"records", c.records},       {"subset", c.subset},
                      {"strategy", strategy_name(c.align_strategy)}};
    if (c.command == "align") {
      a["features"] = format_feature_mask(c.align_features);
      j["pairs"] = c.pairs;
    } else {
      a["remove"] = c.remove.empty() ? std::string() : format_feature_mask(c.remove);
      a["depth_only"] = c.depth_only;
    }
    j["align"] = a;
  }
  if (c.command == "viz") j["viz"] = {{"records", c.viz_records}, {"scale", c.scale}};
  return j;
}

namespace {

void write_config(const RunConfig& c) {
  fs::create_directories(c.out);
  std::ofstream os(fs::path(c.out) / "config.json", std::ios::binary);
  if (!os) throw IoError("cannot write " + (fs::path(c.out) / "config.json").string());
  os << to_json(c).dump(2) << '\n';
}

// Hashes the manifest and checks it against a pinned hash from the config.
fs::path checked_manifest(RunConfig& c) {
  const fs::path manifest = resolve_manifest(c.data);
  const std::string h = sha256_file(manifest);
  if (!c.data_sha256.empty() && c.data_sha256 != h) {
    throw ConfigError("data_sha256: manifest " + manifest.string() + " hashes to " + h + ", config pins " +
                      c.data_sha256);
  }
  c.data_sha256 = h;
  return manifest;
}

fs::path resolve_checkpoint(const std::string& p) {
  const fs::path path(p);
  if (!fs::is_directory(path)) return path;
  for (const char* name : {"stage2.dbft", "stage1.dbft"}) {
    const fs::path cand = path / "checkpoints" / name;
    if (fs::exists(cand)) return cand;
  }
  throw IoError("no checkpoint found under " + path.string());
}

void check_against(const RunConfig& c, const ModelConfig& ckpt) {
  if (c.expect_strategy && *c.expect_strategy != ckpt.strategy) {
    throw ConfigError("model.strategy: " + std::string(strategy_name(*c.expect_strategy)) +
                      " does not match the checkpoint's projector, built for " +
                      std::string(strategy_name(ckpt.strategy)) + " (input width " +
                      std::to_string(fused_width(ckpt.strategy, ckpt.features.size(), ckpt.encoder.width)) + ")");
  }
  if (c.expect_features && *c.expect_features != ckpt.features) {
    throw ConfigError("model.features: " + format_feature_mask(*c.expect_features) +
                      " does not match the checkpoint's " + format_feature_mask(ckpt.features));
  }
}

struct Loaded {
  std::unique_ptr<MultimodalModel> model;
  std::vector<DatasetRecord> records;
};

std::unique_ptr<MultimodalModel> model_for(RunConfig& c) {
  if (c.checkpoint.empty()) {
    ModelConfig mc;
    mc.seed = c.seed;
    c.model = mc;
    return std::make_unique<MultimodalModel>(mc);
  }
  const fs::path path = resolve_checkpoint(c.checkpoint);
  c.checkpoint = path.string();
  const Checkpoint ck = read_checkpoint(path);
  const ModelConfig mc = ck.model_config();
  check_against(c, mc);
  auto model = std::make_unique<MultimodalModel>(mc);
  apply_checkpoint(*model, ck);
  c.model = mc;
  return model;
}

std::vector<DatasetRecord> records_for(RunConfig& c, std::size_t limit, const std::string& subset,
                                       std::size_t min_count = 2) {
  std::vector<DatasetRecord> all;
  if (c.data.empty()) {
    // In-memory corpus; oversample so a tag filter still leaves `limit` records.
    const std::size_t n = subset == "all" ? limit : 4 * limit;
    all = generate_records(n, c.seed, ShapeMix{}, static_cast<int>(c.model.encoder.image_size));
  } else {
    all = load_dataset(checked_manifest(c)).records;
  }
  std::vector<DatasetRecord> out;
  for (auto& r : all) {
    if (out.size() >= limit) break;
    if (subset == "all" || r.has_tag(subset)) out.push_back(std::move(r));
  }
  if (out.size() < min_count)
    throw ArgumentError("only " + std::to_string(out.size()) + " records match subset '" + subset + "', need " +
                        std::to_string(min_count));
  return out;
}

class LossLog {
 public:
  LossLog(const fs::path& path, std::ostream& progress, std::size_t total)
      : os_(path, std::ios::binary), progress_(progress), total_(total) {
    if (!os_) throw IoError("cannot write " + path.string());
    os_ << "step,lr,loss\n" << std::setprecision(17);
  }
  void operator()(const LossLogEntry& e) {
    os_ << e.step << ',' << e.lr << ',' << e.loss << '\n';
    if (e.step % 50 == 0 || e.step + 1 == total_) {
      progress_ << "step " << e.step << "/" << total_ << " lr " << e.lr << " loss " << e.loss << '\n';
    }
  }

 private:
  std::ofstream os_;
  std::ostream& progress_;
  std::size_t total_;
};

int cmd_gen_data(RunConfig& c, std::ostream& out) {
  const fs::path manifest =
      generate_dataset(c.n, c.seed, c.mix, c.out, static_cast<int>(c.model.encoder.image_size));
  write_config(c);
  out << "wrote " << c.n << " records to " << manifest.string() << '\n';
  return kExitOk;
}

int cmd_pretrain(RunConfig& c, std::ostream& out) {
  const auto records = load_dataset(checked_manifest(c)).records;
  const auto data = caption_examples(records);
  MultimodalModel model(c.model);
  write_config(c);
  fs::create_directories(fs::path(c.out) / "checkpoints");
  LossLog log(fs::path(c.out) / "losses.csv", out, c.stage.steps);
  pretrain_stage(model, data, c.stage, std::ref(log));
  save_checkpoint(fs::path(c.out) / "checkpoints" / "stage1.dbft", model, "stage1", json::parse(to_json(c).dump()));
  out << "stage-1 checkpoint: " << (fs::path(c.out) / "checkpoints" / "stage1.dbft").string() << '\n';
  return kExitOk;
}

int cmd_finetune(RunConfig& c, std::ostream& out) {
  const fs::path ckpt_path = fs::is_directory(c.checkpoint)
                                 ? fs::path(c.checkpoint) / "checkpoints" / "stage1.dbft"
                                 : fs::path(c.checkpoint);
  const Checkpoint ck = read_checkpoint(ckpt_path);
  if (ck.stage() != "stage1") throw ConfigError("checkpoint: expected a stage1 checkpoint, got " + ck.stage());
  const ModelConfig mc = ck.model_config();
  check_against(c, mc);
  c.model = mc;
  c.checkpoint = ckpt_path.string();
  MultimodalModel model(mc);
  apply_checkpoint(model, ck);

  const auto records = load_dataset(checked_manifest(c)).records;
  const auto data = instruction_examples(records, c.max_pairs);
  write_config(c);
  fs::create_directories(fs::path(c.out) / "checkpoints");
  LossLog log(fs::path(c.out) / "losses.csv", out, c.stage.steps);
  finetune_stage(model, data, c.stage, std::ref(log));
  save_checkpoint(fs::path(c.out) / "checkpoints" / "stage2.dbft", model, "stage2", json::parse(to_json(c).dump()));
  out << "stage-2 checkpoint: " << (fs::path(c.out) / "checkpoints" / "stage2.dbft").string() << '\n';
  return kExitOk;
}

void write_reports(const RunConfig& c, const std::string& stem, const std::vector<AlignmentReport>& reports,
                   std::ostream& out) {
  write_report_csv(fs::path(c.out) / (stem + ".csv"), reports);
  write_summary_json(fs::path(c.out) / (stem + "_summary.json"), reports);
  for (const auto& s : summarize(reports)) {
    out << s.label << ": mean final loss " << s.mean << " (std " << s.stddev << ", " << s.finals.size()
        << " seeds)\n";
  }
}

std::vector<std::uint64_t> seed_list(const RunConfig& c) {
  std::vector<std::uint64_t> seeds(c.seeds);
  for (std::size_t i = 0; i < c.seeds; ++i) seeds[i] = c.seed + i;
  return seeds;
}

int cmd_align(RunConfig& c, std::ostream& out) {
  std::vector<AlignmentReport> reports;
  if (!c.pairs.empty()) {
    FeaturePairSet pairs = load_feature_pairs(c.pairs);
    write_config(c);
    for (std::uint64_t s : seed_list(c)) reports.push_back(optimize_projection(pairs, c.align, s, "external"));
  } else {
    auto model = model_for(c);
    const auto records = records_for(c, c.records, c.subset);
    write_config(c);
    AblationConfig cfg{format_feature_mask(c.align_features), c.align_features, c.align_strategy};
    reports = compare_configs(*model, records, {cfg}, c.align, seed_list(c));
  }
  write_reports(c, "alignment", reports, out);
  return kExitOk;
}

int cmd_ablate(RunConfig& c, std::ostream& out) {
  auto model = model_for(c);
  const auto records = records_for(c, c.records, c.subset);
  write_config(c);
  AblationConfig full = full_config();
  full.strategy = c.align_strategy;
  std::vector<AblationConfig> configs{full};
  for (FeatureKey k : c.remove) {
    configs.push_back(minus_config(k));
    configs.back().strategy = c.align_strategy;
  }
  if (c.depth_only) {
    configs.push_back(depth_only_config());
    configs.back().strategy = c.align_strategy;
  }
  write_reports(c, "ablation", compare_configs(*model, records, configs, c.align, seed_list(c)), out);
  return kExitOk;
}

int cmd_viz(RunConfig& c, std::ostream& out) {
  auto model = model_for(c);
  const auto records = records_for(c, c.viz_records, "all", 1);
  write_config(c);
  const std::size_t g = model->config().encoder.grid();
  NoGradGuard ng;
  for (const auto& r : records) {
    const FeatureBundle b = model->full_bundle(r.image);
    for (PromptTask t : kAllTasks) {
      const std::string stem = r.id + "." + std::string(task_key(t));
      const PatchVisualization viz = visualize_feature(b.breadth.at(t), g, g, std::string(task_key(t)));
      render_ppm(viz, c.scale, fs::path(c.out) / (stem + ".ppm"));
      std::ofstream js(fs::path(c.out) / (stem + ".json"), std::ios::binary);
      js << viz_sidecar(viz).dump(2) << '\n';
      if (!js) throw IoError("cannot write sidecar for " + stem);
      out << stem << ": " << viz.foreground_count() << " foreground cells, threshold " << viz.threshold << '\n';
    }
  }
  return kExitOk;
}

// Binds a flag to a JSON pointer in the raw config; applied only when given.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <typename T>
  void add(const std::string& name, const std::string& ptr, T def, const std::string& help) {
    auto value = std::make_shared<T>(def);
    CLI::Option* opt = app_->add_option(name, *value, help)->capture_default_str();
    appliers_.push_back([opt, value, ptr](json& raw) {
      if (opt->count()) raw[json::json_pointer(ptr)] = *value;
    });
  }

  void flag(const std::string& name, const std::string& ptr, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag(name, *value, help);
    appliers_.push_back([opt, value, ptr](json& raw) {
      if (opt->count()) raw[json::json_pointer(ptr)] = *value;
    });
  }

  void apply(json& raw) const {
    for (const auto& f : appliers_) f(raw);
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> appliers_;
};

struct Subcommand {
  CLI::App* app = nullptr;
  std::unique_ptr<Flags> flags;
  std::string config_file;
};

void add_model_flags(Flags& f, const ModelConfig& d) {
  f.add<std::string>("--strategy", "/model/strategy", std::string(strategy_name(d.strategy)), "fusion strategy: token|pool|channel");
  f.add<std::string>("--features", "/model/features", format_feature_mask(d.features),
                     "feature mask, comma-joined from depth,caption,ocr,grounding");
}

void add_arch_flags(Flags& f, const ModelConfig& d) {
  f.add<std::size_t>("--image-size", "/model/encoder/image_size", d.encoder.image_size, "image side in pixels");
  f.add<std::size_t>("--patch", "/model/encoder/patch", d.encoder.patch, "patch side in pixels");
  f.add<std::size_t>("--d-backbone", "/model/encoder/d_backbone", d.encoder.d_backbone, "patch backbone width");
  f.add<std::size_t>("--width", "/model/encoder/width", d.encoder.width, "shared vision width D");
  f.add<std::size_t>("--encoder-layers", "/model/encoder/encoder_layers", d.encoder.encoder_layers,
                     "prompt encoder layers");
  f.add<std::size_t>("--encoder-heads", "/model/encoder/heads", d.encoder.heads, "prompt encoder heads");
  f.add<std::size_t>("--max-prompt-tokens", "/model/encoder/max_prompt_tokens", d.encoder.max_prompt_tokens,
                     "prompt token budget");
  f.add<std::size_t>("--window-radius", "/model/encoder/window_radius", d.encoder.window_radius,
                     "backbone attention window radius (patches)");
  f.add<std::size_t>("--d-model", "/model/lm/d_model", d.lm.d_model, "language model width");
  f.add<std::size_t>("--layers", "/model/lm/layers", d.lm.layers, "language model layers");
  f.add<std::size_t>("--heads", "/model/lm/heads", d.lm.heads, "language model heads");
  f.add<std::size_t>("--vocab", "/model/lm/vocab", d.lm.vocab, "vocabulary size");
  f.add<std::size_t>("--max-seq", "/model/lm/max_seq", d.lm.max_seq, "maximum sequence length");
}

void add_stage_flags(Flags& f, const StageSpec& d) {
  f.add<std::size_t>("--steps", "/stage/steps", d.steps, "optimizer steps");
  f.add<std::size_t>("--batch", "/stage/batch", d.batch, "examples per step");
  f.add<double>("--lr-max", "/stage/lr_max", d.lr_max, "peak learning rate");
  f.add<double>("--lr-min", "/stage/lr_min", d.lr_min, "final learning rate");
}

void add_align_flags(Flags& f) {
  const AlignmentOptions d;
  f.add<std::size_t>("--steps", "/align/steps", d.steps, "projection optimizer steps");
  f.add<double>("--lr", "/align/lr", d.lr, "projection learning rate");
  f.add<std::size_t>("--seeds", "/align/seeds", 3, "seeds per configuration (seed, seed+1, ...)");
  f.add<std::size_t>("--records", "/align/records", 256, "records used for alignment");
  f.add<std::string>("--subset", "/align/subset", "all", "record filter: all|text-heavy|multi-object");
  f.add<std::string>("--strategy", "/align/strategy", "channel", "fusion strategy: token|pool|channel");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Depth-breadth fusion desk lab"};
  app.name("dbfusion");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  std::map<std::string, Subcommand> subs;
  auto make = [&](const std::string& name, const std::string& about) -> Subcommand& {
    Subcommand& s = subs[name];
    s.app = app.add_subcommand(name, about);
    s.flags = std::make_unique<Flags>(s.app);
    s.app->add_option("--config", s.config_file, "JSON config file; flags override it");
    s.flags->add<std::uint64_t>("--seed", "/seed", 0, "random seed");
    return s;
  };

  const ModelConfig dm;
  {
    auto& s = make("gen-data", "generate a synthetic scene corpus");
    s.flags->add<std::size_t>("--n", "/gen/n", 5000, "number of scenes");
    s.flags->add<std::string>("--mix", "/gen/mix", "1,1,1", "shape weights square,circle,triangle");
    s.flags->add<std::size_t>("--image-size", "/gen/image_size", dm.encoder.image_size, "image side in pixels");
    s.flags->add<std::string>("--out", "/out", "", "output directory");
  }
  {
    auto& s = make("pretrain", "stage 1: caption pretraining of the whole model");
    s.flags->add<std::string>("--data", "/data", "", "dataset directory or manifest");
    s.flags->add<std::string>("--out", "/out", "", "run directory");
    add_stage_flags(*s.flags, StageSpec::pretrain_defaults());
    add_model_flags(*s.flags, dm);
    add_arch_flags(*s.flags, dm);
  }
  {
    auto& s = make("finetune", "stage 2: instruction finetuning with the vision encoder frozen");
    s.flags->add<std::string>("--data", "/data", "", "dataset directory or manifest");
    s.flags->add<std::string>("--checkpoint", "/checkpoint", "", "stage-1 checkpoint or run directory");
    s.flags->add<std::string>("--out", "/out", "", "run directory");
    add_stage_flags(*s.flags, StageSpec::finetune_defaults());
    s.flags->add<std::size_t>("--max-pairs", "/stage/max_pairs", 2000, "instruction pairs used (0 = all)");
    add_model_flags(*s.flags, dm);
  }
  {
    auto& s = make("align", "fit the alignment projection and report its loss curve");
    s.flags->add<std::string>("--data", "/data", "", "dataset directory or manifest (default: in-memory corpus)");
    s.flags->add<std::string>("--checkpoint", "/checkpoint", "", "checkpoint or run directory (default: init model)");
    s.flags->add<std::string>("--pairs", "/pairs", "", "directory of external <n>.vision.dbft/<n>.text.dbft pairs");
    s.flags->add<std::string>("--out", "/out", "", "output directory");
    s.flags->add<std::string>("--features", "/align/features", format_feature_mask(dm.features),
                              "feature mask, comma-joined from depth,caption,ocr,grounding");
    add_align_flags(*s.flags);
  }
  {
    auto& s = make("ablate", "compare the full bundle against feature-removed bundles");
    s.flags->add<std::string>("--data", "/data", "", "dataset directory or manifest (default: in-memory corpus)");
    s.flags->add<std::string>("--checkpoint", "/checkpoint", "", "checkpoint or run directory (default: init model)");
    s.flags->add<std::string>("--out", "/out", "ablation", "output directory");
    s.flags->add<std::string>("--remove", "/align/remove", "", "features to drop one at a time, comma-joined");
    s.flags->flag("--depth-only", "/align/depth_only", "also evaluate the depth feature alone");
    add_align_flags(*s.flags);
  }
  {
    auto& s = make("viz", "PCA colouring of prompt-conditioned patch features");
    s.flags->add<std::string>("--data", "/data", "", "dataset directory or manifest (default: in-memory corpus)");
    s.flags->add<std::string>("--checkpoint", "/checkpoint", "", "checkpoint or run directory (default: init model)");
    s.flags->add<std::string>("--out", "/out", "", "output directory");
    s.flags->add<std::size_t>("--records", "/viz/records", 1, "number of images to render");
    s.flags->add<std::size_t>("--scale", "/viz/scale", 8, "pixels per patch cell");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    for (const auto& [name, s] : subs) {
      if (s.app->parsed()) {
        out << s.app->help();
        return kExitOk;
      }
    }
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  const Subcommand* active = nullptr;
  std::string command;
  for (const auto& [name, s] : subs) {
    if (s.app->parsed()) {
      active = &s;
      command = name;
    }
  }

  try {
    json raw = json::object();
    if (!active->config_file.empty()) {
      std::ifstream is(active->config_file);
      if (!is) throw ConfigError("config: cannot read " + active->config_file);
      try {
        raw = json::parse(is);
      } catch (const json::exception& e) {
        throw ConfigError("config: " + active->config_file + " is not valid JSON: " + e.what());
      }
      if (!raw.is_object()) throw ConfigError("config: top level must be an object");
      if (raw.contains("command") && raw["command"] != command) {
        throw ConfigError("command: config file is for '" + raw["command"].get<std::string>() + "'");
      }
    }
    raw["command"] = command;
    active->flags->apply(raw);
    RunConfig cfg = validate_config(raw);
    if (command == "gen-data") return cmd_gen_data(cfg, out);
    if (command == "pretrain") return cmd_pretrain(cfg, out);
    if (command == "finetune") return cmd_finetune(cfg, out);
    if (command == "align") return cmd_align(cfg, out);
    if (command == "ablate") return cmd_ablate(cfg, out);
    return cmd_viz(cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

int run(int argc, const char* const* argv) {
  tune_allocator();
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace dbf::cli
