#include "dbfusion/synth_data.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "dbfusion/errors.hpp"
#include "dbfusion/hash.hpp"
#include "dbfusion/tensor_io.hpp"

namespace dbf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<Color, kPaletteSize> kPalette = {{
    {"black", 0.0f, 0.0f, 0.0f},
    {"white", 1.0f, 1.0f, 1.0f},
    {"red", 1.0f, 0.0f, 0.0f},
    {"green", 0.0f, 1.0f, 0.0f},
    {"blue", 0.0f, 0.0f, 1.0f},
    {"yellow", 1.0f, 1.0f, 0.0f},
    {"cyan", 0.0f, 1.0f, 1.0f},
    {"magenta", 1.0f, 0.0f, 1.0f},
}};

constexpr std::string_view kGlyphChars = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

// clang-format off
constexpr std::array<std::array<std::uint8_t, 7>, 36> kFont = {{
    {0x0E,0x11,0x11,0x1F,0x11,0x11,0x11}, {0x1E,0x11,0x11,0x1E,0x11,0x11,0x1E},  // A B
    {0x0E,0x11,0x10,0x10,0x10,0x11,0x0E}, {0x1E,0x11,0x11,0x11,0x11,0x11,0x1E},  // C D
    {0x1F,0x10,0x10,0x1E,0x10,0x10,0x1F}, {0x1F,0x10,0x10,0x1E,0x10,0x10,0x10},  // E F
    {0x0E,0x11,0x10,0x17,0x11,0x11,0x0F}, {0x11,0x11,0x11,0x1F,0x11,0x11,0x11},  // G H
    {0x0E,0x04,0x04,0x04,0x04,0x04,0x0E}, {0x07,0x02,0x02,0x02,0x02,0x12,0x0C},  // I J
    {0x11,0x12,0x14,0x18,0x14,0x12,0x11}, {0x10,0x10,0x10,0x10,0x10,0x10,0x1F},  // K L
    {0x11,0x1B,0x15,0x15,0x11,0x11,0x11}, {0x11,0x11,0x19,0x15,0x13,0x11,0x11},  // M N
    {0x0E,0x11,0x11,0x11,0x11,0x11,0x0E}, {0x1E,0x11,0x11,0x1E,0x10,0x10,0x10},  // O P
    {0x0E,0x11,0x11,0x11,0x15,0x12,0x0D}, {0x1E,0x11,0x11,0x1E,0x14,0x12,0x11},  // Q R
    {0x0F,0x10,0x10,0x0E,0x01,0x01,0x1E}, {0x1F,0x04,0x04,0x04,0x04,0x04,0x04},  // S T
    {0x11,0x11,0x11,0x11,0x11,0x11,0x0E}, {0x11,0x11,0x11,0x11,0x11,0x0A,0x04},  // U V
    {0x11,0x11,0x11,0x15,0x15,0x15,0x0A}, {0x11,0x11,0x0A,0x04,0x0A,0x11,0x11},  // W X
    {0x11,0x11,0x11,0x0A,0x04,0x04,0x04}, {0x1F,0x01,0x02,0x04,0x08,0x10,0x1F},  // Y Z
    {0x0E,0x11,0x13,0x15,0x19,0x11,0x0E}, {0x04,0x0C,0x04,0x04,0x04,0x04,0x0E},  // 0 1
    {0x0E,0x11,0x01,0x02,0x04,0x08,0x1F}, {0x1F,0x02,0x04,0x02,0x01,0x11,0x0E},  // 2 3
    {0x02,0x06,0x0A,0x12,0x1F,0x02,0x02}, {0x1F,0x10,0x1E,0x01,0x01,0x11,0x0E},  // 4 5
    {0x06,0x08,0x10,0x1E,0x11,0x11,0x0E}, {0x1F,0x01,0x02,0x04,0x08,0x08,0x08},  // 6 7
    {0x0E,0x11,0x11,0x0E,0x11,0x11,0x0E}, {0x0E,0x11,0x11,0x0F,0x01,0x02,0x0C},  // 8 9
}};
// clang-format on

std::string join_phrases(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
    out += items[i];
  }
  return out;
}

std::string bbox_text(const BBox& b) {
  std::ostringstream os;
  os << '(' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ')';
  return os.str();
}

bool overlaps(const BBox& a, const BBox& b) {
  return a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2;
}

bool shape_covers(const ShapeSpec& s, int x, int y) {
  const BBox& b = s.bbox;
  if (x < b.x1 || x >= b.x2 || y < b.y1 || y >= b.y2) return false;
  const double px = x + 0.5, py = y + 0.5;
  const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
  switch (s.kind) {
    case ShapeKind::Square: return true;
    case ShapeKind::Circle: {
      const double r = 0.5 * (b.x2 - b.x1);
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case ShapeKind::Triangle: {
      const double t = (py - b.y1) / static_cast<double>(b.y2 - b.y1);
      return std::abs(px - cx) <= t * 0.5 * (b.x2 - b.x1);
    }
  }
  return false;
}

void write_json_scene_shapes(json& j, const SceneSpec& s) {
  j["shapes"] = json::array();
  for (const auto& sh : s.shapes) {
    j["shapes"].push_back({{"kind", shape_name(sh.kind)},
                           {"color", palette(sh.color).name},
                           {"bbox", {sh.bbox.x1, sh.bbox.y1, sh.bbox.x2, sh.bbox.y2}}});
  }
  j["glyphs"] = json::array();
  for (const auto& g : s.glyphs) {
    j["glyphs"].push_back({{"text", g.text}, {"x", g.x}, {"y", g.y}, {"color", palette(g.color).name}});
  }
}

}  // namespace

std::string_view shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Square: return "square";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
  }
  throw ArgumentError("unknown shape kind");
}

ShapeKind shape_from_name(std::string_view name) {
  for (auto k : kAllShapeKinds)
    if (shape_name(k) == name) return k;
  throw SpecError("unknown shape kind '" + std::string(name) + "'");
}

const Color& palette(ColorId id) {
  if (id >= kPaletteSize) throw SpecError("colour id " + std::to_string(id) + " outside palette");
  return kPalette[id];
}

ColorId color_from_name(std::string_view name) {
  for (ColorId i = 0; i < kPaletteSize; ++i)
    if (kPalette[i].name == name) return i;
  throw SpecError("unknown colour '" + std::string(name) + "'");
}

const std::array<std::uint8_t, 7>& glyph_bitmap(char c) {
  const auto pos = kGlyphChars.find(c);
  if (pos == std::string_view::npos) throw SpecError(std::string("glyph '") + c + "' not in font (A-Z0-9)");
  return kFont[pos];
}

BBox SceneSpec::glyph_bbox(const GlyphSpec& g) const {
  const int w = static_cast<int>(g.text.size()) * kGlyphAdvance - 1;
  return BBox{g.x, g.y, g.x + w, g.y + kGlyphHeight};
}

void SceneSpec::validate() const {
  if (size <= 0) throw SpecError("scene size must be positive");
  palette(background);
  if (shapes.size() > kMaxShapes) throw SpecError("scene has more than 4 shapes");
  if (glyphs.size() > kMaxGlyphStrings) throw SpecError("scene has more than 2 glyph strings");
  auto in_bounds = [&](const BBox& b) { return b.x1 >= 0 && b.y1 >= 0 && b.x2 <= size && b.y2 <= size; };
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    palette(s.color);
    if (s.bbox.x2 <= s.bbox.x1 || s.bbox.y2 <= s.bbox.y1 || !in_bounds(s.bbox)) {
      throw SpecError("shape " + std::to_string(i) + " bbox " + bbox_text(s.bbox) + " is empty or out of bounds");
    }
  }
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    const auto& g = glyphs[i];
    palette(g.color);
    if (g.text.empty() || g.text.size() > kMaxGlyphLength) {
      throw SpecError("glyph string " + std::to_string(i) + " must have length 1..6");
    }
    for (char c : g.text) glyph_bitmap(c);
    if (!in_bounds(glyph_bbox(g))) throw SpecError("glyph string " + std::to_string(i) + " out of bounds");
  }
}

Tensor render_scene(const SceneSpec& spec) {
  spec.validate();
  const int n = spec.size;
  std::vector<double> px(static_cast<std::size_t>(n * n * 3));
  auto put = [&](int x, int y, ColorId c) {
    const Color& col = palette(c);
    double* p = px.data() + (static_cast<std::size_t>(y) * n + x) * 3;
    p[0] = col.r;
    p[1] = col.g;
    p[2] = col.b;
  };
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) put(x, y, spec.background);
  for (const auto& s : spec.shapes)
    for (int y = s.bbox.y1; y < s.bbox.y2; ++y)
      for (int x = s.bbox.x1; x < s.bbox.x2; ++x)
        if (shape_covers(s, x, y)) put(x, y, s.color);
  for (const auto& g : spec.glyphs) {
    for (std::size_t ci = 0; ci < g.text.size(); ++ci) {
      const auto& bm = glyph_bitmap(g.text[ci]);
      const int ox = g.x + static_cast<int>(ci) * kGlyphAdvance;
      for (int r = 0; r < kGlyphHeight; ++r)
        for (int c = 0; c < kGlyphWidth; ++c)
          if (bm[r] & (0x10 >> c)) put(ox + c, g.y + r, g.color);
    }
  }
  return Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(n), 3}, std::move(px));
}

// ---------------------------------------------------------------------------
// Ground-truth text

std::string scene_caption(const SceneSpec& spec) {
  std::vector<std::string> parts;
  for (const auto& s : spec.shapes) {
    parts.push_back("a " + std::string(palette(s.color).name) + " " + std::string(shape_name(s.kind)));
  }
  std::string out = "a " + std::string(palette(spec.background).name) + " image with ";
  out += parts.empty() ? std::string("no shapes") : join_phrases(parts);
  if (!spec.glyphs.empty()) {
    std::vector<std::string> texts;
    for (const auto& g : spec.glyphs) texts.push_back(g.text);
    out += ", showing the text " + join_phrases(texts);
  }
  out += ".";
  return out;
}

std::string scene_ocr_text(const SceneSpec& spec) {
  std::vector<const GlyphSpec*> order;
  for (const auto& g : spec.glyphs) order.push_back(&g);
  std::stable_sort(order.begin(), order.end(), [](const GlyphSpec* a, const GlyphSpec* b) {
    return a->y != b->y ? a->y < b->y : a->x < b->x;
  });
  std::string out;
  for (const auto* g : order) {
    if (!out.empty()) out += ' ';
    out += g->text;
  }
  return out;
}

std::string scene_region_text(const SceneSpec& spec) {
  std::string out;
  for (const auto& s : spec.shapes) {
    if (!out.empty()) out += "; ";
    out += std::string(shape_name(s.kind)) + " at " + bbox_text(s.bbox);
  }
  return out;
}

std::string_view instruction_kind_name(InstructionKind k) {
  switch (k) {
    case InstructionKind::Count: return "count";
    case InstructionKind::Color: return "color";
    case InstructionKind::ReadText: return "read-text";
    case InstructionKind::Locate: return "locate";
  }
  throw ArgumentError("unknown instruction kind");
}

InstructionKind instruction_kind_from_name(std::string_view name) {
  for (auto k : {InstructionKind::Count, InstructionKind::Color, InstructionKind::ReadText, InstructionKind::Locate})
    if (instruction_kind_name(k) == name) return k;
  throw ArgumentError("unknown instruction kind '" + std::string(name) + "'");
}

// Rules: count = number of shapes; color/locate ask about the first shape in
// scene order; read-text appears only when glyphs exist and answers ocr_text.
std::vector<InstructionPair> scene_instructions(const SceneSpec& spec, const std::string& image_path) {
  std::vector<InstructionPair> out;
  out.push_back({image_path, "how many shapes are in the image?", std::to_string(spec.shapes.size()),
                 InstructionKind::Count});
  if (!spec.shapes.empty()) {
    const auto& s = spec.shapes.front();
    const std::string kind(shape_name(s.kind));
    const std::string color(palette(s.color).name);
    out.push_back({image_path, "what color is the " + kind + "?", color, InstructionKind::Color});
    out.push_back({image_path, "where is the " + color + " " + kind + "?", bbox_text(s.bbox), InstructionKind::Locate});
  }
  if (!spec.glyphs.empty()) {
    out.push_back({image_path, "what text is shown in the image?", scene_ocr_text(spec), InstructionKind::ReadText});
  }
  return out;
}

std::vector<std::string> scene_tags(const SceneSpec& spec) {
  std::vector<std::string> tags;
  if (!spec.glyphs.empty()) tags.emplace_back(kTagTextHeavy);
  if (spec.shapes.size() >= 3) tags.emplace_back(kTagMultiObject);
  return tags;
}

// ---------------------------------------------------------------------------
// Sampling

void ShapeMix::validate() const {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ArgumentError("shape mix weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw ArgumentError("shape mix weights must not all be zero");
}

SceneSpec sample_scene(std::uint64_t seed, std::size_t index, const ShapeMix& mix, int size) {
  mix.validate();
  if (size < kGlyphAdvance + kGlyphHeight) throw ArgumentError("sample_scene: image size " + std::to_string(size) + " is too small");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto other_color = [&](ColorId bg) {
    ColorId c = static_cast<ColorId>(uni(0, static_cast<int>(kPaletteSize) - 2));
    return c >= bg ? c + 1 : c;
  };

  SceneSpec s;
  s.size = size;
  s.seed = seed;
  s.background = static_cast<ColorId>(uni(0, static_cast<int>(kPaletteSize) - 1));
  std::discrete_distribution<int> kind_dist(mix.weights.begin(), mix.weights.end());
  std::vector<BBox> taken;

  const int n_shapes = uni(1, static_cast<int>(kMaxShapes));
  for (int i = 0; i < n_shapes; ++i) {
    ShapeSpec sh;
    sh.kind = kAllShapeKinds[static_cast<std::size_t>(kind_dist(rng))];
    sh.color = other_color(s.background);
    const int side = uni(std::min(12, size), std::min(24, size));
    for (int attempt = 0; attempt < 30; ++attempt) {
      const int x = uni(0, size - side), y = uni(0, size - side);
      sh.bbox = BBox{x, y, x + side, y + side};
      if (std::none_of(taken.begin(), taken.end(), [&](const BBox& b) { return overlaps(b, sh.bbox); })) break;
    }
    taken.push_back(sh.bbox);
    s.shapes.push_back(sh);
  }

  std::discrete_distribution<int> glyph_count({0.4, 0.35, 0.25});
  const int n_glyphs = glyph_count(rng);
  for (int i = 0; i < n_glyphs; ++i) {
    GlyphSpec g;
    const int max_len = std::min(static_cast<int>(kMaxGlyphLength), (size + 1) / kGlyphAdvance);
    const int len = uni(1, max_len);
    for (int c = 0; c < len; ++c) g.text.push_back(kGlyphChars[static_cast<std::size_t>(uni(0, 35))]);
    g.color = other_color(s.background);
    const int w = len * kGlyphAdvance - 1;
    for (int attempt = 0; attempt < 30; ++attempt) {
      g.x = uni(0, size - w);
      g.y = uni(0, size - kGlyphHeight);
      const BBox b = s.glyph_bbox(g);
      if (std::none_of(taken.begin(), taken.end(), [&](const BBox& t) { return overlaps(t, b); })) break;
    }
    taken.push_back(s.glyph_bbox(g));
    s.glyphs.push_back(g);
  }
  return s;
}

json scene_to_json(const SceneSpec& spec) {
  json j;
  j["size"] = spec.size;
  j["background"] = palette(spec.background).name;
  j["seed"] = spec.seed;
  write_json_scene_shapes(j, spec);
  return j;
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.size = j.at("size").get<int>();
  s.background = color_from_name(j.at("background").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& js : j.at("shapes")) {
    ShapeSpec sh;
    sh.kind = shape_from_name(js.at("kind").get<std::string>());
    sh.color = color_from_name(js.at("color").get<std::string>());
    const auto& b = js.at("bbox");
    sh.bbox = BBox{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    s.shapes.push_back(sh);
  }
  for (const auto& jg : j.at("glyphs")) {
    GlyphSpec g;
    g.text = jg.at("text").get<std::string>();
    g.x = jg.at("x").get<int>();
    g.y = jg.at("y").get<int>();
    g.color = color_from_name(jg.at("color").get<std::string>());
    s.glyphs.push_back(g);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Corpus I/O

bool DatasetRecord::has_tag(std::string_view tag) const {
  return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

namespace {

std::string record_id(std::size_t i) {
  std::ostringstream os;
  os << "scene-" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

DatasetRecord make_record(std::size_t i, std::uint64_t seed, const ShapeMix& mix, int size) {
  DatasetRecord r;
  r.id = record_id(i);
  r.scene = sample_scene(seed, i, mix, size);
  r.image = render_scene(r.scene);
  const std::string path = "images/" + r.id + ".dbft";
  r.caption = CaptionPair{path, scene_caption(r.scene), scene_ocr_text(r.scene), scene_region_text(r.scene)};
  r.instructions = scene_instructions(r.scene, path);
  r.tags = scene_tags(r.scene);
  return r;
}

}  // namespace

std::vector<DatasetRecord> generate_records(std::size_t n, std::uint64_t seed, const ShapeMix& mix, int size) {
  if (n == 0) throw ArgumentError("dataset size must be at least 1");
  mix.validate();
  std::vector<DatasetRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_record(i, seed, mix, size));
  return out;
}

fs::path generate_dataset(std::size_t n, std::uint64_t seed, const ShapeMix& mix, const fs::path& out_dir, int size) {
  if (n == 0) throw ArgumentError("dataset size must be at least 1");
  mix.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  const fs::path manifest = out_dir / "manifest.jsonl";
  std::ofstream os(manifest, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + manifest.string() + " for writing");
  for (std::size_t i = 0; i < n; ++i) {
    const DatasetRecord r = make_record(i, seed, mix, size);
    const std::string bytes = encode_tensor(r.image);
    write_file_bytes(out_dir / r.caption.image, bytes);
    json j;
    j["id"] = r.id;
    j["image"] = r.caption.image;
    j["caption"] = r.caption.caption;
    j["ocr_text"] = r.caption.ocr_text;
    j["region_text"] = r.caption.region_text;
    j["instructions"] = json::array();
    for (const auto& ins : r.instructions) {
      j["instructions"].push_back(
          {{"question", ins.question}, {"answer", ins.answer}, {"kind", instruction_kind_name(ins.kind)}});
    }
    j["tags"] = r.tags;
    j["sha256"] = sha256_hex(bytes);
    j["scene"] = scene_to_json(r.scene);
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("write failed: " + manifest.string());
  return manifest;
}

fs::path resolve_manifest(const fs::path& p) {
  if (fs::is_directory(p)) return p / "manifest.jsonl";
  return p;
}

LoadedDataset load_dataset(const fs::path& manifest_in, bool permissive) {
  const fs::path manifest = resolve_manifest(manifest_in);
  std::ifstream is(manifest);
  if (!is) throw IngestionError("cannot open manifest " + manifest.string());
  const fs::path root = manifest.parent_path();
  LoadedDataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string label = "line " + std::to_string(line_no);
    try {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw IngestionError("record at " + label + ": malformed JSON: " + e.what());
      }
      DatasetRecord r;
      std::string expected_sha;
      try {
        r.id = j.at("id").get<std::string>();
        label = "'" + r.id + "'";
        r.caption.image = j.at("image").get<std::string>();
        r.caption.caption = j.at("caption").get<std::string>();
        r.caption.ocr_text = j.at("ocr_text").get<std::string>();
        r.caption.region_text = j.at("region_text").get<std::string>();
        for (const auto& ji : j.at("instructions")) {
          r.instructions.push_back({r.caption.image, ji.at("question").get<std::string>(),
                                    ji.at("answer").get<std::string>(),
                                    instruction_kind_from_name(ji.at("kind").get<std::string>())});
        }
        r.tags = j.at("tags").get<std::vector<std::string>>();
        r.scene = scene_from_json(j.at("scene"));
        expected_sha = j.at("sha256").get<std::string>();
      } catch (const json::exception& e) {
        throw IngestionError("record " + label + ": missing or invalid field: " + e.what());
      } catch (const Error& e) {
        throw IngestionError("record " + label + ": " + e.what());
      }
      const fs::path img = root / r.caption.image;
      std::string bytes;
      try {
        bytes = read_file_bytes(img);
      } catch (const Error&) {
        throw IngestionError("record " + label + ": missing image file " + img.string());
      }
      if (sha256_hex(bytes) != expected_sha) {
        throw IngestionError("record " + label + ": checksum mismatch for " + img.string());
      }
      try {
        std::istringstream ts(bytes, std::ios::binary);
        r.image = read_tensor(ts);
      } catch (const Error& e) {
        throw IngestionError("record " + label + ": corrupt image file: " + e.what());
      }
      const auto sz = static_cast<std::size_t>(r.scene.size);
      if (r.image.shape() != Shape{sz, sz, 3}) {
        throw IngestionError("record " + label + ": image shape " + shape_str(r.image.shape()) + " does not match scene");
      }
      out.records.push_back(std::move(r));
    } catch (const IngestionError& e) {
      if (!permissive) throw;
      out.errors.emplace_back(e.what());
    }
  }
  return out;
}

}  // namespace dbf
