#pragma once

// Procedural scenes (shapes + 5x7 glyph strings) with rule-derived captions,
// OCR text, region descriptions and instruction pairs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dbfusion/tensor.hpp"

namespace dbf {

enum class ShapeKind { Square, Circle, Triangle };

inline constexpr std::array<ShapeKind, 3> kAllShapeKinds = {ShapeKind::Square, ShapeKind::Circle,
                                                            ShapeKind::Triangle};

std::string_view shape_name(ShapeKind k);
ShapeKind shape_from_name(std::string_view name);

struct Color {
  std::string_view name;
  float r, g, b;
};

// Index into the 8-colour palette.
using ColorId = std::size_t;
inline constexpr std::size_t kPaletteSize = 8;
const Color& palette(ColorId id);
ColorId color_from_name(std::string_view name);

struct BBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // half-open [x1,x2) x [y1,y2)
  bool operator==(const BBox&) const = default;
};

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Square;
  ColorId color = 0;
  BBox bbox;
};

struct GlyphSpec {
  std::string text;  // A-Z0-9, length 1..6
  int x = 0, y = 0;  // top-left
  ColorId color = 0;
};

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;
inline constexpr int kGlyphAdvance = 6;
inline constexpr std::size_t kMaxShapes = 4;
inline constexpr std::size_t kMaxGlyphStrings = 2;
inline constexpr std::size_t kMaxGlyphLength = 6;

struct SceneSpec {
  int size = 64;
  ColorId background = 0;
  std::vector<ShapeSpec> shapes;
  std::vector<GlyphSpec> glyphs;
  std::uint64_t seed = 0;

  void validate() const;  // throws SpecError
  BBox glyph_bbox(const GlyphSpec& g) const;
};

// 5x7 bitmap rows for A-Z0-9; bit 4 is the leftmost column.
const std::array<std::uint8_t, 7>& glyph_bitmap(char c);

Tensor render_scene(const SceneSpec& spec);

struct CaptionPair {
  std::string image;
  std::string caption;
  std::string ocr_text;
  std::string region_text;
};

enum class InstructionKind { Count, Color, ReadText, Locate };
std::string_view instruction_kind_name(InstructionKind k);
InstructionKind instruction_kind_from_name(std::string_view name);

struct InstructionPair {
  std::string image;
  std::string question;
  std::string answer;
  InstructionKind kind = InstructionKind::Count;
};

// Ground-truth text derived from a scene by fixed rules.
std::string scene_caption(const SceneSpec& spec);
std::string scene_ocr_text(const SceneSpec& spec);
std::string scene_region_text(const SceneSpec& spec);
std::vector<InstructionPair> scene_instructions(const SceneSpec& spec, const std::string& image_path);
std::vector<std::string> scene_tags(const SceneSpec& spec);

inline constexpr std::string_view kTagTextHeavy = "text-heavy";
inline constexpr std::string_view kTagMultiObject = "multi-object";

struct ShapeMix {
  std::array<double, 3> weights{1.0, 1.0, 1.0};  // square, circle, triangle
  void validate() const;
};

// Scene i of a corpus: a pure function of (seed, index).
SceneSpec sample_scene(std::uint64_t seed, std::size_t index, const ShapeMix& mix, int size = 64);

nlohmann::json scene_to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& j);

struct DatasetRecord {
  std::string id;
  Tensor image;
  CaptionPair caption;
  std::vector<InstructionPair> instructions;
  std::vector<std::string> tags;
  SceneSpec scene;

  bool has_tag(std::string_view tag) const;
};

// Writes <out>/manifest.jsonl and <out>/images/<id>.dbft. Returns the manifest path.
std::filesystem::path generate_dataset(std::size_t n, std::uint64_t seed, const ShapeMix& mix,
                                       const std::filesystem::path& out_dir, int size = 64);

// Same records as generate_dataset would write, without touching disk.
std::vector<DatasetRecord> generate_records(std::size_t n, std::uint64_t seed, const ShapeMix& mix, int size = 64);

struct LoadedDataset {
  std::vector<DatasetRecord> records;
  std::vector<std::string> errors;  // populated only in permissive mode
};

// Strict mode throws IngestionError on the first bad record; permissive mode
// skips it and records the message.
LoadedDataset load_dataset(const std::filesystem::path& manifest, bool permissive = false);

// Accepts either a manifest path or a directory containing manifest.jsonl.
std::filesystem::path resolve_manifest(const std::filesystem::path& p);

}  // namespace dbf
