#include "dbfusion/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dbfusion/hash.hpp"
#include "dbfusion/tensor_io.hpp"

namespace dbf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'D', 'B', 'F', 'C', 'K', 'P', 'T', '1'};
}

ModelConfig Checkpoint::model_config() const {
  ModelConfig c;
  from_json(header.at("config").at("model"), c);
  return c;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ArgumentError("checkpoint has no parameter '" + name + "'");
}

void save_checkpoint(const fs::path& path, const MultimodalModel& model, const std::string& stage, const json& extra) {
  json header;
  header["format"] = "dbfusion-checkpoint";
  header["version"] = 1;
  header["stage"] = stage;
  header["config"] = extra;
  header["config"]["model"] = to_json(model.config());
  header["parameters"] = json::array();
  for (const auto& p : model.params().all()) {
    header["parameters"].push_back({{"name", p.name}, {"group", p.group}, {"shape", p.tensor.shape()}});
  }
  const std::string hdr = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 8);
  const std::uint64_t len = hdr.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& p : model.params().all()) write_tensor(os, p.tensor);
  if (!os) throw IoError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError("checkpoint " + path.string() + ": bad magic");
  }
  std::uint64_t len = 0;
  if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 26)) {
    throw IoError("checkpoint " + path.string() + ": corrupt header length");
  }
  std::string hdr(len, '\0');
  if (!is.read(hdr.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint: truncated header");
  Checkpoint ck;
  try {
    ck.header = json::parse(hdr);
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": malformed header: " + e.what());
  }
  for (const auto& p : ck.header.at("parameters")) {
    Tensor t = read_tensor(is);
    const auto shape = p.at("shape").get<Shape>();
    if (t.shape() != shape) throw IoError("checkpoint: shape mismatch for " + p.at("name").get<std::string>());
    ck.tensors.emplace_back(p.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void apply_checkpoint(MultimodalModel& model, const Checkpoint& ckpt) {
  auto& store = model.params();
  if (ckpt.tensors.size() != store.all().size()) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " parameters, model expects " +
                      std::to_string(store.all().size()));
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (!store.contains(name)) throw ConfigError("checkpoint parameter '" + name + "' not present in model");
    Parameter& p = store.get(name);
    if (p.tensor.shape() != t.shape()) {
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                        shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
    p.tensor.zero_grad();
  }
}

std::unique_ptr<MultimodalModel> load_model(const fs::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  auto model = std::make_unique<MultimodalModel>(ck.model_config());
  apply_checkpoint(*model, ck);
  return model;
}

std::string group_hash(const ParameterStore& store, const std::string& group) {
  std::string bytes;
  for (const auto& p : store.all()) {
    if (p.group != group) continue;
    bytes += p.name;
    bytes += encode_tensor(p.tensor);
  }
  return sha256_hex(bytes);
}

std::string group_hash(const Checkpoint& ckpt, const std::string& group) {
  std::string bytes;
  const auto& params = ckpt.header.at("parameters");
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    if (params.at(i).at("group").get<std::string>() != group) continue;
    bytes += ckpt.tensors[i].first;
    bytes += encode_tensor(ckpt.tensors[i].second);
  }
  return sha256_hex(bytes);
}

}  // namespace dbf
