#include "dbfusion/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dbf {

namespace {

static_assert(std::endian::native == std::endian::little, "DBFT I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(std::string("DBFT: truncated ") + what);
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kDbftMagic, 4);
  put<std::uint8_t>(os, kDbftVersion);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint64_t>(os, e);
  std::vector<float> payload(t.numel());
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(t[i]);
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!os) throw IoError("DBFT: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw IoError("DBFT: truncated magic");
  if (std::memcmp(magic.data(), kDbftMagic, 4) != 0) throw IoError("DBFT: bad magic");
  const auto version = get<std::uint8_t>(is, "version");
  if (version != kDbftVersion) throw IoError("DBFT: unsupported version " + std::to_string(version));
  const auto rank = get<std::uint8_t>(is, "rank");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = get<std::uint64_t>(is, "extent");
    if (e == 0 || e > (std::size_t{1} << 32)) throw IoError("DBFT: corrupt extent");
    n *= e;
    if (n > (std::size_t{1} << 32)) throw IoError("DBFT: corrupt header (payload too large)");
  }
  std::vector<float> payload(n);
  if (!is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * sizeof(float)))) {
    throw IoError("DBFT: truncated payload");
  }
  std::vector<double> data(payload.begin(), payload.end());
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return std::move(os).str();
}

Tensor round_to_storage(const Tensor& t) {
  std::vector<double> d(t.numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(static_cast<float>(t[i]));
  return Tensor(t.shape(), std::move(d));
}

}  // namespace dbf
