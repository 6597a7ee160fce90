#pragma once

// DBFT binary tensor container:
//   "DBFT" | u8 version (0x01) | u8 rank | rank x u64 LE extents | f32 LE payload (row-major)
// Values are stored at f32 precision and widened back to f64 on load.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dbfusion/tensor.hpp"

namespace dbf {

inline constexpr char kDbftMagic[4] = {'D', 'B', 'F', 'T'};
inline constexpr unsigned char kDbftVersion = 0x01;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Serialized bytes of `t`, identical to what save_tensor writes.
std::string encode_tensor(const Tensor& t);

// Rounds every element through f32, i.e. what a save/load round trip yields.
Tensor round_to_storage(const Tensor& t);

}  // namespace dbf
