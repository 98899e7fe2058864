#pragma once

// LMK1 array container: "LMK1", u32 count, then per array
//   u16 name_len, name, u8 dtype (0=f32, 1=f64), u8 rank, u32 dims[rank], payload
// and a trailing CRC-32 of everything before it. All integers little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latmask/ndarray.hpp"

namespace latmask::ckpt {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Entry {
  std::string name;
  DType dtype = DType::f32;
  NDArray value;

  bool operator==(const Entry&) const = default;
};

class Checkpoint {
 public:
  void add(std::string name, NDArray value, DType dtype = DType::f32);
  bool contains(std::string_view name) const;
  // FormatError when absent.
  const NDArray& get(std::string_view name) const;

  // String metadata rides along as empty arrays named "meta:<key>=<value>".
  void set_meta(std::string_view key, std::string_view value);
  std::string meta(std::string_view key) const;

  const std::vector<Entry>& entries() const { return entries_; }
  bool operator==(const Checkpoint&) const = default;

 private:
  std::vector<Entry> entries_;
};

std::vector<std::uint8_t> serialize(const Checkpoint& c);
// FormatError on bad magic, truncation, trailing bytes or CRC mismatch.
Checkpoint parse(std::span<const std::uint8_t> bytes);

void save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace latmask::ckpt
