#include "latmask/checkpoint.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <fstream>
#include <iterator>
#include <limits>

#include "latmask/errors.hpp"

namespace latmask::ckpt {

namespace {

constexpr char kMagic[4] = {'L', 'M', 'K', '1'};
constexpr std::string_view kMetaPrefix = "meta:";

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename T>
  T le(const char* what) {
    const std::uint8_t* p = take(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(std::string name, NDArray value, DType dtype) {
  if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw ContractError("checkpoint array names must be 1..65535 bytes");
  }
  if (contains(name)) throw ContractError("duplicate checkpoint array '" + name + "'");
  if (value.rank() > 255) throw ContractError("checkpoint arrays support rank <= 255");
  for (std::size_t d : value.shape())
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ContractError("checkpoint dimension too large");
  entries_.push_back({std::move(name), dtype, std::move(value)});
}

bool Checkpoint::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const NDArray& Checkpoint::get(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw FormatError("checkpoint has no array '" + std::string(name) + "'");
}

void Checkpoint::set_meta(std::string_view key, std::string_view value) {
  if (key.find('=') != std::string_view::npos) throw ContractError("metadata keys may not contain '='");
  add(std::string(kMetaPrefix) + std::string(key) + "=" + std::string(value), NDArray(Shape{0}));
}

std::string Checkpoint::meta(std::string_view key) const {
  const std::string prefix = std::string(kMetaPrefix) + std::string(key) + "=";
  for (const auto& e : entries_)
    if (e.name.rfind(prefix, 0) == 0) return e.name.substr(prefix.size());
  throw FormatError("checkpoint has no metadata '" + std::string(key) + "'");
}

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.entries().size()));
  for (const auto& e : c.entries()) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : e.value.data()) {
      if (e.dtype == DType::f32) {
        const float f = static_cast<float>(v);
        std::uint32_t raw;
        std::memcpy(&raw, &f, 4);
        w.le(raw);
      } else {
        std::uint64_t raw;
        std::memcpy(&raw, &v, 8);
        w.le(raw);
      }
    }
  }
  w.le(crc32(w.out));
  return std::move(w.out);
}

Checkpoint parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not an LMK1 checkpoint (bad magic or too short)");
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const auto stored = tail.le<std::uint32_t>("crc");
  if (stored != crc32(body)) throw FormatError("checkpoint CRC-32 mismatch");

  Reader r(body);
  r.take(4, "magic");
  const auto count = r.le<std::uint32_t>("array count");
  Checkpoint c;
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto name_len = r.le<std::uint16_t>("name length");
    const auto* name_ptr = r.take(name_len, "name");
    std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("array '" + name + "': unknown dtype code " + std::to_string(dtype));
    const auto rank = r.le<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint32_t>("dims");
    NDArray value(shape);
    for (double& v : value.data()) {
      if (dtype == 0) {
        const auto raw = r.le<std::uint32_t>("payload");
        float f;
        std::memcpy(&f, &raw, 4);
        v = f;
      } else {
        const auto raw = r.le<std::uint64_t>("payload");
        std::memcpy(&v, &raw, 8);
      }
    }
    c.add(std::move(name), std::move(value), static_cast<DType>(dtype));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes before the CRC");
  return c;
}

void save(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = serialize(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for " + path.string());
}

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

Checkpoint load(const std::filesystem::path& path) {
  try {
    return parse(slurp(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, n);
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(slurp(path)); }

}  // namespace latmask::ckpt
