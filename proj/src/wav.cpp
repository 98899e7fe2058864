#include "latmask/wav.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "latmask/errors.hpp"

namespace latmask::wav {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_tag(std::vector<unsigned char>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

}  // namespace

Waveform read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open WAV file " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();

  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("RIFF chunk: missing RIFF/WAVE header" + where);
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::uint32_t size = le32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      throw FormatError("'" + id + "' chunk: truncated (" + std::to_string(size) + " bytes declared, " +
                        std::to_string(bytes.size() - body) + " present)" + where);
    }
    const unsigned char* p = bytes.data() + body;
    if (id == "fmt ") {
      if (size < 16) throw FormatError("'fmt ' chunk: too short" + where);
      format = le16(p);
      channels = le16(p + 2);
      rate = le32(p + 4);
      bits = le16(p + 14);
      if (format == kFormatExtensible) {
        if (size < 26) throw FormatError("'fmt ' chunk: extensible header too short" + where);
        format = le16(p + 24);
      }
      if (channels != 1) {
        throw FormatError("'fmt ' chunk: " + std::to_string(channels) + " channels, only mono is supported" + where);
      }
      if (!((format == kFormatPcm && bits == 16) || (format == kFormatFloat && bits == 32))) {
        throw FormatError("'fmt ' chunk: unsupported codec (format " + std::to_string(format) + ", " +
                          std::to_string(bits) + " bits)" + where);
      }
      if (rate == 0) throw FormatError("'fmt ' chunk: zero sample rate" + where);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("'data' chunk: appears before 'fmt '" + where);
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      const std::size_t width = bits / 8;
      if (size % width != 0) throw FormatError("'data' chunk: size is not a whole number of samples" + where);
      w.samples.resize(size / width);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        if (format == kFormatPcm) {
          const auto v = static_cast<std::int16_t>(le16(p + 2 * i));
          w.samples[i] = static_cast<float>(v) / 32768.0f;
        } else {
          const std::uint32_t raw = le32(p + 4 * i);
          float f;
          std::memcpy(&f, &raw, 4);
          w.samples[i] = f;
        }
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw FormatError(std::string(have_fmt ? "'data'" : "'fmt '") + " chunk: missing" + where);
}

void write(const std::filesystem::path& path, const Waveform& w, Encoding encoding) {
  const bool pcm = encoding == Encoding::pcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * (bits / 8));

  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put32(out, 16);
  put16(out, pcm ? kFormatPcm : kFormatFloat);
  put16(out, 1);
  put32(out, static_cast<std::uint32_t>(w.sample_rate));
  put32(out, static_cast<std::uint32_t>(w.sample_rate) * (bits / 8));
  put16(out, bits / 8);
  put16(out, bits);
  put_tag(out, "data");
  put32(out, data_bytes);
  for (float v : w.samples) {
    if (pcm) {
      const double scaled = std::round(std::clamp(static_cast<double>(v), -1.0, 32767.0 / 32768.0) * 32768.0);
      put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
    } else {
      std::uint32_t raw;
      std::memcpy(&raw, &v, 4);
      put32(out, raw);
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("write failed for " + path.string());
}

}  // namespace latmask::wav
