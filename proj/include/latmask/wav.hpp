#pragma once

#include <filesystem>

#include "latmask/waveform.hpp"

namespace latmask::wav {

enum class Encoding { pcm16, float32 };

// Mono RIFF/WAVE, PCM16 or IEEE float32. FormatError names the offending
// chunk for multichannel, unsupported codecs and truncated files.
Waveform read(const std::filesystem::path& path);
void write(const std::filesystem::path& path, const Waveform& w, Encoding encoding = Encoding::float32);

}  // namespace latmask::wav
