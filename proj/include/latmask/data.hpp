#pragma once

// Seeded synthetic instruments, mixtures and datasets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "latmask/waveform.hpp"

namespace latmask::data {

enum class SourceKind { tonal_harmonic, percussive, sustained_saw, bell_fm, breath_noise };

inline constexpr std::array<SourceKind, 5> kAllKinds = {
    SourceKind::tonal_harmonic, SourceKind::percussive, SourceKind::sustained_saw,
    SourceKind::bell_fm, SourceKind::breath_noise};

std::string_view kind_name(SourceKind kind);
// ConfigError for unknown names.
SourceKind parse_kind(std::string_view name);

// Ordered tag names; one tag per SourceKind in the standard vocabulary.
class TagVocabulary {
 public:
  TagVocabulary() = default;
  explicit TagVocabulary(std::vector<std::string> names);
  static TagVocabulary standard();

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  // ConfigError if absent.
  std::size_t index_of(std::string_view name) const;
  // Comma separated.
  std::string serialize() const;
  static TagVocabulary parse(std::string_view text);

  bool operator==(const TagVocabulary&) const = default;

 private:
  std::vector<std::string> names_;
};

// Tag probabilities (estimates) or a {0,1} multi-hot target.
struct TagVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool is_multi_hot() const;
  std::uint32_t bitmask() const;
  static TagVector from_bitmask(std::uint32_t bits, std::size_t k);
  // Names -> multi-hot; ConfigError for unknown tags.
  static TagVector from_names(const std::vector<std::string>& names, const TagVocabulary& vocab);
};

// Peak-normalised to 0.5; deterministic per (kind, seed). ConfigError when
// duration < 0.5 s.
Waveform synth_source(SourceKind kind, std::uint64_t seed, double duration_s, int sample_rate = 8000);

struct MixtureSpec {
  struct Entry {
    SourceKind kind;
    double gain = 1.0;
    std::uint64_t seed = 0;
  };
  std::vector<Entry> sources;
  double duration_s = 4.0;
  int sample_rate = 8000;
};

struct Mixture {
  Waveform mixture;
  // Scaled contributions; they sum to `mixture`.
  std::vector<Waveform> stems;
  std::vector<SourceKind> kinds;
  std::vector<TagVector> stem_tags;
  TagVector tags;  // union of stem tags
  std::vector<double> effective_gains;
  double rescale = 1.0;
};

Mixture make_mixture(const MixtureSpec& spec);

struct SplitConfig {
  std::size_t per_kind = 20;
  std::size_t mixtures = 0;  // random two-kind mixture clips
  std::uint64_t seed_begin = 0;

  std::size_t clip_count() const { return per_kind * kAllKinds.size() + mixtures; }
};

struct DatasetConfig {
  SplitConfig train{60, 200, 1'000'000};
  SplitConfig val{20, 40, 2'000'000};
  SplitConfig test{20, 40, 3'000'000};
  double clip_seconds = 2.0;
  int sample_rate = 8000;
};

struct Clip {
  std::string path;  // relative to the dataset root
  Waveform audio;
  std::uint32_t tag_bits = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  TagVocabulary vocab = TagVocabulary::standard();
  std::vector<Clip> train, val, test;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

// ConfigError for overlapping split seed ranges or empty config.
Dataset build_dataset(const DatasetConfig& cfg);

// One manifest line per clip: path, sr, n_samples, tag bitmask (hex), seed.
std::string manifest_text(const Dataset& ds);
void write_dataset(const Dataset& ds, const std::filesystem::path& root);
Dataset read_dataset(const std::filesystem::path& root);

// Two-source separation test mixtures with per-stem references on disk as
// <root>/<id>/mixture.wav and <root>/<id>/<tag>.wav.
struct EvalItem {
  std::string id;
  Mixture mix;
};

struct EvalSetConfig {
  std::vector<std::pair<SourceKind, SourceKind>> pairs{{SourceKind::tonal_harmonic, SourceKind::percussive}};
  std::size_t per_pair = 20;
  double duration_s = 4.0;
  int sample_rate = 8000;
  std::uint64_t seed_begin = 9'000'000;
};

std::vector<EvalItem> build_eval_set(const EvalSetConfig& cfg);
void write_eval_set(const std::vector<EvalItem>& items, const std::filesystem::path& root);

}  // namespace latmask::data
