#include "latmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "latmask/errors.hpp"
#include "latmask/random.hpp"
#include "latmask/wav.hpp"

namespace latmask::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kPeak = 0.5;
constexpr double kMaxPartialHz = 3500.0;

// RBJ band-pass (constant 0 dB peak gain).
class BandPass {
 public:
  BandPass(double centre_hz, double q, int sr) {
    const double w0 = kTwoPi * centre_hz / sr;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w0) / a0;
    a2_ = (1.0 - alpha) / a0;
  }

  double operator()(double x) {
    const double y = b0_ * x + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double b0_, b2_, a1_, a2_;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

std::size_t to_samples(double seconds, int sr) {
  return static_cast<std::size_t>(std::llround(seconds * sr));
}

void synth_tonal(Rng& rng, std::vector<double>& out, int sr) {
  const double dur = static_cast<double>(out.size()) / sr;
  const int notes = std::max(1, static_cast<int>(std::lround(dur * rng.uniform(1.0, 2.0))));
  for (int n = 0; n < notes; ++n) {
    const double onset = rng.uniform(0.0, std::max(0.0, dur - 0.3));
    const double f0 = 110.0 * std::pow(2.0, rng.uniform(0.0, 28.0) / 12.0);
    const double tau = rng.uniform(0.25, 0.7);
    const double amp = rng.uniform(0.6, 1.0);
    std::vector<double> phases;
    for (int h = 1; h * f0 < kMaxPartialHz; ++h) phases.push_back(rng.uniform(0.0, kTwoPi));
    const std::size_t start = to_samples(onset, sr);
    for (std::size_t i = start; i < out.size(); ++i) {
      const double t = static_cast<double>(i - start) / sr;
      const double env = std::min(1.0, t / 0.005) * std::exp(-t / tau);
      if (t > 0.005 && env < 1e-4) break;
      double v = 0.0;
      for (std::size_t h = 0; h < phases.size(); ++h) {
        const double k = static_cast<double>(h + 1);
        v += std::sin(kTwoPi * k * f0 * t + phases[h]) / std::pow(k, 1.3);
      }
      out[i] += amp * env * v;
    }
  }
}

void synth_percussive(Rng& rng, std::vector<double>& out, int sr) {
  const double dur = static_cast<double>(out.size()) / sr;
  const int hits = std::max(2, static_cast<int>(std::lround(dur * rng.uniform(3.0, 6.0))));
  for (int n = 0; n < hits; ++n) {
    const std::size_t start = to_samples(rng.uniform(0.0, std::max(0.0, dur - 0.05)), sr);
    const double tau = rng.uniform(0.008, 0.03);
    const double amp = rng.uniform(0.5, 1.0);
    BandPass bp(rng.uniform(800.0, 3000.0), 0.7, sr);
    const double click = rng.uniform(0.2, 0.6);
    const std::size_t len = std::min(out.size() - start, to_samples(6.0 * tau, sr));
    for (std::size_t i = 0; i < len; ++i) {
      const double t = static_cast<double>(i) / sr;
      const double env = std::min(1.0, t / 0.001) * std::exp(-t / tau);
      const double noise = rng.uniform(-1.0, 1.0);
      out[start + i] += amp * env * (bp(noise) + click * noise);
    }
  }
}

void synth_saw(Rng& rng, std::vector<double>& out, int sr) {
  const std::size_t total = out.size();
  const int notes = 1 + static_cast<int>(rng.below(2));
  const std::size_t seg = total / static_cast<std::size_t>(notes);
  for (int n = 0; n < notes; ++n) {
    const std::size_t begin = static_cast<std::size_t>(n) * seg;
    const std::size_t end = n + 1 == notes ? total : begin + seg;
    const double f0 = 110.0 * std::pow(2.0, rng.uniform(0.0, 24.0) / 12.0);
    const double rate = rng.uniform(4.5, 6.0);
    const double depth = 0.006;
    const double amp = rng.uniform(0.6, 1.0);
    const int harmonics = static_cast<int>(kMaxPartialHz / (f0 * (1.0 + depth)));
    const double attack = 0.08, release = 0.1;
    const double len_s = static_cast<double>(end - begin) / sr;
    double phase = rng.uniform(0.0, kTwoPi);
    for (std::size_t i = begin; i < end; ++i) {
      const double t = static_cast<double>(i - begin) / sr;
      const double f = f0 * (1.0 + depth * std::sin(kTwoPi * rate * t));
      phase += kTwoPi * f / sr;
      double v = 0.0;
      for (int h = 1; h <= harmonics; ++h) v += std::sin(h * phase) / h;
      const double env = std::min({1.0, t / attack, std::max(0.0, (len_s - t) / release)});
      out[i] += amp * env * v;
    }
  }
}

void synth_bell(Rng& rng, std::vector<double>& out, int sr) {
  static constexpr std::array<double, 3> kRatios = {1.41, 2.76, 3.53};
  const double dur = static_cast<double>(out.size()) / sr;
  const int notes = std::max(1, static_cast<int>(std::lround(dur * rng.uniform(1.0, 2.0))));
  for (int n = 0; n < notes; ++n) {
    const std::size_t start = to_samples(rng.uniform(0.0, std::max(0.0, dur - 0.3)), sr);
    const double fc = 200.0 * std::pow(2.0, rng.uniform(0.0, 30.0) / 12.0);
    const double fm = fc * kRatios[rng.below(kRatios.size())];
    const double index0 = rng.uniform(2.0, 4.0);
    const double index_tau = rng.uniform(0.1, 0.3);
    const double tau = rng.uniform(0.6, 1.2);
    const double amp = rng.uniform(0.6, 1.0);
    for (std::size_t i = start; i < out.size(); ++i) {
      const double t = static_cast<double>(i - start) / sr;
      const double env = std::min(1.0, t / 0.002) * std::exp(-t / tau);
      if (t > 0.002 && env < 1e-4) break;
      const double index = index0 * std::exp(-t / index_tau);
      out[i] += amp * env * std::sin(kTwoPi * fc * t + index * std::sin(kTwoPi * fm * t));
    }
  }
}

void synth_breath(Rng& rng, std::vector<double>& out, int sr) {
  const double dur = static_cast<double>(out.size()) / sr;
  const int swells = 1 + static_cast<int>(rng.below(2));
  for (int n = 0; n < swells; ++n) {
    const double len = rng.uniform(std::min(0.8, dur), dur);
    const double onset = rng.uniform(0.0, dur - len);
    BandPass bp(rng.uniform(300.0, 1500.0), 1.0, sr);
    const double amp = rng.uniform(0.6, 1.0);
    const std::size_t start = to_samples(onset, sr);
    const std::size_t count = std::min(out.size() - start, to_samples(len, sr));
    for (std::size_t i = 0; i < count; ++i) {
      const double x = static_cast<double>(i) / static_cast<double>(count);
      const double env = 0.5 - 0.5 * std::cos(kTwoPi * x);
      out[start + i] += amp * env * bp(rng.uniform(-1.0, 1.0));
    }
  }
}

std::uint64_t kind_salt(SourceKind kind) { return 0x1000 + static_cast<std::uint64_t>(kind); }

std::string clip_name(std::string_view split, std::uint64_t seed) {
  return std::string(split) + "/clip_" + std::to_string(seed) + ".wav";
}

std::vector<Clip> build_split(std::string_view split, const SplitConfig& sc, double seconds, int sr) {
  std::vector<Clip> clips;
  const std::size_t singles = sc.per_kind * kAllKinds.size();
  for (std::size_t i = 0; i < sc.clip_count(); ++i) {
    const std::uint64_t seed = sc.seed_begin + i;
    Clip c;
    c.seed = seed;
    c.path = clip_name(split, seed);
    if (i < singles) {
      const SourceKind kind = kAllKinds[i % kAllKinds.size()];
      c.audio = synth_source(kind, seed, seconds, sr);
      c.tag_bits = 1u << static_cast<unsigned>(kind);
    } else {
      Rng rng(derive_seed(seed, 1));
      const std::size_t a = rng.below(kAllKinds.size());
      const std::size_t b = (a + 1 + rng.below(kAllKinds.size() - 1)) % kAllKinds.size();
      MixtureSpec spec;
      spec.duration_s = seconds;
      spec.sample_rate = sr;
      spec.sources.push_back({kAllKinds[a], rng.uniform(0.5, 1.0), derive_seed(seed, 2)});
      spec.sources.push_back({kAllKinds[b], rng.uniform(0.5, 1.0), derive_seed(seed, 3)});
      Mixture m = make_mixture(spec);
      c.audio = std::move(m.mixture);
      c.tag_bits = m.tags.bitmask();
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

}  // namespace

std::string_view kind_name(SourceKind kind) {
  switch (kind) {
    case SourceKind::tonal_harmonic: return "tonal_harmonic";
    case SourceKind::percussive: return "percussive";
    case SourceKind::sustained_saw: return "sustained_saw";
    case SourceKind::bell_fm: return "bell_fm";
    case SourceKind::breath_noise: return "breath_noise";
  }
  return "?";
}

SourceKind parse_kind(std::string_view name) {
  for (SourceKind k : kAllKinds)
    if (kind_name(k) == name) return k;
  throw ConfigError("unknown source kind '" + std::string(name) + "'");
}

TagVocabulary::TagVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty() || names_[i].find(',') != std::string::npos) {
      throw ConfigError("invalid tag name '" + names_[i] + "'");
    }
    for (std::size_t j = 0; j < i; ++j)
      if (names_[i] == names_[j]) throw ConfigError("duplicate tag '" + names_[i] + "'");
  }
}

TagVocabulary TagVocabulary::standard() {
  std::vector<std::string> names;
  for (SourceKind k : kAllKinds) names.emplace_back(kind_name(k));
  return TagVocabulary(std::move(names));
}

std::size_t TagVocabulary::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw ConfigError("tag '" + std::string(name) + "' is not in the vocabulary (" + serialize() + ")");
}

std::string TagVocabulary::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (i) out += ',';
    out += names_[i];
  }
  return out;
}

TagVocabulary TagVocabulary::parse(std::string_view text) {
  std::vector<std::string> names;
  std::size_t start = 0;
  while (start <= text.size() && !text.empty()) {
    const std::size_t comma = text.find(',', start);
    const std::size_t end = comma == std::string_view::npos ? text.size() : comma;
    names.emplace_back(text.substr(start, end - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return TagVocabulary(std::move(names));
}

bool TagVector::is_multi_hot() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

std::uint32_t TagVector::bitmask() const {
  std::uint32_t bits = 0;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] >= 0.5) bits |= 1u << i;
  return bits;
}

TagVector TagVector::from_bitmask(std::uint32_t bits, std::size_t k) {
  TagVector t;
  t.values.resize(k);
  for (std::size_t i = 0; i < k; ++i) t.values[i] = (bits >> i) & 1u ? 1.0 : 0.0;
  return t;
}

TagVector TagVector::from_names(const std::vector<std::string>& names, const TagVocabulary& vocab) {
  TagVector t;
  t.values.assign(vocab.size(), 0.0);
  for (const auto& n : names) t.values[vocab.index_of(n)] = 1.0;
  return t;
}

Waveform synth_source(SourceKind kind, std::uint64_t seed, double duration_s, int sample_rate) {
  if (!(duration_s >= 0.5)) throw ConfigError("source duration must be at least 0.5 s");
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
  std::vector<double> buf(to_samples(duration_s, sample_rate), 0.0);
  Rng rng(derive_seed(seed, kind_salt(kind)));
  switch (kind) {
    case SourceKind::tonal_harmonic: synth_tonal(rng, buf, sample_rate); break;
    case SourceKind::percussive: synth_percussive(rng, buf, sample_rate); break;
    case SourceKind::sustained_saw: synth_saw(rng, buf, sample_rate); break;
    case SourceKind::bell_fm: synth_bell(rng, buf, sample_rate); break;
    case SourceKind::breath_noise: synth_breath(rng, buf, sample_rate); break;
    default: throw ConfigError("unknown source kind");
  }
  double peak = 0.0;
  for (double v : buf) peak = std::max(peak, std::abs(v));
  const double gain = peak > 0.0 ? kPeak / peak : 0.0;
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) w.samples[i] = static_cast<float>(buf[i] * gain);
  return w;
}

Mixture make_mixture(const MixtureSpec& spec) {
  if (spec.sources.empty()) throw ConfigError("mixture needs at least one source");
  for (const auto& e : spec.sources)
    if (!(e.gain > 0.0)) throw ConfigError("mixture gains must be positive");

  const TagVocabulary vocab = TagVocabulary::standard();
  std::vector<std::vector<double>> parts;
  for (const auto& e : spec.sources) {
    const Waveform s = synth_source(e.kind, e.seed, spec.duration_s, spec.sample_rate);
    std::vector<double> p(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) p[i] = e.gain * static_cast<double>(s.samples[i]);
    parts.push_back(std::move(p));
  }
  const std::size_t len = parts.front().size();
  double peak = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    double acc = 0.0;
    for (const auto& p : parts) acc += p[i];
    peak = std::max(peak, std::abs(acc));
  }

  Mixture m;
  m.rescale = peak > 0.99 ? 0.99 / peak : 1.0;
  m.tags.values.assign(vocab.size(), 0.0);
  for (std::size_t s = 0; s < parts.size(); ++s) {
    Waveform stem;
    stem.sample_rate = spec.sample_rate;
    stem.samples.resize(len);
    for (std::size_t i = 0; i < len; ++i) stem.samples[i] = static_cast<float>(parts[s][i] * m.rescale);
    m.stems.push_back(std::move(stem));
    m.kinds.push_back(spec.sources[s].kind);
    m.effective_gains.push_back(spec.sources[s].gain * m.rescale);
    const auto bit = static_cast<std::uint32_t>(spec.sources[s].kind);
    m.stem_tags.push_back(TagVector::from_bitmask(1u << bit, vocab.size()));
    m.tags.values[bit] = 1.0;
  }
  m.mixture.sample_rate = spec.sample_rate;
  m.mixture.samples.resize(len);
  for (std::size_t i = 0; i < len; ++i) {
    double acc = 0.0;
    for (const auto& stem : m.stems) acc += static_cast<double>(stem.samples[i]);
    m.mixture.samples[i] = static_cast<float>(acc);
  }
  return m;
}

Dataset build_dataset(const DatasetConfig& cfg) {
  const std::array<std::pair<const char*, const SplitConfig*>, 3> splits = {
      {{"train", &cfg.train}, {"val", &cfg.val}, {"test", &cfg.test}}};
  for (std::size_t a = 0; a < splits.size(); ++a) {
    for (std::size_t b = a + 1; b < splits.size(); ++b) {
      const SplitConfig& x = *splits[a].second;
      const SplitConfig& y = *splits[b].second;
      const bool disjoint = x.seed_begin + x.clip_count() <= y.seed_begin ||
                            y.seed_begin + y.clip_count() <= x.seed_begin;
      if (!disjoint && x.clip_count() > 0 && y.clip_count() > 0) {
        throw ConfigError(std::string("seed ranges of splits '") + splits[a].first + "' and '" +
                          splits[b].first + "' overlap");
      }
    }
  }
  if (cfg.train.clip_count() == 0) throw ConfigError("dataset config produces no training clips");

  Dataset ds;
  ds.train = build_split("train", cfg.train, cfg.clip_seconds, cfg.sample_rate);
  ds.val = build_split("val", cfg.val, cfg.clip_seconds, cfg.sample_rate);
  ds.test = build_split("test", cfg.test, cfg.clip_seconds, cfg.sample_rate);
  return ds;
}

std::string manifest_text(const Dataset& ds) {
  std::ostringstream os;
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const Clip& c : *split) {
      char hex[16];
      std::snprintf(hex, sizeof hex, "%x", c.tag_bits);
      os << c.path << '\t' << c.audio.sample_rate << '\t' << c.audio.size() << '\t' << hex << '\t' << c.seed
         << '\n';
    }
  }
  return os.str();
}

void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const Clip& c : *split) wav::write(root / c.path, c.audio, wav::Encoding::float32);
  std::filesystem::create_directories(root);
  std::ofstream m(root / "manifest.tsv", std::ios::trunc);
  if (!m) throw FormatError("cannot write manifest in " + root.string());
  m << manifest_text(ds);
  std::ofstream v(root / "vocabulary.txt", std::ios::trunc);
  v << ds.vocab.serialize() << '\n';
}

Dataset read_dataset(const std::filesystem::path& root) {
  std::ifstream m(root / "manifest.tsv");
  if (!m) throw FormatError("no manifest.tsv in " + root.string());
  Dataset ds;
  std::ifstream v(root / "vocabulary.txt");
  if (v) {
    std::string line;
    std::getline(v, line);
    ds.vocab = TagVocabulary::parse(line);
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(m, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    Clip c;
    std::string sr, n, bits, seed;
    if (!std::getline(row, c.path, '\t') || !std::getline(row, sr, '\t') || !std::getline(row, n, '\t') ||
        !std::getline(row, bits, '\t') || !std::getline(row, seed)) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected 5 tab-separated fields");
    }
    c.tag_bits = static_cast<std::uint32_t>(std::stoul(bits, nullptr, 16));
    c.seed = std::stoull(seed);
    c.audio = wav::read(root / c.path);
    if (c.audio.size() != std::stoull(n) || c.audio.sample_rate != std::stoi(sr)) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": audio does not match " + c.path);
    }
    const std::string split = c.path.substr(0, c.path.find('/'));
    if (split == "train") ds.train.push_back(std::move(c));
    else if (split == "val") ds.val.push_back(std::move(c));
    else if (split == "test") ds.test.push_back(std::move(c));
    else throw FormatError("manifest line " + std::to_string(line_no) + ": unknown split '" + split + "'");
  }
  return ds;
}

std::vector<EvalItem> build_eval_set(const EvalSetConfig& cfg) {
  std::vector<EvalItem> items;
  std::size_t index = 0;
  for (const auto& [a, b] : cfg.pairs) {
    if (a == b) throw ConfigError("evaluation pair needs two different source kinds");
    for (std::size_t i = 0; i < cfg.per_pair; ++i, ++index) {
      const std::uint64_t seed = cfg.seed_begin + index;
      MixtureSpec spec;
      spec.duration_s = cfg.duration_s;
      spec.sample_rate = cfg.sample_rate;
      spec.sources.push_back({a, 1.0, derive_seed(seed, 1)});
      spec.sources.push_back({b, 1.0, derive_seed(seed, 2)});
      char id[32];
      std::snprintf(id, sizeof id, "mix_%04zu", index);
      items.push_back({id, make_mixture(spec)});
    }
  }
  return items;
}

void write_eval_set(const std::vector<EvalItem>& items, const std::filesystem::path& root) {
  for (const auto& item : items) {
    const auto dir = root / item.id;
    wav::write(dir / "mixture.wav", item.mix.mixture);
    for (std::size_t s = 0; s < item.mix.stems.size(); ++s) {
      wav::write(dir / (std::string(kind_name(item.mix.kinds[s])) + ".wav"), item.mix.stems[s]);
    }
  }
}

}  // namespace latmask::data
