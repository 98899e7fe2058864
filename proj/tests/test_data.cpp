#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "latmask/data.hpp"
#include "latmask/dsp.hpp"
#include "latmask/errors.hpp"
#include "latmask/wav.hpp"

using namespace latmask;
using namespace latmask::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("latmask_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Share of 10 ms blocks needed to hold 95% of the clip's energy.
double energy_spread(const Waveform& w) {
  const std::size_t block = static_cast<std::size_t>(w.sample_rate / 100);
  std::vector<double> e;
  for (std::size_t b = 0; b + block <= w.size(); b += block) {
    double acc = 0.0;
    for (std::size_t i = b; i < b + block; ++i) acc += static_cast<double>(w.samples[i]) * w.samples[i];
    e.push_back(acc);
  }
  std::sort(e.begin(), e.end(), std::greater<>());
  const double total = std::accumulate(e.begin(), e.end(), 0.0);
  double acc = 0.0;
  std::size_t n = 0;
  while (acc < 0.95 * total) acc += e[n++];
  return static_cast<double>(n) / static_cast<double>(e.size());
}

// Geometric over arithmetic mean of the frame-averaged power spectrum.
double spectral_flatness(const Waveform& w) {
  dsp::StftPlan plan(dsp::hann_config(1024));
  ad::Tape t;
  const NDArray mag = dsp::magnitude(dsp::stft(t.constant(to_array(w)), plan)).value();
  std::vector<double> power(mag.dim(1), 0.0);
  for (std::size_t f = 0; f < mag.dim(0); ++f)
    for (std::size_t k = 0; k < mag.dim(1); ++k) power[k] += mag.at(f, k) * mag.at(f, k);
  double log_sum = 0.0, sum = 0.0;
  for (double p : power) {
    log_sum += std::log(p + 1e-20);
    sum += p;
  }
  const double n = static_cast<double>(power.size());
  return std::exp(log_sum / n) / (sum / n);
}

double sdr_db(const Waveform& ref, const Waveform& est) {
  double rr = 0.0, re = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    rr += static_cast<double>(ref.samples[i]) * ref.samples[i];
    re += static_cast<double>(ref.samples[i]) * est.samples[i];
  }
  const double alpha = re / rr;
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double s = alpha * ref.samples[i];
    sig += s * s;
    err += (est.samples[i] - s) * (est.samples[i] - s);
  }
  return 10.0 * std::log10(sig / err);
}

}  // namespace

TEST_CASE("wav float32 round trip is bit exact") {
  const fs::path dir = scratch("wav_f32");
  Waveform w;
  w.sample_rate = 11025;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(std::sin(0.01f * i) * 0.9f + 1e-7f * i);
  w.samples.push_back(-1.0f);
  wav::write(dir / "a.wav", w, wav::Encoding::float32);
  const Waveform r = wav::read(dir / "a.wav");
  CHECK(r == w);
  CHECK(fs::file_size(dir / "a.wav") == 44 + 4 * w.size());
}

TEST_CASE("wav pcm16 round trip within one quantisation step") {
  const fs::path dir = scratch("wav_pcm");
  Waveform w = synth_source(SourceKind::bell_fm, 3, 1.0);
  w.samples[0] = 1.0f;
  w.samples[1] = -1.0f;
  wav::write(dir / "a.wav", w, wav::Encoding::pcm16);
  const Waveform r = wav::read(dir / "a.wav");
  REQUIRE(r.size() == w.size());
  CHECK(r.sample_rate == w.sample_rate);
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, std::abs(double(r.samples[i]) - w.samples[i]));
  CHECK(worst <= 1.0 / 32768.0);
}

TEST_CASE("wav reader rejects malformed files and names the chunk") {
  const fs::path dir = scratch("wav_bad");
  Waveform w{std::vector<float>(100, 0.25f), 8000};
  wav::write(dir / "ok.wav", w);

  std::ifstream in(dir / "ok.wav", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto dump = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    return dir / name;
  };
  auto message_of = [](const fs::path& p) {
    try {
      wav::read(p);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };

  const std::string truncated = message_of(dump("trunc.wav", bytes.substr(0, bytes.size() - 10)));
  CHECK(truncated.find("'data' chunk") != std::string::npos);

  std::string stereo = bytes;
  stereo[22] = 2;
  CHECK(message_of(dump("stereo.wav", stereo)).find("'fmt ' chunk") != std::string::npos);

  std::string alaw = bytes;
  alaw[20] = 6;
  CHECK(message_of(dump("alaw.wav", alaw)).find("unsupported codec") != std::string::npos);

  CHECK_THROWS_AS(wav::read(dump("junk.wav", "hello")), FormatError);
  CHECK_THROWS_AS(wav::read(dir / "missing.wav"), FormatError);
  CHECK(FormatError("x").exit_code() == ExitCode::io_error);
}

TEST_CASE("synth_source is deterministic, sized and normalised") {
  for (SourceKind k : kAllKinds) {
    const Waveform a = synth_source(k, 11, 2.0);
    const Waveform b = synth_source(k, 11, 2.0);
    CHECK(a == b);
    CHECK(a.size() == 16000);
    double peak = 0.0;
    for (float v : a.samples) peak = std::max(peak, std::abs(double(v)));
    CHECK(peak == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(synth_source(k, 12, 2.0) != a);
  }
  CHECK_THROWS_AS(synth_source(SourceKind::percussive, 1, 0.4), ConfigError);
  CHECK_THROWS_AS(parse_kind("kazoo"), ConfigError);
  CHECK(parse_kind("bell_fm") == SourceKind::bell_fm);
}

TEST_CASE("percussive and tonal kinds have distinct envelopes and spectra") {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const Waveform perc = synth_source(SourceKind::percussive, seed, 2.0);
    const Waveform tonal = synth_source(SourceKind::tonal_harmonic, seed, 2.0);
    const double perc_spread = energy_spread(perc);
    const double tonal_spread = energy_spread(tonal);
    CAPTURE(seed);
    CAPTURE(perc_spread);
    CAPTURE(tonal_spread);
    CHECK(perc_spread <= 0.25);
    CHECK(tonal_spread > perc_spread);
    CHECK(spectral_flatness(tonal) < spectral_flatness(perc));
  }
}

TEST_CASE("make_mixture sums stems and records tags") {
  MixtureSpec single;
  single.duration_s = 1.0;
  single.sources = {{SourceKind::sustained_saw, 1.0, 5}};
  const Mixture one = make_mixture(single);
  CHECK(one.mixture == one.stems[0]);
  CHECK(one.mixture == synth_source(SourceKind::sustained_saw, 5, 1.0));

  MixtureSpec spec;
  spec.sources = {{SourceKind::tonal_harmonic, 1.0, 1}, {SourceKind::percussive, 1.0, 2}};
  const Mixture m = make_mixture(spec);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < m.mixture.size(); ++i) {
    const double s = double(m.stems[0].samples[i]) + m.stems[1].samples[i];
    num += (s - m.mixture.samples[i]) * (s - m.mixture.samples[i]);
    den += double(m.mixture.samples[i]) * m.mixture.samples[i];
  }
  CHECK(std::sqrt(num / den) <= 1e-7);
  for (const auto& tv : m.stem_tags) {
    CHECK(tv.is_multi_hot());
    CHECK(std::count(tv.values.begin(), tv.values.end(), 1.0) == 1);
  }
  CHECK(m.tags.bitmask() == (m.stem_tags[0].bitmask() | m.stem_tags[1].bitmask()));

  MixtureSpec loud;
  loud.sources = {{SourceKind::sustained_saw, 3.0, 1}, {SourceKind::breath_noise, 3.0, 2}};
  const Mixture l = make_mixture(loud);
  CHECK(l.rescale < 1.0);
  double peak = 0.0;
  for (float v : l.mixture.samples) peak = std::max(peak, std::abs(double(v)));
  CHECK(peak <= 0.99 + 1e-6);
  CHECK(l.effective_gains[0] == doctest::Approx(3.0 * l.rescale));

  MixtureSpec bad;
  bad.sources = {{SourceKind::bell_fm, 0.0, 1}};
  CHECK_THROWS_AS(make_mixture(bad), ConfigError);
}

TEST_CASE("equal-gain two-source mixture scores about 0 dB for each stem") {
  // Equal peak does not mean equal power, so rescale one stem to match.
  MixtureSpec probe;
  probe.duration_s = 2.0;
  probe.sources = {{SourceKind::sustained_saw, 1.0, 3}, {SourceKind::breath_noise, 1.0, 4}};
  const Mixture p = make_mixture(probe);
  auto power = [](const Waveform& w) {
    double acc = 0.0;
    for (float v : w.samples) acc += double(v) * v;
    return acc;
  };
  MixtureSpec spec = probe;
  spec.sources[1].gain = std::sqrt(power(p.stems[0]) / power(p.stems[1]));
  const Mixture m = make_mixture(spec);
  CHECK(power(m.stems[0]) == doctest::Approx(power(m.stems[1])).epsilon(1e-4));
  CHECK(std::abs(sdr_db(m.stems[0], m.mixture)) < 0.5);
  CHECK(std::abs(sdr_db(m.stems[1], m.mixture)) < 0.5);
}

TEST_CASE("tag vocabulary and vectors") {
  const TagVocabulary v = TagVocabulary::standard();
  CHECK(v.size() == 5);
  CHECK(TagVocabulary::parse(v.serialize()) == v);
  CHECK(v.index_of("percussive") == 1);
  CHECK_THROWS_AS(v.index_of("vocals"), ConfigError);
  const TagVector t = TagVector::from_names({"percussive", "bell_fm"}, v);
  CHECK(t.bitmask() == 0b01010u);
  CHECK(TagVector::from_bitmask(0b01010u, 5).values == t.values);
  CHECK_THROWS_AS(TagVocabulary({"a", "a"}), ConfigError);
}

TEST_CASE("dataset construction, manifest and persistence") {
  DatasetConfig cfg;
  cfg.train = {2, 3, 100};
  cfg.val = {1, 2, 200};
  cfg.test = {1, 1, 300};
  cfg.clip_seconds = 0.5;
  const Dataset ds = build_dataset(cfg);
  CHECK(ds.train.size() == 13);
  CHECK(ds.val.size() == 7);
  CHECK(ds.test.size() == 6);

  const std::string manifest = manifest_text(ds);
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 26);
  CHECK(manifest.rfind("train/clip_100.wav\t8000\t4000\t1\t100\n", 0) == 0);

  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    std::uint32_t seen = 0;
    for (const Clip& c : *split) {
      seen |= c.tag_bits;
      CHECK(c.tag_bits != 0);
    }
    CHECK(seen == 0b11111u);
  }

  CHECK(manifest_text(build_dataset(cfg)) == manifest);
  const Dataset again = build_dataset(cfg);
  for (std::size_t i = 0; i < ds.train.size(); ++i) CHECK(again.train[i].audio == ds.train[i].audio);

  const fs::path dir = scratch("dataset");
  write_dataset(ds, dir);
  const Dataset loaded = read_dataset(dir);
  CHECK(manifest_text(loaded) == manifest);
  CHECK(loaded.vocab == ds.vocab);
  CHECK(loaded.test.back().audio == ds.test.back().audio);

  DatasetConfig overlap = cfg;
  overlap.val.seed_begin = 110;
  CHECK_THROWS_AS(build_dataset(overlap), ConfigError);
}

TEST_CASE("eval set layout") {
  EvalSetConfig cfg;
  cfg.per_pair = 2;
  cfg.duration_s = 1.0;
  const auto items = build_eval_set(cfg);
  REQUIRE(items.size() == 2);
  CHECK(items[0].id == "mix_0000");
  CHECK(items[0].mix.mixture.size() == 8000);
  CHECK(items[0].mix.tags.bitmask() == 0b00011u);
  const fs::path dir = scratch("evalset");
  write_eval_set(items, dir);
  CHECK(fs::exists(dir / "mix_0001" / "mixture.wav"));
  CHECK(wav::read(dir / "mix_0001" / "percussive.wav") == items[1].mix.stems[1]);
  cfg.pairs = {{SourceKind::bell_fm, SourceKind::bell_fm}};
  CHECK_THROWS_AS(build_eval_set(cfg), ConfigError);
}
