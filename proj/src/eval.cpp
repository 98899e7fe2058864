#include "latmask/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "latmask/checkpoint.hpp"
#include "latmask/dsp.hpp"
#include "latmask/errors.hpp"
#include "latmask/wav.hpp"

namespace latmask::eval {

namespace fs = std::filesystem;

namespace {

double clamp_db(double v) { return std::clamp(v, -kClampDb, kClampDb); }

void check_consistent(const std::vector<Waveform>& sources, const Waveform& mixture) {
  if (sources.empty()) throw ContractError("irm_oracle: no sources");
  double err = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    double sum = 0.0;
    for (const auto& s : sources) {
      if (s.size() != mixture.size()) throw ContractError("irm_oracle: source length differs from the mixture");
      sum += s.samples[i];
    }
    const double x = mixture.samples[i];
    err += (sum - x) * (sum - x);
    norm += x * x;
  }
  if (err > 1e-10 * norm) throw ContractError("irm_oracle: sources do not sum to the mixture");
}

std::string csv_number(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string json_field(const nlohmann::json& conf, const char* key) {
  if (!conf.contains(key)) return "";
  const auto& v = conf.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

double sdr(const Waveform& reference, const Waveform& estimate) {
  if (reference.size() != estimate.size()) {
    throw ContractError("sdr: reference has " + std::to_string(reference.size()) + " samples, estimate " +
                        std::to_string(estimate.size()));
  }
  double ss = 0.0, se = 0.0, ee = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double s = reference.samples[i], e = estimate.samples[i];
    ss += s * s;
    se += s * e;
    ee += e * e;
  }
  if (ss == 0.0) throw ContractError("sdr: reference is all zeros");
  if (ee == 0.0) return -kClampDb;
  const double a = se / ss;
  double target = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = a * reference.samples[i];
    const double n = estimate.samples[i] - t;
    target += t * t;
    noise += n * n;
  }
  if (noise == 0.0) return kClampDb;
  if (target == 0.0) return -kClampDb;
  return clamp_db(10.0 * std::log10(target / noise));
}

double sdr_improvement(const Waveform& reference, const Waveform& mixture, const Waveform& estimate) {
  return sdr(reference, estimate) - sdr(reference, mixture);
}

std::vector<NDArray> irm_masks(const std::vector<Waveform>& sources, const Waveform& mixture, std::size_t fft_size,
                               double eps) {
  check_consistent(sources, mixture);
  const dsp::StftPlan plan(dsp::hann_config(fft_size));
  ad::Tape t;
  std::vector<NDArray> mags;
  for (const auto& s : sources) mags.push_back(dsp::magnitude(dsp::stft(t.constant(to_array(s)), plan)).value());
  NDArray total(mags[0].shape());
  for (const auto& m : mags)
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += m[i];
  std::vector<NDArray> masks;
  for (const auto& m : mags) {
    NDArray mask(m.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = m[i] / (total[i] + eps);
    masks.push_back(std::move(mask));
  }
  return masks;
}

OracleResult irm_oracle(const std::vector<Waveform>& sources, const Waveform& mixture, std::size_t fft_size,
                        double eps) {
  const auto masks = irm_masks(sources, mixture, fft_size, eps);
  const dsp::StftPlan plan(dsp::hann_config(fft_size));
  ad::Tape t;
  const dsp::Spectrogram x = dsp::stft(t.constant(to_array(mixture)), plan);
  OracleResult r;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const dsp::Mask mask{t.constant(masks[i]), eps};
    Waveform est = to_waveform(dsp::istft(dsp::apply_mask(mask, x), plan, mixture.size()).value(),
                               mixture.sample_rate);
    r.sdr_db.push_back(sdr(sources[i], est));
    r.sdri_db.push_back(r.sdr_db.back() - sdr(sources[i], mixture));
    r.estimates.push_back(std::move(est));
  }
  return r;
}

std::vector<SourceSummary> EvalReport::summaries() const {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_tag;
  for (const auto& row : rows) {
    by_tag[row.source_tag].first.push_back(row.sdri_db);
    by_tag[row.source_tag].second.push_back(row.oracle_sdri_db);
  }
  std::vector<SourceSummary> out;
  for (const auto& [tag, vals] : by_tag) {
    out.push_back({tag, vals.first.size(), mean(vals.first), median(vals.first), mean(vals.second)});
  }
  return out;
}

EvalReport evaluate_run(const fs::path& results_dir, const fs::path& stems_dir, std::size_t oracle_fft) {
  if (!fs::is_directory(results_dir)) throw ReportError("results directory " + results_dir.string() + " not found");
  struct Pending {
    std::string id, tag;
    fs::path estimate;
  };
  std::vector<Pending> pending;
  for (const auto& dir : fs::directory_iterator(results_dir)) {
    if (!dir.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(dir.path())) {
      if (f.path().extension() != ".wav") continue;
      pending.push_back({dir.path().filename().string(), f.path().stem().string(), f.path()});
    }
  }
  std::sort(pending.begin(), pending.end(),
            [](const Pending& a, const Pending& b) { return std::tie(a.id, a.tag) < std::tie(b.id, b.tag); });

  std::vector<std::string> missing;
  for (const auto& p : pending) {
    for (const fs::path& need : {stems_dir / p.id / (p.tag + ".wav"), stems_dir / p.id / "mixture.wav"}) {
      if (!fs::exists(need)) missing.push_back(need.string());
    }
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw ReportError("missing reference stems:" + list);
  }

  EvalReport report;
  std::string configs;
  std::map<std::string, std::map<std::string, double>> oracle_cache;
  for (const auto& p : pending) {
    const Waveform mixture = wav::read(stems_dir / p.id / "mixture.wav");
    const Waveform reference = wav::read(stems_dir / p.id / (p.tag + ".wav"));
    const Waveform estimate = wav::read(p.estimate);

    if (!oracle_cache.contains(p.id)) {
      std::vector<std::string> tags;
      std::vector<Waveform> stems;
      std::vector<fs::path> files;
      for (const auto& f : fs::directory_iterator(stems_dir / p.id))
        if (f.path().extension() == ".wav" && f.path().stem() != "mixture") files.push_back(f.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        tags.push_back(f.stem().string());
        stems.push_back(wav::read(f));
      }
      const OracleResult o = irm_oracle(stems, mixture, oracle_fft);
      for (std::size_t i = 0; i < tags.size(); ++i) oracle_cache[p.id][tags[i]] = o.sdri_db[i];
    }

    EvalRow row;
    row.mixture_id = p.id;
    row.source_tag = p.tag;
    row.sdr_est_db = sdr(reference, estimate);
    row.sdr_mix_db = sdr(reference, mixture);
    row.sdri_db = row.sdr_est_db - row.sdr_mix_db;
    row.oracle_sdri_db = oracle_cache[p.id][p.tag];

    fs::path record = p.estimate;
    record.replace_extension(".json");
    if (fs::exists(record)) {
      std::ifstream f(record);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::exception& e) {
        throw ReportError(record.string() + ": " + e.what());
      }
      const nlohmann::json conf = j.value("config", nlohmann::json::object());
      row.steps = json_field(conf, "steps");
      row.lr = json_field(conf, "learning_rate");
      row.fft_sizes = json_field(conf, "fft_sizes");
      row.seed = json_field(conf, "seed");
      configs += conf.dump() + "\n";
    }
    report.rows.push_back(std::move(row));
  }
  report.config_digest = ckpt::sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(configs.data()), configs.size()));
  return report;
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "mixture_id,source_tag,sdr_est_db,sdr_mix_db,sdri_db,oracle_sdri_db,steps,lr,fft_sizes,seed\n";
  for (const auto& row : r.rows) {
    os << row.mixture_id << ',' << row.source_tag << ',' << csv_number(row.sdr_est_db) << ','
       << csv_number(row.sdr_mix_db) << ',' << csv_number(row.sdri_db) << ',' << csv_number(row.oracle_sdri_db)
       << ',' << row.steps << ',' << row.lr << ",\"" << row.fft_sizes << "\"," << row.seed << '\n';
  }
  return os.str();
}

std::string summary_text(const EvalReport& r) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  for (const auto& s : r.summaries()) {
    os << s.source_tag << ": n=" << s.count << " mean SDRi " << s.mean_sdri_db << " dB, median "
       << s.median_sdri_db << " dB, oracle mean " << s.mean_oracle_sdri_db << " dB\n";
  }
  return os.str();
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace latmask::eval
