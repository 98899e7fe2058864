#pragma once

// Scale-invariant SDR, SDR improvement and an ideal-ratio-mask reference.

#include <filesystem>
#include <string>
#include <vector>

#include "latmask/ndarray.hpp"
#include "latmask/waveform.hpp"

namespace latmask::eval {

inline constexpr double kClampDb = 60.0;

// 10 log10(|a s|^2 / |e - a s|^2) with a = <e, s> / <s, s>, clamped to
// +-60 dB. ContractError for unequal lengths or an all-zero reference.
double sdr(const Waveform& reference, const Waveform& estimate);

// sdr(reference, estimate) - sdr(reference, mixture)
double sdr_improvement(const Waveform& reference, const Waveform& mixture, const Waveform& estimate);

struct OracleResult {
  std::vector<Waveform> estimates;
  std::vector<double> sdr_db;
  std::vector<double> sdri_db;
};

// Masks |S_i| / (sum_j |S_j| + eps) per source; ContractError unless the
// sources sum to the mixture within 1e-5 relative.
std::vector<NDArray> irm_masks(const std::vector<Waveform>& sources, const Waveform& mixture,
                               std::size_t fft_size = 1024, double eps = 1e-8);
// Applies the masks to the mixture STFT with mixture phase and scores each
// source.
OracleResult irm_oracle(const std::vector<Waveform>& sources, const Waveform& mixture, std::size_t fft_size = 1024,
                        double eps = 1e-8);

struct EvalRow {
  std::string mixture_id;
  std::string source_tag;
  double sdr_est_db = 0.0;
  double sdr_mix_db = 0.0;
  double sdri_db = 0.0;
  double oracle_sdri_db = 0.0;
  std::string steps, lr, fft_sizes, seed;  // from the run record, empty if absent
};

struct SourceSummary {
  std::string source_tag;
  std::size_t count = 0;
  double mean_sdri_db = 0.0;
  double median_sdri_db = 0.0;
  double mean_oracle_sdri_db = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string config_digest;  // SHA-256 over the run records' configs

  std::vector<SourceSummary> summaries() const;
};

// Estimates are <results>/<id>/<tag>.wav with an optional <tag>.json run
// record; references are <stems>/<id>/<tag>.wav beside <stems>/<id>/mixture.wav.
// ReportError listing every missing reference.
EvalReport evaluate_run(const std::filesystem::path& results_dir, const std::filesystem::path& stems_dir,
                        std::size_t oracle_fft = 1024);

// Header: mixture_id,source_tag,sdr_est_db,sdr_mix_db,sdri_db,oracle_sdri_db,steps,lr,fft_sizes,seed
std::string report_csv(const EvalReport& r);
std::string summary_text(const EvalReport& r);

double mean(const std::vector<double>& v);
double median(std::vector<double> v);

}  // namespace latmask::eval
