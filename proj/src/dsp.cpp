#include "latmask/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "latmask/errors.hpp"

namespace latmask::dsp {

namespace {

constexpr double kMagnitudeFloor = 1e-12;

bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

NDArray make_window(Window w, std::size_t n) {
  NDArray out(Shape{n}, 1.0);
  if (w == Window::hann) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    }
  }
  return out;
}

// Index into a length-`len` signal with repeated mirror reflection.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t len) {
  if (len == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (len - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(len)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

StftConfig hann_config(std::size_t fft_size) {
  return StftConfig{fft_size, fft_size / 4, Window::hann};
}

StftPlan::StftPlan(StftConfig config) : config_(config) {
  const std::size_t n = config_.fft_size;
  if (!is_power_of_two(n) || n < 4) {
    throw ConfigError("fft_size must be a power of two >= 4, got " + std::to_string(n));
  }
  if (config_.hop == 0 || config_.hop > n) {
    throw ConfigError("hop must be in (0, fft_size], got " + std::to_string(config_.hop));
  }
  window_ = make_window(config_.window, n);

  // Overlap-added squared window over one hop period must be constant.
  double lo = 1e300, hi = 0.0;
  for (std::size_t i = 0; i < config_.hop; ++i) {
    double acc = 0.0;
    for (std::size_t p = i; p < n; p += config_.hop) acc += window_[p] * window_[p];
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  if (lo <= 0.0 || (hi - lo) > 1e-9 * hi) {
    throw ConfigError("window/hop pair (fft " + std::to_string(n) + ", hop " +
                      std::to_string(config_.hop) + ") does not satisfy constant overlap-add");
  }

  const std::size_t f = config_.bins();
  analysis_re_ = NDArray(Shape{n, f});
  analysis_im_ = NDArray(Shape{n, f});
  synthesis_re_ = NDArray(Shape{f, n});
  synthesis_im_ = NDArray(Shape{f, n});
  for (std::size_t k = 0; k < f; ++k) {
    const double weight = (k == 0 || k == n / 2) ? 1.0 : 2.0;
    for (std::size_t t = 0; t < n; ++t) {
      // Reduce k*t mod n first so the phase stays exact for large indices.
      const double phase = 2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      const double c = std::cos(phase), s = std::sin(phase);
      analysis_re_.at(t, k) = window_[t] * c;
      analysis_im_.at(t, k) = -window_[t] * s;
      synthesis_re_.at(k, t) = weight * c * window_[t] / static_cast<double>(n);
      synthesis_im_.at(k, t) = -weight * s * window_[t] / static_cast<double>(n);
    }
  }
}

std::size_t StftPlan::frames(std::size_t signal_len) const {
  return 1 + (signal_len + config_.hop - 1) / config_.hop;
}

Spectrogram stft(ad::Var x, const StftPlan& plan) {
  if (x.value().rank() != 1 || x.value().size() == 0) {
    throw ContractError("stft expects a non-empty 1-D signal, got " + shape_str(x.shape()));
  }
  const std::size_t len = x.value().size();
  const std::size_t n = plan.config().fft_size;
  const std::size_t hop = plan.config().hop;
  const std::size_t frames = plan.frames(len);
  const auto half = static_cast<std::ptrdiff_t>(n / 2);

  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(frames * n);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto pos = static_cast<std::ptrdiff_t>(t * hop + i) - half;
      (*idx)[t * n + i] = static_cast<std::ptrdiff_t>(reflect_index(pos, len));
    }
  }
  ad::Tape& tape = x.tape();
  ad::Var framed = ad::gather(x, std::move(idx), Shape{frames, n});
  Spectrogram s;
  s.re = ad::matmul(framed, tape.constant(plan.analysis_re()));
  s.im = ad::matmul(framed, tape.constant(plan.analysis_im()));
  s.config = plan.config();
  s.signal_length = len;
  return s;
}

ad::Var istft(const Spectrogram& s, const StftPlan& plan, std::size_t target_len) {
  if (!(s.config == plan.config())) {
    throw ContractError("istft: spectrogram was computed with a different window/hop configuration");
  }
  if (s.bins() != plan.bins()) throw ContractError("istft: bin count does not match plan");
  if (target_len == 0) throw ContractError("istft: target length must be positive");
  ad::Tape& tape = s.re.tape();
  const std::size_t n = plan.config().fft_size;
  const std::size_t hop = plan.config().hop;
  const std::size_t frames = s.frames();
  const std::size_t padded_len = (frames - 1) * hop + n;

  ad::Var time_frames = ad::add(ad::matmul(s.re, tape.constant(plan.synthesis_re())),
                                ad::matmul(s.im, tape.constant(plan.synthesis_im())));

  auto ola = std::make_shared<std::vector<std::ptrdiff_t>>(frames * n);
  NDArray envelope(Shape{padded_len});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      (*ola)[t * n + i] = static_cast<std::ptrdiff_t>(t * hop + i);
      envelope[t * hop + i] += plan.window()[i] * plan.window()[i];
    }
  }
  ad::Var padded = ad::scatter_add(time_frames, std::move(ola), Shape{padded_len});

  auto trim = std::make_shared<std::vector<std::ptrdiff_t>>(target_len, -1);
  NDArray inv_env(Shape{target_len});
  for (std::size_t i = 0; i < target_len; ++i) {
    const std::size_t q = i + n / 2;
    if (i < s.signal_length && q < padded_len && envelope[q] > 1e-10) {
      (*trim)[i] = static_cast<std::ptrdiff_t>(q);
      inv_env[i] = 1.0 / envelope[q];
    }
  }
  ad::Var trimmed = ad::gather(padded, std::move(trim), Shape{target_len});
  return ad::mul(trimmed, tape.constant(std::move(inv_env)));
}

ad::Var magnitude(const Spectrogram& s) {
  return ad::sqrt(ad::add_scalar(ad::add(ad::square(s.re), ad::square(s.im)), kMagnitudeFloor));
}

Mask build_mask(ad::Var j_mag, ad::Var x_mag, double eps) {
  if (j_mag.shape() != x_mag.shape()) {
    throw ContractError("build_mask: shape mismatch " + shape_str(j_mag.shape()) + " vs " +
                        shape_str(x_mag.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("build_mask: epsilon must be positive");
  ad::Var denom = ad::add_scalar(ad::maximum(j_mag, x_mag), eps);
  return Mask{ad::div(j_mag, denom), eps};
}

Spectrogram apply_mask(const Mask& mask, const Spectrogram& x) {
  if (mask.values.shape() != x.re.shape()) {
    throw ContractError("apply_mask: mask " + shape_str(mask.values.shape()) +
                        " does not match spectrogram " + shape_str(x.re.shape()));
  }
  Spectrogram out = x;
  out.re = ad::mul(mask.values, x.re);
  out.im = ad::mul(mask.values, x.im);
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(std::size_t n_mels, std::size_t fft_size, int sample_rate)
    : n_mels_(n_mels), fft_size_(fft_size), sample_rate_(sample_rate) {
  const std::size_t bins = fft_size / 2 + 1;
  if (n_mels < 8) throw ConfigError("n_mels must be at least 8, got " + std::to_string(n_mels));
  if (n_mels > bins) {
    throw ConfigError("n_mels (" + std::to_string(n_mels) + ") exceeds the " + std::to_string(bins) +
                      " frequency bins of fft_size " + std::to_string(fft_size));
  }
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");

  const double nyquist = sample_rate / 2.0;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(fft_size);

  weights_ = NDArray(Shape{bins, n_mels});
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], centre = edges[m + 1], hi = edges[m + 2];
    double total = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > lo && f <= centre) w = (f - lo) / (centre - lo);
      else if (f > centre && f < hi) w = (hi - f) / (hi - centre);
      weights_.at(k, m) = w;
      total += w;
    }
    if (total <= 0.0) {
      // Filter narrower than the bin spacing: snap to the nearest bin.
      const auto k = std::min(bins - 1, static_cast<std::size_t>(std::lround(centre / bin_hz)));
      weights_.at(k, m) = 1.0;
      total = 1.0;
    }
    for (std::size_t k = 0; k < bins; ++k) weights_.at(k, m) /= total;
  }
}

ad::Var mel_spectrogram(ad::Var x, const StftPlan& plan, const MelFilterbank& fb) {
  if (fb.fft_size() != plan.config().fft_size) {
    throw ContractError("mel_spectrogram: filterbank and STFT plan disagree on fft_size");
  }
  const Spectrogram s = stft(x, plan);
  ad::Var mel = ad::matmul(magnitude(s), x.tape().constant(fb.weights()));
  return ad::log(ad::add_scalar(mel, 1.0));
}

}  // namespace latmask::dsp
