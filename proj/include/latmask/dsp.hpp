#pragma once

// Differentiable STFT / ISTFT, magnitude, ratio mask and mel features.
//
// Every transform is written in autodiff primitives: framing is a gather,
// the DFT is a matmul against a fixed windowed cosine/sine basis, and
// overlap-add is a scatter. Gradients therefore flow from any downstream
// loss back to the time-domain input.

#include <cstddef>
#include <memory>

#include "latmask/autodiff.hpp"
#include "latmask/ndarray.hpp"

namespace latmask::dsp {

enum class Window { hann, rectangular };

struct StftConfig {
  std::size_t fft_size = 1024;
  std::size_t hop = 256;
  Window window = Window::hann;

  std::size_t bins() const { return fft_size / 2 + 1; }
  bool operator==(const StftConfig&) const = default;
};

// Default hop is a quarter of the FFT size.
StftConfig hann_config(std::size_t fft_size);

// Precomputed bases for one StftConfig. Immutable and shareable.
class StftPlan {
 public:
  // ConfigError unless fft_size is a power of two, 0 < hop <= fft_size and
  // the squared window overlap-adds to a constant at this hop.
  explicit StftPlan(StftConfig config);

  const StftConfig& config() const { return config_; }
  std::size_t bins() const { return config_.bins(); }
  // 1 + ceil(len / hop)
  std::size_t frames(std::size_t signal_len) const;
  const NDArray& window() const { return window_; }

  const NDArray& analysis_re() const { return analysis_re_; }    // [N, F]
  const NDArray& analysis_im() const { return analysis_im_; }    // [N, F]
  const NDArray& synthesis_re() const { return synthesis_re_; }  // [F, N]
  const NDArray& synthesis_im() const { return synthesis_im_; }  // [F, N]

 private:
  StftConfig config_;
  NDArray window_;
  NDArray analysis_re_, analysis_im_, synthesis_re_, synthesis_im_;
};

// Complex spectrogram as two [T, F] planes.
struct Spectrogram {
  ad::Var re;
  ad::Var im;
  StftConfig config;
  std::size_t signal_length = 0;

  std::size_t frames() const { return re.shape()[0]; }
  std::size_t bins() const { return re.shape()[1]; }
};

struct Mask {
  ad::Var values;  // [T, F]
  double epsilon = 1e-8;
};

// x: [len]. Reflect padding of fft_size/2 on the left; the right side is
// reflect-extended until the last frame is complete.
Spectrogram stft(ad::Var x, const StftPlan& plan);

// Weighted overlap-add with squared-window normalisation, trimmed or zero
// padded to target_len. ContractError if `s` was made with another config.
ad::Var istft(const Spectrogram& s, const StftPlan& plan, std::size_t target_len);

// sqrt(re^2 + im^2 + 1e-12)
ad::Var magnitude(const Spectrogram& s);

// |J| / (max(|J|, |X|) + eps)
Mask build_mask(ad::Var j_mag, ad::Var x_mag, double eps = 1e-8);

// Scales both planes of `x` by the real mask; the mixture phase is kept.
Spectrogram apply_mask(const Mask& mask, const Spectrogram& x);

// Triangular HTK-spaced filters over [0, sr/2], each filter L1-normalised.
class MelFilterbank {
 public:
  MelFilterbank(std::size_t n_mels, std::size_t fft_size, int sample_rate);

  std::size_t n_mels() const { return n_mels_; }
  std::size_t fft_size() const { return fft_size_; }
  int sample_rate() const { return sample_rate_; }
  // [F, n_mels]; column m is filter m.
  const NDArray& weights() const { return weights_; }

 private:
  std::size_t n_mels_;
  std::size_t fft_size_;
  int sample_rate_;
  NDArray weights_;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// log(1 + |STFT(x)| * filterbank) -> [T, n_mels]
ad::Var mel_spectrogram(ad::Var x, const StftPlan& plan, const MelFilterbank& fb);

}  // namespace latmask::dsp
