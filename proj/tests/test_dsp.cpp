#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "doctest.h"
#include "latmask/dsp.hpp"
#include "latmask/errors.hpp"
#include "test_util.hpp"

using namespace latmask;
using namespace latmask::dsp;
using latmask::testing::random_array;
using latmask::testing::rel_l2;

namespace {

NDArray sine(double hz, int sr, std::size_t len, double amp = 0.5) {
  NDArray x(Shape{len});
  for (std::size_t i = 0; i < len; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * hz * i / sr);
  return x;
}

}  // namespace

TEST_CASE("StftPlan validates its configuration") {
  CHECK_NOTHROW(StftPlan(hann_config(1024)));
  CHECK_NOTHROW(StftPlan(StftConfig{512, 64, Window::hann}));
  CHECK_THROWS_AS(StftPlan(StftConfig{1000, 250, Window::hann}), ConfigError);
  CHECK_THROWS_AS(StftPlan(StftConfig{1024, 512, Window::hann}), ConfigError);
  CHECK_THROWS_AS(StftPlan(StftConfig{1024, 0, Window::hann}), ConfigError);
  CHECK_THROWS_AS(StftPlan(StftConfig{1024, 2048, Window::hann}), ConfigError);
  CHECK_NOTHROW(StftPlan(StftConfig{256, 256, Window::rectangular}));
  CHECK_THROWS_AS(StftPlan(StftConfig{256, 96, Window::rectangular}), ConfigError);
}

TEST_CASE("stft of silence is silent") {
  StftPlan plan(hann_config(256));
  ad::Tape t;
  Spectrogram s = stft(t.constant(NDArray(Shape{1000})), plan);
  CHECK(s.frames() == plan.frames(1000));
  CHECK(s.bins() == 129);
  for (double v : s.re.value().data()) CHECK(v == 0.0);
  for (double v : s.im.value().data()) CHECK(v == 0.0);
}

TEST_CASE("stft of an impulse matches a direct DFT of each windowed frame") {
  const std::size_t n = 1024, hop = 256, len = 4000;
  StftPlan plan(StftConfig{n, hop, Window::hann});
  NDArray x(Shape{len});
  x[0] = 1.0;
  ad::Tape t;
  Spectrogram s = stft(t.constant(x), plan);

  // Oracle: reflect-pad by hand, window, and evaluate the DFT sum directly.
  auto padded_at = [&](std::ptrdiff_t q) {
    std::ptrdiff_t i = q - static_cast<std::ptrdiff_t>(n / 2);
    if (i < 0) i = -i;
    return (i >= 0 && i < static_cast<std::ptrdiff_t>(len)) ? x[static_cast<std::size_t>(i)] : 0.0;
  };
  double worst = 0.0;
  for (std::size_t frame = 0; frame < 4; ++frame) {
    for (std::size_t k = 0; k < n / 2 + 1; k += 37) {
      std::complex<double> acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
        acc += w * padded_at(static_cast<std::ptrdiff_t>(frame * hop + i)) *
               std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * i) / n);
      }
      worst = std::max(worst, std::abs(acc.real() - s.re.value().at(frame, k)));
      worst = std::max(worst, std::abs(acc.imag() - s.im.value().at(frame, k)));
    }
  }
  CHECK(worst < 1e-9);
  // Impulse sits at offset n/2 - frame*hop: flat magnitude equal to w[offset].
  NDArray mag = magnitude(s).value();
  for (std::size_t frame = 0; frame < 3; ++frame) {
    const std::size_t offset = n / 2 - frame * hop;
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * offset / n);
    const double floored = std::sqrt(w * w + 1e-12);
    CHECK(std::abs(mag.at(frame, 0) - floored) < 1e-9);
    CHECK(std::abs(mag.at(frame, 300) - floored) < 1e-9);
  }
}

TEST_CASE("1 kHz sine peaks at bin 128 for fft 1024 at 8 kHz") {
  StftPlan plan(hann_config(1024));
  ad::Tape t;
  NDArray mag = magnitude(stft(t.constant(sine(1000.0, 8000, 8000)), plan)).value();
  const std::size_t frame = mag.dim(0) / 2;
  std::size_t best = 0;
  for (std::size_t k = 0; k < mag.dim(1); ++k)
    if (mag.at(frame, k) > mag.at(frame, best)) best = k;
  CHECK(best == 128);
}

TEST_CASE("istft inverts stft") {
  for (std::size_t n : {256, 512, 1024}) {
    StftPlan plan(hann_config(n));
    for (unsigned long long seed = 0; seed < 3; ++seed) {
      const NDArray x = random_array({16000}, seed);
      ad::Tape t;
      Spectrogram s = stft(t.constant(x), plan);
      NDArray y = istft(s, plan, x.size()).value();
      CHECK(rel_l2(x, y) <= 1e-6);
    }
  }
  // Lengths that are not multiples of the hop, and shorter than one frame.
  for (std::size_t len : {1001, 300, 17}) {
    StftPlan plan(hann_config(512));
    const NDArray x = random_array({len}, len);
    ad::Tape t;
    NDArray y = istft(stft(t.constant(x), plan), plan, len).value();
    CHECK(rel_l2(x, y) <= 1e-6);
  }
}

TEST_CASE("istft of silence and identity masking") {
  StftPlan plan(hann_config(256));
  ad::Tape t;
  const NDArray x = random_array({2000}, 5);
  Spectrogram s = stft(t.constant(x), plan);
  Spectrogram zero{t.constant(NDArray(s.re.shape())), t.constant(NDArray(s.im.shape())), s.config, 2000};
  for (double v : istft(zero, plan, 2000).value().data()) CHECK(v == 0.0);

  Mask ones{t.constant(NDArray(s.re.shape(), 1.0)), 1e-8};
  Spectrogram same = apply_mask(ones, s);
  CHECK(same.re.value() == s.re.value());
  CHECK(same.im.value() == s.im.value());
  CHECK(rel_l2(x, istft(same, plan, 2000).value()) <= 1e-6);

  // Longer target is zero padded.
  NDArray longer = istft(s, plan, 2100).value();
  for (std::size_t i = 2000; i < 2100; ++i) CHECK(std::abs(longer[i]) < 1e-9);
}

TEST_CASE("istft rejects a spectrogram from a different configuration") {
  StftPlan a(hann_config(256));
  StftPlan b(hann_config(512));
  ad::Tape t;
  Spectrogram s = stft(t.constant(random_array({1000}, 1)), a);
  CHECK_THROWS_AS(istft(s, b, 1000), ContractError);
}

TEST_CASE("build_mask follows the ratio formula") {
  ad::Tape t;
  auto mask_of = [&](double j, double x) {
    return build_mask(t.constant(NDArray::from({j})), t.constant(NDArray::from({x}))).values.value()[0];
  };
  CHECK(mask_of(3.0, 4.0) == 3.0 / (4.0 + 1e-8));
  CHECK(mask_of(3.0, 4.0) == doctest::Approx(0.75));
  CHECK(mask_of(0.0, 4.0) == 0.0);
  const double m = 2.5;
  CHECK(mask_of(m, m) == m / (m + 1e-8));
  CHECK(mask_of(m, m) < 1.0);
  CHECK_THROWS_AS(build_mask(t.constant(NDArray(Shape{2})), t.constant(NDArray(Shape{3}))), ContractError);
}

TEST_CASE("build_mask property: bounded and monotone in |J|") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> mag(0.0, 10.0);
  std::uniform_real_distribution<double> log_eps(-10.0, -2.0);
  for (int i = 0; i < 2000; ++i) {
    const double j = mag(rng), x = mag(rng), eps = std::pow(10.0, log_eps(rng));
    ad::Tape t;
    const double m = build_mask(t.constant(NDArray::from({j})), t.constant(NDArray::from({x})), eps)
                         .values.value()[0];
    CHECK(m >= 0.0);
    CHECK(m < 1.0);
    const double bigger = build_mask(t.constant(NDArray::from({j + 0.5})), t.constant(NDArray::from({x})), eps)
                              .values.value()[0];
    CHECK(bigger >= m);
  }
}

TEST_CASE("apply_mask scales magnitudes by the mask") {
  StftPlan plan(hann_config(256));
  ad::Tape t;
  Spectrogram s = stft(t.constant(random_array({3000}, 8)), plan);
  NDArray mv = random_array(s.re.shape(), 9, 0.0, 1.0);
  Spectrogram masked = apply_mask(Mask{t.constant(mv), 1e-8}, s);
  const NDArray& re = s.re.value();
  const NDArray& im = s.im.value();
  for (std::size_t i = 0; i < mv.size(); ++i) {
    const double expect = mv[i] * std::hypot(re[i], im[i]);
    CHECK(std::abs(std::hypot(masked.re.value()[i], masked.im.value()[i]) - expect) <= 1e-12);
  }
  Spectrogram zeroed = apply_mask(Mask{t.constant(NDArray(s.re.shape())), 1e-8}, s);
  for (double v : zeroed.re.value().data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(apply_mask(Mask{t.constant(NDArray(Shape{2, 2})), 1e-8}, s), ContractError);
}

TEST_CASE("mel filterbank rows are normalised") {
  for (std::size_t n_fft : {256, 1024}) {
    MelFilterbank fb(40, n_fft, 8000);
    for (std::size_t m = 0; m < fb.n_mels(); ++m) {
      double total = 0.0;
      for (std::size_t k = 0; k < fb.weights().dim(0); ++k) {
        CHECK(fb.weights().at(k, m) >= 0.0);
        total += fb.weights().at(k, m);
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(MelFilterbank(200, 256, 8000), ConfigError);
  CHECK_THROWS_AS(MelFilterbank(4, 256, 8000), ConfigError);
  CHECK(hz_to_mel(mel_to_hz(1234.5)) == doctest::Approx(1234.5));
}

TEST_CASE("mel spectrogram of silence is zero; of noise strictly positive") {
  StftPlan plan(hann_config(1024));
  MelFilterbank fb(40, 1024, 8000);
  ad::Tape t;
  for (double v : mel_spectrogram(t.constant(NDArray(Shape{4000})), plan, fb).value().data()) {
    CHECK(v == doctest::Approx(0.0).epsilon(1e-5));
  }
  for (unsigned long long seed = 0; seed < 5; ++seed) {
    NDArray mel = mel_spectrogram(t.constant(random_array({8000}, seed)), plan, fb).value();
    CHECK(mel.shape() == Shape{plan.frames(8000), 40});
    for (double v : mel.data()) CHECK(v > 1e-3);
  }
}

TEST_CASE("gradient flows through stft -> mask -> istft") {
  const std::size_t len = 8000;
  StftPlan plan(hann_config(1024));
  const NDArray mix = random_array({len}, 21, -0.5, 0.5);
  const NDArray weights = random_array({len}, 22);
  auto f = [&](ad::Tape& t, ad::Var j) {
    Spectrogram x = stft(t.constant(mix), plan);
    Spectrogram js = stft(j, plan);
    Mask m = build_mask(magnitude(js), magnitude(x));
    ad::Var s = istft(apply_mask(m, x), plan, len);
    return ad::sum(ad::mul(s, t.constant(weights)));
  };
  const NDArray j = random_array({len}, 23, -0.5, 0.5);
  auto r = ad::grad_check(f, j, 1e-6, 1e-3, 24, 7);
  CHECK_MESSAGE(r.passed, "max rel err ", r.max_rel_error);
}
