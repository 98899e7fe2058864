#include "latmask/waveform.hpp"

#include <algorithm>
#include <cmath>

#include "latmask/errors.hpp"

namespace latmask {

void validate(const Waveform& w) {
  if (w.samples.empty()) throw ContractError("waveform is empty");
  if (w.sample_rate <= 0) throw ContractError("waveform sample rate must be positive");
  if (!std::all_of(w.samples.begin(), w.samples.end(), [](float v) { return std::isfinite(v); })) {
    throw ContractError("waveform contains non-finite samples");
  }
}

NDArray to_array(const Waveform& w) {
  return NDArray(Shape{w.samples.size()}, std::vector<double>(w.samples.begin(), w.samples.end()));
}

Waveform to_waveform(const NDArray& a, int sample_rate) {
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.reserve(a.size());
  for (double v : a.data()) w.samples.push_back(static_cast<float>(v));
  return w;
}

}  // namespace latmask
