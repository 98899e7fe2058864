#pragma once

#include <cstddef>
#include <vector>

#include "latmask/ndarray.hpp"

namespace latmask {

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 8000;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Waveform&) const = default;
};

// Throws ContractError on empty or non-finite samples.
void validate(const Waveform& w);

NDArray to_array(const Waveform& w);
Waveform to_waveform(const NDArray& a, int sample_rate);

}  // namespace latmask
