#pragma once

// Integrated programme loudness (ITU-R BS.1770): K-weighting, 400 ms blocks
// with 75% overlap, absolute gate at -70 LUFS and relative gate 10 LU below
// the absolutely gated level.

#include <cmath>
#include <numbers>
#include <vector>

#include "nafx/audio_io.hpp"
#include "nafx/error.hpp"

namespace nafx {

struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;

  // Transposed direct form II, zero initial state.
  template <typename In>
  std::vector<double> filter(const In& x) const {
    std::vector<double> y(x.size());
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      const double in = static_cast<double>(x[n]);
      const double out = b0 * in + s1;
      s1 = b1 * in - a1 * out + s2;
      s2 = b2 * in - a2 * out;
      y[n] = out;
    }
    return y;
  }
};

// The two K-weighting stages, derived from their analogue prototypes via
// the bilinear transform so any sample rate is supported. At 48 kHz these
// reproduce the tabulated coefficients.
struct KWeighting {
  Biquad shelf;
  Biquad highpass;

  explicit KWeighting(int sample_rate) {
    require(sample_rate > 0, "sample rate must be positive");
    const double fs = sample_rate;
    {
      const double f0 = 1681.974450955533;
      const double gain_db = 3.999843853973347;
      const double q = 0.7071752369554196;
      const double k = std::tan(std::numbers::pi * f0 / fs);
      const double vh = std::pow(10.0, gain_db / 20.0);
      const double vb = std::pow(vh, 0.4996667741545416);
      const double a0 = 1.0 + k / q + k * k;
      shelf.b0 = (vh + vb * k / q + k * k) / a0;
      shelf.b1 = 2.0 * (k * k - vh) / a0;
      shelf.b2 = (vh - vb * k / q + k * k) / a0;
      shelf.a1 = 2.0 * (k * k - 1.0) / a0;
      shelf.a2 = (1.0 - k / q + k * k) / a0;
    }
    {
      const double f0 = 38.13547087602444;
      const double q = 0.5003270373238773;
      const double k = std::tan(std::numbers::pi * f0 / fs);
      const double a0 = 1.0 + k / q + k * k;
      highpass.b0 = 1.0;
      highpass.b1 = -2.0;
      highpass.b2 = 1.0;
      highpass.a1 = 2.0 * (k * k - 1.0) / a0;
      highpass.a2 = (1.0 - k / q + k * k) / a0;
    }
  }

  template <typename In>
  std::vector<double> apply(const In& x) const {
    return highpass.filter(shelf.filter(x));
  }
};

inline constexpr double kAbsoluteGateLufs = -70.0;
inline constexpr double kRelativeGateLu = -10.0;
inline constexpr double kLoudnessOffset = -0.691;

struct LoudnessResult {
  bool below_gate = false;  // every block fell under the absolute gate
  double lufs = -HUGE_VAL;
};

inline double energy_to_lufs(double mean_square) { return kLoudnessOffset + 10.0 * std::log10(mean_square); }

inline LoudnessResult integrated_loudness(const AudioBuffer& buffer) {
  buffer.validate();
  const double fs = buffer.sample_rate;
  const auto block = static_cast<std::size_t>(std::llround(0.4 * fs));
  const auto hop = static_cast<std::size_t>(std::llround(0.1 * fs));
  const std::size_t N = buffer.frames();
  if (N < block) {
    fail(ErrorKind::kInvalidArgument, "loudness needs at least 400 ms of audio, got " +
                                          std::to_string(1000.0 * static_cast<double>(N) / fs) + " ms");
  }
  const KWeighting kw(buffer.sample_rate);

  // Prefix sums of the K-weighted power summed over channels (all weights 1).
  std::vector<double> prefix(N + 1, 0.0);
  std::vector<double> power(N, 0.0);
  for (const auto& ch : buffer.samples) {
    const std::vector<double> y = kw.apply(ch);
    for (std::size_t n = 0; n < N; ++n) power[n] += y[n] * y[n];
  }
  for (std::size_t n = 0; n < N; ++n) prefix[n + 1] = prefix[n] + power[n];

  const std::size_t blocks = (N - block) / hop + 1;
  std::vector<double> z(blocks);
  for (std::size_t j = 0; j < blocks; ++j) {
    z[j] = (prefix[j * hop + block] - prefix[j * hop]) / static_cast<double>(block);
  }

  double sum = 0.0;
  std::size_t count = 0;
  for (double e : z) {
    if (e > 0.0 && energy_to_lufs(e) > kAbsoluteGateLufs) {
      sum += e;
      ++count;
    }
  }
  if (count == 0) return {true, -HUGE_VAL};
  const double relative_gate = energy_to_lufs(sum / static_cast<double>(count)) + kRelativeGateLu;

  sum = 0.0;
  count = 0;
  for (double e : z) {
    if (e <= 0.0) continue;
    const double l = energy_to_lufs(e);
    if (l > kAbsoluteGateLufs && l > relative_gate) {
      sum += e;
      ++count;
    }
  }
  if (count == 0) return {true, -HUGE_VAL};
  return {false, energy_to_lufs(sum / static_cast<double>(count))};
}

}  // namespace nafx
