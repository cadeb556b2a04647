#pragma once

// Multi-resolution STFT loss with an analytic gradient with respect to the
// predicted signal. Spectra are computed in double precision regardless of
// the caller's sample type.

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "nafx/error.hpp"

namespace nafx {

struct StftResolution {
  int fft_size = 2048;
  int hop = 512;

  static StftResolution with_size(int fft_size) { return {fft_size, std::max(1, fft_size / 4)}; }

  void validate() const {
    require(fft_size >= 2 && (fft_size & (fft_size - 1)) == 0, "STFT size must be a power of two >= 2");
    require(hop >= 1 && hop <= fft_size, "STFT hop must lie in [1, fft_size]");
  }
  int bins() const { return fft_size / 2 + 1; }

  bool operator==(const StftResolution&) const = default;
};

inline std::vector<StftResolution> default_resolutions() {
  return {StftResolution::with_size(32), StftResolution::with_size(128), StftResolution::with_size(512),
          StftResolution::with_size(2048)};
}

inline constexpr double kMagnitudeFloor = 1e-12;  // added under the square root
inline constexpr double kLogEpsilon = 1e-8;

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// One real-to-complex and one complex-to-real plan of a fixed size, with
// their own aligned buffers.
class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    real_ = static_cast<double*>(fftw_malloc(sizeof(double) * static_cast<std::size_t>(n)));
    spec_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * static_cast<std::size_t>(n / 2 + 1)));
    std::lock_guard lock(fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c_1d(n, real_, spec_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(n, spec_, real_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(real_);
    fftw_free(spec_);
  }

  int size() const { return n_; }
  double* real() { return real_; }
  fftw_complex* spectrum() { return spec_; }
  void forward() { fftw_execute(forward_); }
  // Unnormalized: real[n] = sum_k spec[k] e^{+2 pi i k n / N} over the
  // Hermitian-extended spectrum. Clobbers the spectrum buffer.
  void inverse() { fftw_execute(inverse_); }

 private:
  int n_;
  double* real_ = nullptr;
  fftw_complex* spec_ = nullptr;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

// Index into the original signal for a position in the reflect-padded one.
inline std::size_t reflect_index(std::ptrdiff_t j, std::size_t n) {
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  if (j < 0) j = -j;
  if (j > last) j = 2 * last - j;
  return static_cast<std::size_t>(j);
}

}  // namespace detail

// frames x bins grid; complex values are kept for backpropagation.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> values;
  std::vector<double> magnitude;  // sqrt(|X|^2 + floor)
  double raw_energy = 0.0;        // sum |X|^2 without the floor

  double mag(std::size_t f, std::size_t k) const { return magnitude[f * bins + k]; }
};

inline std::size_t stft_frame_count(std::size_t length, const StftResolution& res) {
  return (length + static_cast<std::size_t>(res.hop) - 1) / static_cast<std::size_t>(res.hop);
}

// Hann-windowed frames centred on multiples of hop, with fft_size/2 samples
// of reflect padding on both ends; ceil(N / hop) frames.
template <typename T>
Spectrogram stft(std::span<const T> x, const StftResolution& res, detail::RealFft& fft,
                 const std::vector<double>& window) {
  res.validate();
  const std::size_t N = x.size();
  if (N < static_cast<std::size_t>(res.fft_size)) {
    fail(ErrorKind::kInvalidArgument, "signal of " + std::to_string(N) + " samples is shorter than STFT size " +
                                          std::to_string(res.fft_size));
  }
  const auto pad = static_cast<std::ptrdiff_t>(res.fft_size / 2);
  Spectrogram s;
  s.frames = stft_frame_count(N, res);
  s.bins = static_cast<std::size_t>(res.bins());
  s.values.resize(s.frames * s.bins);
  s.magnitude.resize(s.frames * s.bins);
  double* buf = fft.real();
  for (std::size_t f = 0; f < s.frames; ++f) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f) * res.hop - pad;
    for (int n = 0; n < res.fft_size; ++n) {
      buf[n] = window[n] * static_cast<double>(x[detail::reflect_index(start + n, N)]);
    }
    fft.forward();
    const fftw_complex* spec = fft.spectrum();
    for (std::size_t k = 0; k < s.bins; ++k) {
      const double re = spec[k][0], im = spec[k][1];
      const double p = re * re + im * im;
      s.values[f * s.bins + k] = {re, im};
      s.magnitude[f * s.bins + k] = std::sqrt(p + kMagnitudeFloor);
      s.raw_energy += p;
    }
  }
  return s;
}

template <typename T>
Spectrogram stft_magnitude(std::span<const T> x, const StftResolution& res) {
  res.validate();
  detail::RealFft fft(res.fft_size);
  return stft(x, res, fft, detail::hann_window(res.fft_size));
}

struct ResolutionLoss {
  double spectral_convergence = 0.0;
  double log_magnitude = 0.0;
};

struct LossReport {
  double total = 0.0;
  std::vector<ResolutionLoss> terms;

  double spectral_convergence() const {
    double s = 0.0;
    for (const auto& t : terms) s += t.spectral_convergence;
    return terms.empty() ? 0.0 : s / static_cast<double>(terms.size());
  }
  double log_magnitude() const {
    double s = 0.0;
    for (const auto& t : terms) s += t.log_magnitude;
    return terms.empty() ? 0.0 : s / static_cast<double>(terms.size());
  }
};

// Loss against a fixed target; target spectra are computed once.
class MrStftLoss {
 public:
  template <typename T>
  MrStftLoss(std::span<const T> target, std::vector<StftResolution> resolutions)
      : length_(target.size()), resolutions_(std::move(resolutions)) {
    require(!resolutions_.empty(), "at least one STFT resolution is required");
    for (const auto& res : resolutions_) {
      res.validate();
      auto& r = per_res_.emplace_back();
      r.fft = std::make_unique<detail::RealFft>(res.fft_size);
      r.window = detail::hann_window(res.fft_size);
      r.target = stft(target, res, *r.fft, r.window);
      if (std::sqrt(r.target.raw_energy) < kLogEpsilon) {
        fail(ErrorKind::kInvalidArgument, "degenerate target: silent at STFT size " + std::to_string(res.fft_size) +
                                              " (spectral convergence denominator below epsilon)");
      }
      double norm2 = 0.0;
      r.target_log.resize(r.target.magnitude.size());
      for (std::size_t k = 0; k < r.target.magnitude.size(); ++k) {
        const double m = r.target.magnitude[k];
        norm2 += m * m;
        r.target_log[k] = std::log(m + kLogEpsilon);
      }
      r.target_norm = std::sqrt(norm2);
    }
  }

  const std::vector<StftResolution>& resolutions() const { return resolutions_; }
  std::size_t length() const { return length_; }

  // Evaluates the loss; when `grad` is non-null it receives d total / d prediction.
  template <typename T>
  LossReport evaluate(std::span<const T> prediction, std::vector<T>* grad = nullptr) {
    require(prediction.size() == length_, "prediction has " + std::to_string(prediction.size()) +
                                              " samples, target has " + std::to_string(length_));
    LossReport report;
    std::vector<double> g;
    if (grad) g.assign(length_, 0.0);
    const double scale = 1.0 / static_cast<double>(resolutions_.size());
    for (std::size_t r = 0; r < resolutions_.size(); ++r) {
      report.terms.push_back(evaluate_one(r, prediction, grad ? &g : nullptr, scale));
    }
    double total = 0.0;
    for (const auto& t : report.terms) total += t.spectral_convergence + t.log_magnitude;
    report.total = total * scale;
    if (grad) {
      grad->resize(length_);
      for (std::size_t n = 0; n < length_; ++n) (*grad)[n] = static_cast<T>(g[n]);
    }
    return report;
  }

 private:
  struct PerResolution {
    std::unique_ptr<detail::RealFft> fft;
    std::vector<double> window;
    Spectrogram target;
    std::vector<double> target_log;
    double target_norm = 0.0;
  };

  template <typename T>
  ResolutionLoss evaluate_one(std::size_t index, std::span<const T> prediction, std::vector<double>* grad,
                              double scale) {
    const StftResolution& res = resolutions_[index];
    PerResolution& r = per_res_[index];
    const Spectrogram pred = stft(prediction, res, *r.fft, r.window);
    const std::size_t cells = pred.magnitude.size();

    double diff2 = 0.0, log_sum = 0.0;
    for (std::size_t k = 0; k < cells; ++k) {
      const double d = r.target.magnitude[k] - pred.magnitude[k];
      diff2 += d * d;
      log_sum += std::abs(r.target_log[k] - std::log(pred.magnitude[k] + kLogEpsilon));
    }
    const double diff_norm = std::sqrt(diff2);
    ResolutionLoss out{diff_norm / r.target_norm, log_sum / static_cast<double>(cells)};
    if (!grad) return out;

    // d loss / d |Yhat| for every cell.
    const double sc_scale = diff_norm > 0.0 ? scale / (diff_norm * r.target_norm) : 0.0;
    const double lm_scale = scale / static_cast<double>(cells);
    const std::size_t N = prediction.size();
    const auto pad = static_cast<std::ptrdiff_t>(res.fft_size / 2);
    const std::size_t bins = pred.bins;
    const std::size_t half = static_cast<std::size_t>(res.fft_size / 2);
    for (std::size_t f = 0; f < pred.frames; ++f) {
      fftw_complex* spec = r.fft->spectrum();
      for (std::size_t k = 0; k < bins; ++k) {
        const std::size_t c = f * bins + k;
        const double m = pred.magnitude[c];
        const double lp = std::log(m + kLogEpsilon);
        const double sign = lp > r.target_log[c] ? 1.0 : (lp < r.target_log[c] ? -1.0 : 0.0);
        const double dm = sc_scale * (m - r.target.magnitude[c]) + lm_scale * sign / (m + kLogEpsilon);
        // Interior bins appear twice in the Hermitian sum evaluated by c2r.
        const double w = (k == 0 || k == half) ? 1.0 : 0.5;
        spec[k][0] = w * dm * pred.values[c].real() / m;
        spec[k][1] = w * dm * pred.values[c].imag() / m;
      }
      r.fft->inverse();
      const double* frame_grad = r.fft->real();
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f) * res.hop - pad;
      for (int n = 0; n < res.fft_size; ++n) {
        (*grad)[detail::reflect_index(start + n, N)] += r.window[n] * frame_grad[n];
      }
    }
    return out;
  }

  std::size_t length_;
  std::vector<StftResolution> resolutions_;
  std::vector<PerResolution> per_res_;
};

template <typename T>
LossReport mrstft_loss(std::span<const T> prediction, std::span<const T> target,
                       const std::vector<StftResolution>& resolutions) {
  require(prediction.size() == target.size(), "prediction and target lengths differ");
  MrStftLoss loss(target, resolutions);
  return loss.evaluate(prediction);
}

template <typename T>
std::vector<T> mrstft_grad(std::span<const T> prediction, std::span<const T> target,
                           const std::vector<StftResolution>& resolutions) {
  require(prediction.size() == target.size(), "prediction and target lengths differ");
  MrStftLoss loss(target, resolutions);
  std::vector<T> g;
  loss.evaluate(prediction, &g);
  return g;
}

}  // namespace nafx
