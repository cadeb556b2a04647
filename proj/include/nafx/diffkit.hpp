#pragma once

// Differentiable layer primitives with hand-written forward and backward
// passes, plus the Adam update. Everything is templated on the scalar type:
// training runs in float, gradient checks in double.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nafx/error.hpp"

namespace nafx {

// channels x frames, row-major by channel.
template <typename T>
struct FeatureMap {
  int channels = 0;
  std::size_t frames = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, std::size_t n, T fill = T(0))
      : channels(c), frames(n), data(static_cast<std::size_t>(c) * n, fill) {}

  T& operator()(int c, std::size_t n) { return data[static_cast<std::size_t>(c) * frames + n]; }
  T operator()(int c, std::size_t n) const { return data[static_cast<std::size_t>(c) * frames + n]; }

  std::span<T> row(int c) { return {data.data() + static_cast<std::size_t>(c) * frames, frames}; }
  std::span<const T> row(int c) const { return {data.data() + static_cast<std::size_t>(c) * frames, frames}; }

  bool same_shape(const FeatureMap& o) const { return channels == o.channels && frames == o.frames; }
  bool operator==(const FeatureMap&) const = default;
};

// Non-owning view of a 1-D convolution's parameters.
// weights are laid out [out][in][tap].
template <typename T>
struct ConvView {
  std::span<const T> weights;
  std::span<const T> bias;
  int out_channels = 1;
  int in_channels = 1;
  int kernel_size = 1;
  int dilation = 1;

  T w(int o, int i, int t) const {
    return weights[(static_cast<std::size_t>(o) * in_channels + i) * kernel_size + t];
  }
  std::size_t receptive_span() const { return static_cast<std::size_t>(dilation) * (kernel_size - 1); }

  void validate() const {
    require(out_channels >= 1 && in_channels >= 1, "conv channel counts must be positive");
    require(kernel_size >= 1, "conv kernel_size must be >= 1");
    require(dilation >= 1, "conv dilation must be >= 1");
    require(weights.size() == static_cast<std::size_t>(out_channels) * in_channels * kernel_size,
            "conv weight count does not match its shape");
    require(bias.size() == static_cast<std::size_t>(out_channels), "conv bias count does not match out_channels");
  }
};

template <typename T>
struct ConvKernel {
  int out_channels = 1;
  int in_channels = 1;
  int kernel_size = 1;
  int dilation = 1;
  std::vector<T> weights;
  std::vector<T> bias;

  ConvKernel() = default;
  ConvKernel(int out, int in, int k, int d)
      : out_channels(out), in_channels(in), kernel_size(k), dilation(d),
        weights(static_cast<std::size_t>(out) * in * k, T(0)), bias(static_cast<std::size_t>(out), T(0)) {}

  T& w(int o, int i, int t) { return weights[(static_cast<std::size_t>(o) * in_channels + i) * kernel_size + t]; }

  ConvView<T> view() const {
    return {weights, bias, out_channels, in_channels, kernel_size, dilation};
  }
};

namespace detail {

// Dot product with eight interleaved double accumulators; the summation
// order is fixed so results are reproducible bit for bit.
template <typename T>
double dot(const T* a, const T* b, std::size_t n) {
  std::array<double, 8> acc{};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(a[k + j]) * static_cast<double>(b[k + j]);
  }
  for (std::size_t j = 0; k < n; ++k, ++j) acc[j] += static_cast<double>(a[k]) * static_cast<double>(b[k]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double sum(std::span<const T> a) {
  std::array<double, 8> acc{};
  std::size_t k = 0;
  const std::size_t n = a.size();
  for (; k + 8 <= n; k += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(a[k + j]);
  }
  for (std::size_t j = 0; k < n; ++k, ++j) acc[j] += static_cast<double>(a[k]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

inline constexpr std::size_t kTile = 2048;

}  // namespace detail

// y[o][n] = bias[o] + sum_{i,t} w[o][i][t] * x[i][n - d*(K-1-t)], with x
// zero for negative frames.
template <typename T>
FeatureMap<T> conv1d_causal_fwd(const FeatureMap<T>& x, const ConvView<T>& k) {
  k.validate();
  require(x.channels == k.in_channels, "conv input has " + std::to_string(x.channels) +
                                           " channels, kernel expects " + std::to_string(k.in_channels));
  const std::size_t N = x.frames;
  FeatureMap<T> y(k.out_channels, N);
  for (std::size_t n0 = 0; n0 < N; n0 += detail::kTile) {
    const std::size_t n1 = std::min(N, n0 + detail::kTile);
    for (int o = 0; o < k.out_channels; ++o) {
      T* yo = y.row(o).data();
      const T b = k.bias[o];
      for (std::size_t n = n0; n < n1; ++n) yo[n] = b;
      for (int i = 0; i < k.in_channels; ++i) {
        const T* xi = x.row(i).data();
        for (int t = 0; t < k.kernel_size; ++t) {
          const std::size_t shift = static_cast<std::size_t>(k.dilation) * (k.kernel_size - 1 - t);
          const T w = k.w(o, i, t);
          const std::size_t start = std::max(n0, shift);
          for (std::size_t n = start; n < n1; ++n) yo[n] += w * xi[n - shift];
        }
      }
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  FeatureMap<T> grad_x;
  std::vector<T> grad_weights;
  std::vector<T> grad_bias;
};

template <typename T>
ConvGrads<T> conv1d_causal_bwd(const FeatureMap<T>& x, const ConvView<T>& k, const FeatureMap<T>& grad_out) {
  k.validate();
  require(x.channels == k.in_channels, "conv backward: input channel mismatch");
  require(grad_out.channels == k.out_channels && grad_out.frames == x.frames,
          "conv backward: grad_out shape does not match forward output");
  const std::size_t N = x.frames;
  ConvGrads<T> g{FeatureMap<T>(k.in_channels, N), std::vector<T>(k.weights.size()),
                 std::vector<T>(static_cast<std::size_t>(k.out_channels))};

  for (int o = 0; o < k.out_channels; ++o) g.grad_bias[o] = static_cast<T>(detail::sum(grad_out.row(o)));

  for (int o = 0; o < k.out_channels; ++o) {
    const T* go = grad_out.row(o).data();
    for (int i = 0; i < k.in_channels; ++i) {
      const T* xi = x.row(i).data();
      for (int t = 0; t < k.kernel_size; ++t) {
        const std::size_t shift = static_cast<std::size_t>(k.dilation) * (k.kernel_size - 1 - t);
        const std::size_t idx = (static_cast<std::size_t>(o) * k.in_channels + i) * k.kernel_size + t;
        g.grad_weights[idx] = shift >= N ? T(0) : static_cast<T>(detail::dot(go + shift, xi, N - shift));
      }
    }
  }

  // grad_x[i][m] = sum_{o,t} w[o][i][t] * grad_out[o][m + shift]
  for (std::size_t m0 = 0; m0 < N; m0 += detail::kTile) {
    const std::size_t m1 = std::min(N, m0 + detail::kTile);
    for (int i = 0; i < k.in_channels; ++i) {
      T* gx = g.grad_x.row(i).data();
      for (int o = 0; o < k.out_channels; ++o) {
        const T* go = grad_out.row(o).data();
        for (int t = 0; t < k.kernel_size; ++t) {
          const std::size_t shift = static_cast<std::size_t>(k.dilation) * (k.kernel_size - 1 - t);
          if (shift >= N) continue;
          const T w = k.w(o, i, t);
          const std::size_t end = std::min(m1, N - shift);
          for (std::size_t m = m0; m < end; ++m) gx[m] += w * go[m + shift];
        }
      }
    }
  }
  return g;
}

// y[c][n] = gamma[c] * x[c][n] + beta[c]
template <typename T>
FeatureMap<T> film_fwd(const FeatureMap<T>& x, std::span<const T> gamma, std::span<const T> beta) {
  require(gamma.size() == static_cast<std::size_t>(x.channels) && beta.size() == gamma.size(),
          "FiLM gamma/beta length must equal channel count");
  FeatureMap<T> y(x.channels, x.frames);
  for (int c = 0; c < x.channels; ++c) {
    const auto xr = x.row(c);
    auto yr = y.row(c);
    const T g = gamma[c], b = beta[c];
    for (std::size_t n = 0; n < x.frames; ++n) yr[n] = g * xr[n] + b;
  }
  return y;
}

template <typename T>
struct FilmGrads {
  FeatureMap<T> grad_x;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

template <typename T>
FilmGrads<T> film_bwd(const FeatureMap<T>& x, std::span<const T> gamma, std::span<const T> beta,
                      const FeatureMap<T>& grad_out) {
  require(gamma.size() == static_cast<std::size_t>(x.channels) && beta.size() == gamma.size(),
          "FiLM gamma/beta length must equal channel count");
  require(grad_out.same_shape(x), "FiLM backward: grad_out shape mismatch");
  FilmGrads<T> g{FeatureMap<T>(x.channels, x.frames), std::vector<T>(gamma.size()), std::vector<T>(beta.size())};
  for (int c = 0; c < x.channels; ++c) {
    const auto go = grad_out.row(c);
    const auto xr = x.row(c);
    auto gx = g.grad_x.row(c);
    const T gm = gamma[c];
    for (std::size_t n = 0; n < x.frames; ++n) gx[n] = gm * go[n];
    g.grad_gamma[c] = static_cast<T>(detail::dot(go.data(), xr.data(), x.frames));
    g.grad_beta[c] = static_cast<T>(detail::sum(go));
  }
  return g;
}

// out = W c + b, W is rows x cols row-major.
template <typename T>
std::vector<T> linear_fwd(std::span<const T> c, std::span<const T> W, std::span<const T> b) {
  const std::size_t rows = b.size();
  const std::size_t cols = c.size();
  require(W.size() == rows * cols, "linear weight shape does not match input/bias sizes");
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = b[r];
    for (std::size_t j = 0; j < cols; ++j) acc += W[r * cols + j] * c[j];
    out[r] = acc;
  }
  return out;
}

template <typename T>
struct LinearGrads {
  std::vector<T> grad_c;
  std::vector<T> grad_W;
  std::vector<T> grad_b;
};

template <typename T>
LinearGrads<T> linear_bwd(std::span<const T> c, std::span<const T> W, std::span<const T> b,
                          std::span<const T> grad_out) {
  const std::size_t rows = b.size();
  const std::size_t cols = c.size();
  require(W.size() == rows * cols, "linear weight shape does not match input/bias sizes");
  require(grad_out.size() == rows, "linear backward: grad_out length mismatch");
  LinearGrads<T> g{std::vector<T>(cols, T(0)), std::vector<T>(rows * cols), std::vector<T>(grad_out.begin(), grad_out.end())};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      g.grad_W[r * cols + j] = grad_out[r] * c[j];
      g.grad_c[j] += W[r * cols + j] * grad_out[r];
    }
  }
  return g;
}

template <typename T>
FeatureMap<T> prelu_fwd(const FeatureMap<T>& x, std::span<const T> slopes) {
  require(slopes.size() == static_cast<std::size_t>(x.channels), "PReLU needs one slope per channel");
  FeatureMap<T> y(x.channels, x.frames);
  for (int c = 0; c < x.channels; ++c) {
    const auto xr = x.row(c);
    auto yr = y.row(c);
    const T a = slopes[c];
    for (std::size_t n = 0; n < x.frames; ++n) yr[n] = xr[n] >= T(0) ? xr[n] : a * xr[n];
  }
  return y;
}

template <typename T>
struct PreluGrads {
  FeatureMap<T> grad_x;
  std::vector<T> grad_slopes;
};

// The kink at x == 0 takes the positive branch.
template <typename T>
PreluGrads<T> prelu_bwd(const FeatureMap<T>& x, std::span<const T> slopes, const FeatureMap<T>& grad_out) {
  require(slopes.size() == static_cast<std::size_t>(x.channels), "PReLU needs one slope per channel");
  require(grad_out.same_shape(x), "PReLU backward: grad_out shape mismatch");
  PreluGrads<T> g{FeatureMap<T>(x.channels, x.frames), std::vector<T>(slopes.size())};
  for (int c = 0; c < x.channels; ++c) {
    const auto xr = x.row(c);
    const auto go = grad_out.row(c);
    auto gx = g.grad_x.row(c);
    const T a = slopes[c];
    std::array<double, 4> acc{};
    for (std::size_t n = 0; n < x.frames; ++n) {
      const bool pos = xr[n] >= T(0);
      gx[n] = pos ? go[n] : a * go[n];
      acc[n & 3] += pos ? 0.0 : static_cast<double>(go[n]) * static_cast<double>(xr[n]);
    }
    g.grad_slopes[c] = static_cast<T>((acc[0] + acc[1]) + (acc[2] + acc[3]));
  }
  return g;
}

template <typename T>
struct AdamState {
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : first_moment(n, T(0)), second_moment(n, T(0)), beta1(b1), beta2(b2), epsilon(eps) {
    require(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0, "Adam betas must lie in (0, 1)");
  }

  bool operator==(const AdamState&) const = default;
};

// Bias-corrected Adam: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
// theta <- theta - lr * mhat / (sqrt(vhat) + eps).
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, double lr) {
  require(params.size() == grads.size() && state.first_moment.size() == params.size() &&
              state.second_moment.size() == params.size(),
          "Adam: parameter, gradient and state sizes differ");
  require(lr > 0.0, "Adam: learning rate must be positive");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      fail(ErrorKind::kNumerical, "non-finite gradient at parameter index " + std::to_string(i) +
                                      " (Adam step " + std::to_string(state.step_count + 1) + ")");
    }
  }
  ++state.step_count;
  const auto t = static_cast<double>(state.step_count);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(state.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(state.beta2, t)));
  const T eps = static_cast<T>(state.epsilon);
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    T& m = state.first_moment[i];
    T& v = state.second_moment[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g * g;
    params[i] -= step * (m * c1) / (std::sqrt(v * c2) + eps);
  }
}

}  // namespace nafx
