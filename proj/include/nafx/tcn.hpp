#pragma once

// Conditional temporal convolutional network. Each block is
//
//   h = prelu(film(conv(x), gamma(c), beta(c))) + residual_1x1(x)
//
// with (gamma, beta) = W c + b, and a final 1x1 convolution maps the last
// block's C channels to a single output channel.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nafx/audio_io.hpp"
#include "nafx/diffkit.hpp"
#include "nafx/error.hpp"
#include "nafx/rng.hpp"

namespace nafx {

struct ModelConfig {
  int layers = 4;
  int channels = 32;
  int kernel_size = 9;
  int dilation_growth = 10;
  int cond_dim = 2;
  int sample_rate = kDefaultSampleRate;

  void validate() const {
    require(layers >= 1, "layers must be >= 1");
    require(channels >= 1, "channels must be >= 1");
    require(kernel_size >= 1, "kernel_size must be >= 1");
    require(dilation_growth >= 1, "dilation_growth must be >= 1");
    require(cond_dim >= 1, "cond_dim must be >= 1");
    require(sample_rate > 0, "sample_rate must be positive");
    std::int64_t d = 1;
    for (int i = 1; i < layers; ++i) {
      d *= dilation_growth;
      require(d <= std::numeric_limits<int>::max() / kernel_size, "dilation of the last block overflows");
    }
  }

  // Dilation of block i (0-based).
  int dilation(int block) const {
    std::int64_t d = 1;
    for (int i = 0; i < block; ++i) d *= dilation_growth;
    return static_cast<int>(d);
  }

  bool operator==(const ModelConfig&) const = default;
};

struct ReceptiveField {
  std::int64_t samples = 0;
  double milliseconds = 0.0;
};

// 1 + (K-1) * sum_{i<L} g^i
inline ReceptiveField receptive_field(const ModelConfig& cfg) {
  cfg.validate();
  std::int64_t span = 0;
  std::int64_t d = 1;
  for (int i = 0; i < cfg.layers; ++i) {
    span += d;
    d *= cfg.dilation_growth;
  }
  ReceptiveField rf;
  rf.samples = 1 + static_cast<std::int64_t>(cfg.kernel_size - 1) * span;
  rf.milliseconds = 1000.0 * static_cast<double>(rf.samples) / cfg.sample_rate;
  return rf;
}

// Offsets of every learnable tensor within the flat parameter vector, in
// declaration order.
struct ParamLayout {
  struct Block {
    int in_channels = 1;
    int dilation = 1;
    std::size_t conv_w = 0, conv_b = 0;
    std::size_t film_w = 0, film_b = 0;
    std::size_t prelu = 0;
    std::size_t res_w = 0, res_b = 0;
  };
  std::vector<Block> blocks;
  std::size_t out_w = 0, out_b = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    const auto C = static_cast<std::size_t>(cfg.channels);
    const auto K = static_cast<std::size_t>(cfg.kernel_size);
    const auto D = static_cast<std::size_t>(cfg.cond_dim);
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
      const std::size_t o = at;
      at += n;
      return o;
    };
    for (int i = 0; i < cfg.layers; ++i) {
      Block b;
      b.in_channels = i == 0 ? 1 : cfg.channels;
      b.dilation = cfg.dilation(i);
      const auto in = static_cast<std::size_t>(b.in_channels);
      b.conv_w = take(C * in * K);
      b.conv_b = take(C);
      b.film_w = take(2 * C * D);
      b.film_b = take(2 * C);
      b.prelu = take(C);
      b.res_w = take(C * in);
      b.res_b = take(C);
      blocks.push_back(b);
    }
    out_w = take(C);
    out_b = take(1);
    total = at;
  }
};

inline std::size_t param_count(const ModelConfig& cfg) { return ParamLayout(cfg).total; }

template <typename T>
struct BlockCache {
  FeatureMap<T> input;     // x_i
  FeatureMap<T> conv_out;  // z = conv(x_i)
  FeatureMap<T> film_out;  // u = film(z)
  std::vector<T> film_params;  // [gamma | beta]
};

template <typename T>
struct ForwardCache {
  std::vector<T> conditioning;
  std::vector<BlockCache<T>> blocks;
  FeatureMap<T> last;  // output of the final block
};

template <typename T>
struct ModelGradients {
  std::vector<T> params;        // same layout as TcnModel::params
  std::vector<T> conditioning;  // d loss / d c
  FeatureMap<T> input;          // d loss / d x
};

template <typename T>
class TcnModel {
 public:
  TcnModel() : TcnModel(ModelConfig{}) {}
  explicit TcnModel(const ModelConfig& cfg, std::uint64_t seed = 0)
      : config_(cfg), layout_(cfg), seed_(seed), params_(layout_.total, T(0)) {}

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t param_count() const { return params_.size(); }

  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }

  ConvView<T> conv(int i) const {
    const auto& b = layout_.blocks.at(static_cast<std::size_t>(i));
    const auto C = static_cast<std::size_t>(config_.channels);
    return {slice(b.conv_w, C * b.in_channels * config_.kernel_size), slice(b.conv_b, C), config_.channels,
            b.in_channels, config_.kernel_size, b.dilation};
  }
  ConvView<T> residual(int i) const {
    const auto& b = layout_.blocks.at(static_cast<std::size_t>(i));
    const auto C = static_cast<std::size_t>(config_.channels);
    return {slice(b.res_w, C * b.in_channels), slice(b.res_b, C), config_.channels, b.in_channels, 1, 1};
  }
  ConvView<T> output() const {
    return {slice(layout_.out_w, static_cast<std::size_t>(config_.channels)), slice(layout_.out_b, 1), 1,
            config_.channels, 1, 1};
  }
  std::span<const T> film_weights(int i) const {
    return slice(block(i).film_w, 2 * static_cast<std::size_t>(config_.channels) * config_.cond_dim);
  }
  std::span<const T> film_bias(int i) const { return slice(block(i).film_b, 2 * static_cast<std::size_t>(config_.channels)); }
  std::span<const T> prelu_slopes(int i) const { return slice(block(i).prelu, static_cast<std::size_t>(config_.channels)); }

  std::span<T> film_weights(int i) {
    return mslice(block(i).film_w, 2 * static_cast<std::size_t>(config_.channels) * config_.cond_dim);
  }

  template <typename U>
  TcnModel<U> cast() const {
    TcnModel<U> out(config_, seed_);
    for (std::size_t k = 0; k < params_.size(); ++k) out.params()[k] = static_cast<U>(params_[k]);
    return out;
  }

  bool operator==(const TcnModel& o) const {
    return config_ == o.config_ && seed_ == o.seed_ && params_ == o.params_;
  }

 private:
  const ParamLayout::Block& block(int i) const { return layout_.blocks.at(static_cast<std::size_t>(i)); }
  std::span<const T> slice(std::size_t at, std::size_t n) const { return std::span<const T>(params_).subspan(at, n); }
  std::span<T> mslice(std::size_t at, std::size_t n) { return std::span<T>(params_).subspan(at, n); }

  ModelConfig config_;
  ParamLayout layout_;
  std::uint64_t seed_ = 0;
  std::vector<T> params_;
};

inline constexpr double kPreluInitSlope = 0.25;
inline constexpr double kFilmInitRange = 0.05;

template <typename T = float>
TcnModel<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  TcnModel<T> model(cfg, seed);
  const ParamLayout& lay = model.layout();
  auto p = model.params();
  Rng rng(seed);
  auto fill_uniform = [&](std::size_t at, std::size_t n, double bound) {
    for (std::size_t k = 0; k < n; ++k) p[at + k] = static_cast<T>(rng.uniform(-bound, bound));
  };
  const auto C = static_cast<std::size_t>(cfg.channels);
  const auto K = static_cast<std::size_t>(cfg.kernel_size);
  const auto D = static_cast<std::size_t>(cfg.cond_dim);
  for (const auto& b : lay.blocks) {
    const auto in = static_cast<std::size_t>(b.in_channels);
    const double conv_bound = std::sqrt(1.0 / static_cast<double>(in * K));
    fill_uniform(b.conv_w, C * in * K, conv_bound);
    fill_uniform(b.conv_b, C, conv_bound);
    fill_uniform(b.film_w, 2 * C * D, kFilmInitRange);
    for (std::size_t k = 0; k < 2 * C; ++k) p[b.film_b + k] = k < C ? T(1) : T(0);
    for (std::size_t k = 0; k < C; ++k) p[b.prelu + k] = static_cast<T>(kPreluInitSlope);
    const double res_bound = std::sqrt(1.0 / static_cast<double>(in));
    fill_uniform(b.res_w, C * in, res_bound);
    fill_uniform(b.res_b, C, res_bound);
  }
  const double out_bound = std::sqrt(1.0 / static_cast<double>(C));
  fill_uniform(lay.out_w, C, out_bound);
  fill_uniform(lay.out_b, 1, out_bound);
  return model;
}

// Runs the network on a single-channel feature map (1 x N). When `cache` is
// non-null it receives every intermediate needed by backward().
template <typename T>
FeatureMap<T> forward(const TcnModel<T>& model, const FeatureMap<T>& x, std::span<const T> c,
                      ForwardCache<T>* cache = nullptr) {
  const ModelConfig& cfg = model.config();
  require(x.channels == 1, "model input must be a single channel");
  require(c.size() == static_cast<std::size_t>(cfg.cond_dim),
          "conditioning has " + std::to_string(c.size()) + " values, model expects " + std::to_string(cfg.cond_dim));
  if (cache) {
    cache->conditioning.assign(c.begin(), c.end());
    cache->blocks.clear();
    cache->blocks.reserve(static_cast<std::size_t>(cfg.layers));
  }
  const auto C = static_cast<std::size_t>(cfg.channels);
  FeatureMap<T> h = x;
  for (int i = 0; i < cfg.layers; ++i) {
    std::vector<T> gb = linear_fwd<T>(c, model.film_weights(i), model.film_bias(i));
    const std::span<const T> gamma(gb.data(), C), beta(gb.data() + C, C);
    FeatureMap<T> z = conv1d_causal_fwd(h, model.conv(i));
    FeatureMap<T> u = film_fwd(z, gamma, beta);
    FeatureMap<T> out = prelu_fwd(u, model.prelu_slopes(i));
    const FeatureMap<T> r = conv1d_causal_fwd(h, model.residual(i));
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] += r.data[k];
    if (cache) {
      cache->blocks.push_back({std::move(h), std::move(z), std::move(u), std::move(gb)});
    }
    h = std::move(out);
  }
  FeatureMap<T> y = conv1d_causal_fwd(h, model.output());
  if (cache) cache->last = std::move(h);
  return y;
}

template <typename T>
ModelGradients<T> backward(const TcnModel<T>& model, const ForwardCache<T>& cache, const FeatureMap<T>& grad_output) {
  const ModelConfig& cfg = model.config();
  if (cache.blocks.size() != static_cast<std::size_t>(cfg.layers) || cache.last.channels != cfg.channels) {
    fail(ErrorKind::kInvalidArgument, "backward needs the cache of a forward pass run with keep_cache");
  }
  require(grad_output.channels == 1 && grad_output.frames == cache.last.frames,
          "grad_output must be 1 x N matching the forward output");
  const ParamLayout& lay = model.layout();
  const auto C = static_cast<std::size_t>(cfg.channels);
  ModelGradients<T> g;
  g.params.assign(model.param_count(), T(0));
  g.conditioning.assign(static_cast<std::size_t>(cfg.cond_dim), T(0));
  auto put = [&g](std::size_t at, const std::vector<T>& v) { std::copy(v.begin(), v.end(), g.params.begin() + at); };

  ConvGrads<T> og = conv1d_causal_bwd(cache.last, model.output(), grad_output);
  put(lay.out_w, og.grad_weights);
  put(lay.out_b, og.grad_bias);
  FeatureMap<T> grad_h = std::move(og.grad_x);

  for (int i = cfg.layers - 1; i >= 0; --i) {
    const BlockCache<T>& bc = cache.blocks[static_cast<std::size_t>(i)];
    const auto& b = lay.blocks[static_cast<std::size_t>(i)];
    const std::span<const T> gamma(bc.film_params.data(), C), beta(bc.film_params.data() + C, C);

    PreluGrads<T> pg = prelu_bwd(bc.film_out, model.prelu_slopes(i), grad_h);
    put(b.prelu, pg.grad_slopes);
    FilmGrads<T> fg = film_bwd(bc.conv_out, gamma, beta, pg.grad_x);
    std::vector<T> grad_gb(fg.grad_gamma);
    grad_gb.insert(grad_gb.end(), fg.grad_beta.begin(), fg.grad_beta.end());
    LinearGrads<T> lg = linear_bwd<T>(cache.conditioning, model.film_weights(i), model.film_bias(i), grad_gb);
    put(b.film_w, lg.grad_W);
    put(b.film_b, lg.grad_b);
    for (std::size_t j = 0; j < g.conditioning.size(); ++j) g.conditioning[j] += lg.grad_c[j];

    ConvGrads<T> cg = conv1d_causal_bwd(bc.input, model.conv(i), fg.grad_x);
    put(b.conv_w, cg.grad_weights);
    put(b.conv_b, cg.grad_bias);
    ConvGrads<T> rg = conv1d_causal_bwd(bc.input, model.residual(i), grad_h);
    put(b.res_w, rg.grad_weights);
    put(b.res_b, rg.grad_bias);
    for (std::size_t k = 0; k < cg.grad_x.data.size(); ++k) cg.grad_x.data[k] += rg.grad_x.data[k];
    grad_h = std::move(cg.grad_x);
  }
  g.input = std::move(grad_h);
  return g;
}

// Renders a mono buffer through a float model.
inline AudioBuffer forward(const TcnModel<float>& model, const AudioBuffer& x, std::span<const float> c) {
  x.validate();
  require(x.channels() == 1, "model input must be mono");
  if (x.sample_rate != model.config().sample_rate) {
    fail(ErrorKind::kInvalidArgument, "input sample rate " + std::to_string(x.sample_rate) +
                                          " Hz does not match model sample rate " +
                                          std::to_string(model.config().sample_rate) + " Hz");
  }
  FeatureMap<float> in(1, x.frames());
  std::copy(x.samples[0].begin(), x.samples[0].end(), in.data.begin());
  FeatureMap<float> y = forward(model, in, c);
  return AudioBuffer::mono(std::move(y.data), x.sample_rate);
}

}  // namespace nafx
