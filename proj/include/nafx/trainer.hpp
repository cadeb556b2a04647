#pragma once

// Steering: fit the conditional TCN to one clean/processed pair with the
// conditioning held at zero, using Adam and a staged learning-rate schedule.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "nafx/audio_io.hpp"
#include "nafx/checkpoint.hpp"
#include "nafx/diffkit.hpp"
#include "nafx/error.hpp"
#include "nafx/mrstft.hpp"
#include "nafx/tcn.hpp"

namespace nafx {

struct LrMilestone {
  double fraction = 1.0;  // position within the run, (0, 1]
  double factor = 1.0;    // multiplier applied to base_lr from there on

  bool operator==(const LrMilestone&) const = default;
};

struct TrainConfig {
  int iterations = 2500;
  double base_lr = 1e-3;
  std::vector<LrMilestone> milestones = {{0.8, 0.1}, {0.95, 0.01}};
  std::uint64_t seed = 0;
  std::vector<StftResolution> resolutions = default_resolutions();
  int log_every = 50;
  std::string checkpoint_path;
  std::size_t crop_length = 0;  // 0 trains on the full sequence every iteration
  double clip_norm = 0.0;       // 0 disables gradient-norm clipping

  void validate() const {
    require(iterations >= 1, "iterations must be >= 1");
    require(base_lr > 0.0 && std::isfinite(base_lr), "learning rate must be positive");
    require(log_every >= 1, "log_every must be >= 1");
    require(clip_norm >= 0.0, "clip_norm must be >= 0");
    require(!resolutions.empty(), "at least one STFT resolution is required");
    for (const auto& r : resolutions) r.validate();
    double prev = 0.0;
    for (const auto& m : milestones) {
      require(m.fraction > prev && m.fraction <= 1.0, "LR milestone fractions must be strictly increasing in (0, 1]");
      require(m.factor > 0.0, "LR milestone factors must be positive");
      prev = m.fraction;
    }
  }

  std::size_t max_fft_size() const {
    int m = 0;
    for (const auto& r : resolutions) m = std::max(m, r.fft_size);
    return static_cast<std::size_t>(m);
  }
};

// base_lr, scaled by the factor of the last milestone whose start
// floor(fraction * iterations) has been reached.
inline double lr_at(int iteration, const TrainConfig& cfg) {
  require(iteration >= 0 && iteration < cfg.iterations, "iteration out of range for the schedule");
  double factor = 1.0;
  for (const auto& m : cfg.milestones) {
    const auto start = static_cast<int>(std::floor(m.fraction * cfg.iterations + 1e-9));
    if (iteration >= start) factor = m.factor;
  }
  return cfg.base_lr * factor;
}

struct IterationRecord {
  int iteration = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double sc_total = 0.0;      // mean spectral convergence over resolutions
  double logmag_total = 0.0;  // mean log-magnitude distance over resolutions

  bool operator==(const IterationRecord&) const = default;
};

struct TrainHistory {
  std::vector<IterationRecord> records;
  double duration_s = 0.0;
};

inline std::string history_csv(const TrainHistory& h) {
  std::string out = "iteration,lr,loss_total,sc_total,logmag_total\n";
  char line[160];
  for (const auto& r : h.records) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.lr, r.loss_total, r.sc_total,
                  r.logmag_total);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic reference effects used to manufacture steering targets.

class ReferenceEffect {
 public:
  enum class Kind { kGain, kSoftclip, kEcho, kOnepoleLowpass };

  static ReferenceEffect gain(double g) { return {Kind::kGain, g, 0.0}; }
  static ReferenceEffect softclip(double drive = 4.0) { return {Kind::kSoftclip, drive, 0.0}; }
  static ReferenceEffect echo(double delay_samples, double mix) {
    require(delay_samples >= 1.0 && delay_samples == std::floor(delay_samples),
            "echo delay must be a positive whole number of samples");
    return {Kind::kEcho, delay_samples, mix};
  }
  static ReferenceEffect onepole_lowpass(double cutoff_hz) {
    require(cutoff_hz > 0.0, "lowpass cutoff must be positive");
    return {Kind::kOnepoleLowpass, cutoff_hz, 0.0};
  }

  Kind kind() const { return kind_; }

  AudioBuffer apply(const AudioBuffer& in) const {
    in.validate();
    AudioBuffer out = in;
    for (auto& ch : out.samples) {
      const std::vector<float> x = ch;
      switch (kind_) {
        case Kind::kGain:
          for (auto& v : ch) v = static_cast<float>(a_ * v);
          break;
        case Kind::kSoftclip:
          for (auto& v : ch) v = static_cast<float>(std::tanh(a_ * v));
          break;
        case Kind::kEcho: {
          const auto d = static_cast<std::size_t>(a_);
          for (std::size_t n = d; n < ch.size(); ++n) ch[n] = static_cast<float>(x[n] + b_ * x[n - d]);
          break;
        }
        case Kind::kOnepoleLowpass: {
          require(a_ < in.sample_rate / 2.0, "lowpass cutoff must be below Nyquist");
          const double pole = std::exp(-2.0 * std::numbers::pi * a_ / in.sample_rate);
          double y = 0.0;
          for (std::size_t n = 0; n < ch.size(); ++n) {
            y = (1.0 - pole) * x[n] + pole * y;
            ch[n] = static_cast<float>(y);
          }
          break;
        }
      }
    }
    return out;
  }

 private:
  ReferenceEffect(Kind k, double a, double b) : kind_(k), a_(a), b_(b) {}
  Kind kind_;
  double a_;
  double b_;
};

// "gain:0.5", "softclip[:drive]", "echo:<delay_samples>,<mix>",
// "onepole_lowpass:<cutoff_hz>".
inline ReferenceEffect make_reference_effect(std::string_view spec) {
  const auto colon = spec.find(':');
  const std::string_view name = spec.substr(0, colon);
  std::vector<double> args;
  if (colon != std::string_view::npos) {
    std::string_view rest = spec.substr(colon + 1);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      args.push_back(detail::parse_number(rest.substr(0, comma), "effect parameter"));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
  }
  auto arity = [&](std::size_t lo, std::size_t hi) {
    require(args.size() >= lo && args.size() <= hi,
            "wrong number of parameters for effect '" + std::string(name) + "'");
  };
  if (name == "gain") {
    arity(1, 1);
    return ReferenceEffect::gain(args[0]);
  }
  if (name == "softclip") {
    arity(0, 1);
    return ReferenceEffect::softclip(args.empty() ? 4.0 : args[0]);
  }
  if (name == "echo") {
    arity(2, 2);
    return ReferenceEffect::echo(args[0], args[1]);
  }
  if (name == "onepole_lowpass") {
    arity(1, 1);
    return ReferenceEffect::onepole_lowpass(args[0]);
  }
  fail(ErrorKind::kInvalidArgument, "unknown reference effect '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------

struct TrainState {
  TcnModel<float> model;
  AdamState<float> adam;
  int iteration = 0;  // next iteration to run
  TrainHistory history;
};

inline constexpr std::string_view kTrainStateMagic = "NAFS";
inline constexpr std::uint32_t kTrainStateVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(std::string_view s, std::size_t at) {
  return static_cast<std::uint64_t>(get_u32(s, at)) | (static_cast<std::uint64_t>(get_u32(s, at + 4)) << 32);
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::string_view s, std::size_t at) { return std::bit_cast<double>(get_u64(s, at)); }

}  // namespace detail

// Resumable trainer state: the model checkpoint plus Adam moments, the
// iteration counter and the loss trace, followed by a CRC-32.
inline std::string encode_train_state(const TrainState& st) {
  const std::string ckpt = encode_checkpoint(st.model);
  std::string out(kTrainStateMagic);
  detail::put_u32(out, kTrainStateVersion);
  detail::put_u64(out, ckpt.size());
  out += ckpt;
  detail::put_u64(out, static_cast<std::uint64_t>(st.adam.step_count));
  detail::put_f64(out, st.adam.beta1);
  detail::put_f64(out, st.adam.beta2);
  detail::put_f64(out, st.adam.epsilon);
  for (float v : st.adam.first_moment) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  for (float v : st.adam.second_moment) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  detail::put_u32(out, static_cast<std::uint32_t>(st.iteration));
  detail::put_f64(out, st.history.duration_s);
  detail::put_u32(out, static_cast<std::uint32_t>(st.history.records.size()));
  for (const auto& r : st.history.records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.iteration));
    detail::put_f64(out, r.lr);
    detail::put_f64(out, r.loss_total);
    detail::put_f64(out, r.sc_total);
    detail::put_f64(out, r.logmag_total);
  }
  detail::put_u32(out, crc32_of(out));
  return out;
}

inline TrainState decode_train_state(std::string_view bytes) {
  auto need = [&](std::size_t n) {
    if (bytes.size() < n) fail(ErrorKind::kFormat, "train state truncated");
  };
  need(16);
  if (bytes.substr(0, 4) != kTrainStateMagic) fail(ErrorKind::kFormat, "train state magic check failed: expected \"NAFS\"");
  if (detail::get_u32(bytes, 4) != kTrainStateVersion) fail(ErrorKind::kFormat, "train state version mismatch");
  const std::uint32_t stored = detail::get_u32(bytes, bytes.size() - 4);
  if (stored != crc32_of(bytes.substr(0, bytes.size() - 4))) fail(ErrorKind::kFormat, "train state CRC mismatch");

  const std::uint64_t ckpt_len = detail::get_u64(bytes, 8);
  std::size_t at = 16;
  need(at + ckpt_len);
  TrainState st{decode_checkpoint(bytes.substr(at, ckpt_len)), {}, 0, {}};
  at += ckpt_len;
  const std::size_t P = st.model.param_count();
  need(at + 32 + 8 * P + 16);
  st.adam.step_count = static_cast<long>(detail::get_u64(bytes, at));
  st.adam.beta1 = detail::get_f64(bytes, at + 8);
  st.adam.beta2 = detail::get_f64(bytes, at + 16);
  st.adam.epsilon = detail::get_f64(bytes, at + 24);
  at += 32;
  st.adam.first_moment.resize(P);
  st.adam.second_moment.resize(P);
  for (std::size_t k = 0; k < P; ++k, at += 4) st.adam.first_moment[k] = std::bit_cast<float>(detail::get_u32(bytes, at));
  for (std::size_t k = 0; k < P; ++k, at += 4) st.adam.second_moment[k] = std::bit_cast<float>(detail::get_u32(bytes, at));
  st.iteration = static_cast<int>(detail::get_u32(bytes, at));
  st.history.duration_s = detail::get_f64(bytes, at + 4);
  const std::uint32_t count = detail::get_u32(bytes, at + 12);
  at += 16;
  need(at + static_cast<std::size_t>(count) * 36 + 4);
  for (std::uint32_t i = 0; i < count; ++i, at += 36) {
    st.history.records.push_back({static_cast<int>(detail::get_u32(bytes, at)), detail::get_f64(bytes, at + 4),
                                  detail::get_f64(bytes, at + 12), detail::get_f64(bytes, at + 20),
                                  detail::get_f64(bytes, at + 28)});
  }
  return st;
}

inline void save_train_state(const TrainState& st, const std::string& path) { write_file(path, encode_train_state(st)); }

inline TrainState load_train_state(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_train_state(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

// Owns the model during steering. step() runs exactly one iteration.
class Steerer {
 public:
  using LogFn = std::function<void(const IterationRecord&)>;

  Steerer(const AudioBuffer& input, const AudioBuffer& target, const ModelConfig& model_config,
          const TrainConfig& train_config)
      : Steerer(input, target, train_config,
                fresh_state(model_config, train_config)) {}

  Steerer(const AudioBuffer& input, const AudioBuffer& target, const TrainConfig& train_config, TrainState state)
      : cfg_(train_config), state_(std::move(state)) {
    cfg_.validate();
    input.validate();
    target.validate();
    const ModelConfig& mc = state_.model.config();
    require(input.sample_rate == target.sample_rate, "input and target sample rates differ (" +
                                                         std::to_string(input.sample_rate) + " vs " +
                                                         std::to_string(target.sample_rate) + " Hz)");
    require(input.sample_rate == mc.sample_rate, "input sample rate does not match the model sample rate");
    require(input.frames() == target.frames(), "input and target lengths differ (" + std::to_string(input.frames()) +
                                                   " vs " + std::to_string(target.frames()) + " samples)");
    require(state_.iteration >= 0 && state_.iteration <= cfg_.iterations, "resume iteration beyond the schedule");
    require(state_.adam.first_moment.size() == state_.model.param_count(), "optimizer state does not match the model");

    const AudioBuffer x = to_mono(input);
    const AudioBuffer y = to_mono(target);
    if (input.channels() > 1 || target.channels() > 1) warnings_.push_back("multichannel audio collapsed to mono");
    const std::size_t window = cfg_.crop_length > 0 ? std::min(cfg_.crop_length, x.frames()) : x.frames();
    require(window >= cfg_.max_fft_size(), "training signal (" + std::to_string(window) +
                                               " samples) is shorter than the largest STFT size " +
                                               std::to_string(cfg_.max_fft_size()));
    const auto rf = receptive_field(mc).samples;
    if (static_cast<std::int64_t>(window) < rf) {
      warnings_.push_back("training signal (" + std::to_string(window) + " samples) is shorter than the receptive field (" +
                          std::to_string(rf) + " samples)");
    }
    input_ = x.samples[0];
    target_ = y.samples[0];
    conditioning_.assign(static_cast<std::size_t>(mc.cond_dim), 0.0f);
    if (cfg_.crop_length == 0 || cfg_.crop_length >= input_.size()) {
      loss_.emplace(std::span<const float>(target_), cfg_.resolutions);
    }
  }

  bool done() const { return state_.iteration >= cfg_.iterations; }
  int iteration() const { return state_.iteration; }
  const TcnModel<float>& model() const { return state_.model; }
  const TrainHistory& history() const { return state_.history; }
  const TrainState& state() const { return state_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  IterationRecord step() {
    require(!done(), "steering already finished");
    const auto t0 = std::chrono::steady_clock::now();
    const int it = state_.iteration;
    const double lr = lr_at(it, cfg_);

    // The conditioning is fixed at zero for the whole run.
    for (float c : conditioning_) {
      if (c != 0.0f) fail(ErrorKind::kNumerical, "steering conditioning drifted from zero");
    }

    std::size_t offset = 0;
    std::size_t length = input_.size();
    std::optional<MrStftLoss> cropped_loss;
    MrStftLoss* loss = loss_ ? &*loss_ : nullptr;
    if (!loss) {
      length = cfg_.crop_length;
      offset = static_cast<std::size_t>(crop_hash(cfg_.seed, it) % (input_.size() - length + 1));
      cropped_loss.emplace(std::span<const float>(target_).subspan(offset, length), cfg_.resolutions);
      loss = &*cropped_loss;
    }

    FeatureMap<float> x(1, length);
    std::copy_n(input_.begin() + static_cast<std::ptrdiff_t>(offset), length, x.data.begin());
    ForwardCache<float> cache;
    const FeatureMap<float> y_hat = forward(state_.model, x, std::span<const float>(conditioning_), &cache);

    std::vector<float> grad;
    const LossReport report = loss->evaluate(std::span<const float>(y_hat.data), &grad);
    if (!std::isfinite(report.total)) {
      fail(ErrorKind::kNumerical, "non-finite loss at iteration " + std::to_string(it));
    }

    FeatureMap<float> grad_out(1, length);
    grad_out.data = std::move(grad);
    ModelGradients<float> g = backward(state_.model, cache, grad_out);
    if (cfg_.clip_norm > 0.0) clip(g.params, cfg_.clip_norm);
    try {
      adam_step(state_.model.params(), std::span<const float>(g.params), state_.adam, lr);
    } catch (const Error& e) {
      fail(e.kind(), std::string(e.what()) + " at iteration " + std::to_string(it));
    }

    IterationRecord rec{it, lr, report.total, report.spectral_convergence(), report.log_magnitude()};
    state_.history.records.push_back(rec);
    ++state_.iteration;
    state_.history.duration_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  // Runs until done, or until `stop_at` iterations have completed.
  void run(const LogFn& on_log = {}, int stop_at = -1) {
    while (!done() && (stop_at < 0 || state_.iteration < stop_at)) {
      const IterationRecord rec = step();
      if (on_log && (rec.iteration % cfg_.log_every == 0 || done())) on_log(rec);
    }
  }

 private:
  static TrainState fresh_state(const ModelConfig& mc, const TrainConfig& tc) {
    TcnModel<float> model = init_model<float>(mc, tc.seed);
    AdamState<float> adam(model.param_count());
    return {std::move(model), std::move(adam), 0, {}};
  }

  static std::uint64_t crop_hash(std::uint64_t seed, int it) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(it) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static void clip(std::vector<float>& g, double max_norm) {
    const double norm = std::sqrt(detail::dot(g.data(), g.data(), g.size()));
    if (norm > max_norm) {
      const auto s = static_cast<float>(max_norm / norm);
      for (auto& v : g) v *= s;
    }
  }

  TrainConfig cfg_;
  TrainState state_;
  std::vector<float> input_;
  std::vector<float> target_;
  std::vector<float> conditioning_;
  std::optional<MrStftLoss> loss_;
  std::vector<std::string> warnings_;
};

struct SteerResult {
  TcnModel<float> model;
  TrainHistory history;
  std::vector<std::string> warnings;
};

inline SteerResult steer(const AudioBuffer& input, const AudioBuffer& target, const ModelConfig& model_config,
                         const TrainConfig& train_config, const Steerer::LogFn& on_log = {}) {
  Steerer s(input, target, model_config, train_config);
  s.run(on_log);
  if (!train_config.checkpoint_path.empty()) save_checkpoint(s.model(), train_config.checkpoint_path);
  return {s.model(), s.history(), s.warnings()};
}

}  // namespace nafx
