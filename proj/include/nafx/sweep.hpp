#pragma once

// Rendering with explicit conditioning, conditioning-grid sweeps and the
// varying-level decay report.

#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "nafx/audio_io.hpp"
#include "nafx/decay.hpp"
#include "nafx/error.hpp"
#include "nafx/loudness.hpp"
#include "nafx/tcn.hpp"

namespace nafx {

// "3,-2" -> {3, -2}
inline std::vector<float> parse_conditioning(std::string_view text) {
  std::vector<float> c;
  while (true) {
    const auto comma = text.find(',');
    c.push_back(static_cast<float>(detail::parse_number(text.substr(0, comma), "conditioning value")));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return c;
}

// The single rendering path shared by the CLI and the HTTP service.
inline AudioBuffer render(const TcnModel<float>& model, const AudioBuffer& input, std::span<const float> c) {
  return forward(model, to_mono(input), c);
}

inline std::string render_wav(const TcnModel<float>& model, const AudioBuffer& input, std::span<const float> c) {
  return encode_wav(render(model, input, c), SampleFormat::kFloat32);
}

enum class Metric { kLufs, kT60, kRms };

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::kLufs: return "lufs";
    case Metric::kT60: return "t60";
    case Metric::kRms: return "rms";
  }
  return "?";
}

inline Metric parse_metric(std::string_view name) {
  if (name == "lufs") return Metric::kLufs;
  if (name == "t60") return Metric::kT60;
  if (name == "rms") return Metric::kRms;
  fail(ErrorKind::kInvalidArgument, "unknown metric '" + std::string(name) + "' (expected lufs, t60 or rms)");
}

enum class CellStatus { kOk, kReducedConfidence, kBelowGate, kFitFailure, kNonFinite, kError };

inline std::string_view status_name(CellStatus s) {
  switch (s) {
    case CellStatus::kOk: return "ok";
    case CellStatus::kReducedConfidence: return "reduced_confidence";
    case CellStatus::kBelowGate: return "below_gate";
    case CellStatus::kFitFailure: return "fit_failure";
    case CellStatus::kNonFinite: return "non_finite";
    case CellStatus::kError: return "error";
  }
  return "?";
}

inline bool status_has_value(CellStatus s) { return s == CellStatus::kOk || s == CellStatus::kReducedConfidence; }

struct MetricValue {
  double value = std::nan("");
  CellStatus status = CellStatus::kError;
};

// rms is reported in dBFS, lufs in LUFS, t60 in seconds.
inline MetricValue measure(const AudioBuffer& audio, Metric metric) {
  for (const auto& ch : audio.samples) {
    for (float v : ch) {
      if (!std::isfinite(v)) return {std::nan(""), CellStatus::kNonFinite};
    }
  }
  try {
    switch (metric) {
      case Metric::kRms: {
        double acc = 0.0;
        for (const auto& ch : audio.samples) {
          for (float v : ch) acc += static_cast<double>(v) * v;
        }
        const double ms = acc / static_cast<double>(audio.frames() * audio.samples.size());
        const double db = 10.0 * std::log10(ms);
        if (!std::isfinite(db)) return {std::nan(""), CellStatus::kNonFinite};
        return {db, CellStatus::kOk};
      }
      case Metric::kLufs: {
        const LoudnessResult r = integrated_loudness(audio);
        if (r.below_gate) return {std::nan(""), CellStatus::kBelowGate};
        return {r.lufs, CellStatus::kOk};
      }
      case Metric::kT60: {
        const T60Estimate t = estimate_t60(schroeder_edc(audio));
        return {t.seconds, t.reduced_confidence ? CellStatus::kReducedConfidence : CellStatus::kOk};
      }
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFitFailure || e.kind() == ErrorKind::kInvalidArgument) {
      return {std::nan(""), CellStatus::kFitFailure};
    }
    return {std::nan(""), CellStatus::kError};
  }
  return {};
}

// `steps` evenly spaced values from lo to hi inclusive.
inline std::vector<double> lattice_axis(double lo, double hi, int steps) {
  require(steps >= 2, "a sweep lattice needs at least 2 steps per axis");
  require(std::isfinite(lo) && std::isfinite(hi) && lo < hi, "sweep range must satisfy min < max");
  std::vector<double> axis(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) axis[i] = lo + (hi - lo) * i / (steps - 1);
  axis.back() = hi;
  return axis;
}

struct GridSweep {
  std::vector<double> c0_axis;
  std::vector<double> c1_axis;
  Metric metric = Metric::kRms;
  std::vector<MetricValue> cells;  // row-major: c0 index outer

  const MetricValue& at(std::size_t i, std::size_t j) const { return cells[i * c1_axis.size() + j]; }
};

// Renders the input at every lattice point; conditioning dimensions beyond
// the first two stay at zero. Per-cell metric failures are recorded in the
// cell, not raised.
inline GridSweep grid_sweep(const TcnModel<float>& model, const AudioBuffer& input, double lo, double hi, int steps,
                            Metric metric) {
  require(model.config().cond_dim >= 2, "grid sweeps need a model with at least 2 conditioning dimensions");
  GridSweep g;
  g.c0_axis = lattice_axis(lo, hi, steps);
  g.c1_axis = g.c0_axis;
  g.metric = metric;
  const AudioBuffer mono = to_mono(input);
  std::vector<float> c(static_cast<std::size_t>(model.config().cond_dim), 0.0f);
  for (double c0 : g.c0_axis) {
    for (double c1 : g.c1_axis) {
      c[0] = static_cast<float>(c0);
      c[1] = static_cast<float>(c1);
      g.cells.push_back(measure(forward(model, mono, c), metric));
    }
  }
  return g;
}

inline std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string sweep_csv(const GridSweep& g) {
  std::string out = "c0,c1,metric,value,status\n";
  for (std::size_t i = 0; i < g.c0_axis.size(); ++i) {
    for (std::size_t j = 0; j < g.c1_axis.size(); ++j) {
      const MetricValue& m = g.at(i, j);
      out += format_value(g.c0_axis[i]) + "," + format_value(g.c1_axis[j]) + "," + std::string(metric_name(g.metric)) +
             "," + format_value(m.value) + "," + std::string(status_name(m.status)) + "\n";
    }
  }
  return out;
}

// {c0_axis, c1_axis, values, status}; values and status are |c0| x |c1|
// nested arrays, with null for cells that have no value.
inline nlohmann::json sweep_json(const GridSweep& g) {
  nlohmann::json values = nlohmann::json::array();
  nlohmann::json status = nlohmann::json::array();
  for (std::size_t i = 0; i < g.c0_axis.size(); ++i) {
    nlohmann::json vrow = nlohmann::json::array();
    nlohmann::json srow = nlohmann::json::array();
    for (std::size_t j = 0; j < g.c1_axis.size(); ++j) {
      const MetricValue& m = g.at(i, j);
      vrow.push_back(std::isfinite(m.value) ? nlohmann::json(m.value) : nlohmann::json(nullptr));
      srow.push_back(status_name(m.status));
    }
    values.push_back(std::move(vrow));
    status.push_back(std::move(srow));
  }
  return {{"metric", metric_name(g.metric)}, {"c0_axis", g.c0_axis}, {"c1_axis", g.c1_axis},
          {"values", std::move(values)}, {"status", std::move(status)}};
}

struct DecayReport {
  double level = 0.0;
  DecayCurve curve;
  std::optional<T60Estimate> t60;
  std::string failure;  // set when t60 is empty
};

// Impulses of each amplitude rendered through the model at conditioning `c`
// (zero when empty).
inline std::vector<DecayReport> decay_consistency(const TcnModel<float>& model, const std::vector<double>& levels,
                                                  std::size_t ir_length, std::vector<float> c = {}) {
  require(!levels.empty(), "decay report needs at least one level");
  if (c.empty()) c.assign(static_cast<std::size_t>(model.config().cond_dim), 0.0f);
  std::vector<DecayReport> out;
  for (double level : levels) {
    require(level > 0.0 && std::isfinite(level), "impulse levels must be positive");
    const AudioBuffer ir = forward(model, make_impulse(ir_length, level, model.config().sample_rate), c);
    DecayReport r;
    r.level = level;
    try {
      r.curve = schroeder_edc(ir);
      r.t60 = estimate_t60(r.curve);
    } catch (const Error& e) {
      r.failure = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string decay_summary_csv(const std::vector<DecayReport>& reports) {
  std::string out = "level,t60_s,status\n";
  for (const auto& r : reports) {
    std::string status = r.t60 ? (r.t60->reduced_confidence ? "reduced_confidence" : "ok") : "fit_failure";
    out += format_value(r.level) + "," + format_value(r.t60 ? r.t60->seconds : std::nan("")) + "," + status + "\n";
  }
  return out;
}

}  // namespace nafx
