#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "nafx/audio_io.hpp"
#include "nafx/error.hpp"

namespace nafx {

inline constexpr double kEdcFloorDb = -120.0;

struct DecayCurve {
  std::vector<double> time_s;
  std::vector<double> level_db;  // 0 dB at t = 0, nonincreasing, floored at kEdcFloorDb
};

// Schroeder backward integration of the squared response, summed over
// channels: 10 log10(sum_{tau >= t} ir^2 / sum_{tau >= 0} ir^2).
inline DecayCurve schroeder_edc(const AudioBuffer& ir) {
  ir.validate();
  const std::size_t N = ir.frames();
  std::vector<double> tail(N + 1, 0.0);
  for (std::size_t n = N; n-- > 0;) {
    double e = 0.0;
    for (const auto& ch : ir.samples) e += static_cast<double>(ch[n]) * static_cast<double>(ch[n]);
    tail[n] = tail[n + 1] + e;
  }
  if (!(tail[0] > 0.0)) fail(ErrorKind::kInvalidArgument, "energy decay curve of an all-zero response");
  DecayCurve c;
  c.time_s.resize(N);
  c.level_db.resize(N);
  double prev = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    c.time_s[n] = static_cast<double>(n) / ir.sample_rate;
    double db = tail[n] > 0.0 ? 10.0 * std::log10(tail[n] / tail[0]) : kEdcFloorDb;
    db = std::clamp(db, kEdcFloorDb, 0.0);
    prev = n == 0 ? 0.0 : std::min(prev, db);
    c.level_db[n] = prev;
  }
  return c;
}

struct T60Estimate {
  double seconds = 0.0;
  bool reduced_confidence = false;  // fitted over -5..-15 dB instead of -5..-25 dB
  double fit_start_db = -5.0;
  double fit_end_db = -25.0;
  std::size_t fit_points = 0;
};

inline constexpr std::size_t kMinFitPoints = 3;

namespace detail {

inline bool fit_decay(const DecayCurve& edc, double hi_db, double lo_db, double& slope, std::size_t& points) {
  const auto it = std::min_element(edc.level_db.begin(), edc.level_db.end());
  if (it == edc.level_db.end() || *it > lo_db) return false;
  double st = 0.0, sl = 0.0, stt = 0.0, stl = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < edc.level_db.size(); ++i) {
    const double l = edc.level_db[i];
    if (l > hi_db) continue;
    if (l < lo_db) break;
    const double t = edc.time_s[i];
    st += t;
    sl += l;
    stt += t * t;
    stl += t * l;
    ++n;
  }
  if (n < kMinFitPoints) return false;
  const double dn = static_cast<double>(n);
  const double denom = dn * stt - st * st;
  if (!(denom > 0.0)) return false;
  slope = (dn * stl - st * sl) / denom;
  points = n;
  return slope < 0.0 && std::isfinite(slope);
}

}  // namespace detail

// Least-squares line over -5..-25 dB extrapolated to 60 dB of decay; falls
// back to -5..-15 dB when the curve never reaches -25 dB.
inline T60Estimate estimate_t60(const DecayCurve& edc) {
  require(edc.time_s.size() == edc.level_db.size(), "decay curve axes differ in length");
  double slope = 0.0;
  std::size_t points = 0;
  if (detail::fit_decay(edc, -5.0, -25.0, slope, points)) return {-60.0 / slope, false, -5.0, -25.0, points};
  if (detail::fit_decay(edc, -5.0, -15.0, slope, points)) return {-60.0 / slope, true, -5.0, -15.0, points};
  fail(ErrorKind::kFitFailure, "T60 fit failed: the energy decay curve has no usable span between -5 and -15 dB");
}

inline std::string edc_csv(const DecayCurve& c) {
  std::string out = "time_s,level_db\n";
  char line[96];
  for (std::size_t i = 0; i < c.time_s.size(); ++i) {
    std::snprintf(line, sizeof line, "%.9g,%.9g\n", c.time_s[i], c.level_db[i]);
    out += line;
  }
  return out;
}

}  // namespace nafx
