#pragma once

// HTTP facade over one loaded checkpoint:
//
//   GET  /api/model    configuration, receptive field and parameter count
//   POST /api/sources  WAV body -> {"id": ...}
//   POST /api/render   {"conditioning": [...], "source": "<id or spec>"} -> float32 WAV
//   GET  /api/sweep    ?source=&metric=&min=&max=&steps= -> sweep JSON
//
// The model is immutable after construction; uploads and the sweep cache
// are guarded by their own locks.

#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "nafx/audio_io.hpp"
#include "nafx/checkpoint.hpp"
#include "nafx/error.hpp"
#include "nafx/sweep.hpp"
#include "nafx/tcn.hpp"

namespace nafx::serve {

struct ServeConfig {
  double max_render_seconds = 30.0;
  std::size_t quota_bytes = 256u << 20;  // total stored upload samples, 4 bytes each
  std::string ui_dir;                    // static assets served at "/" when set
};

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

inline Response json_response(int status, const nlohmann::json& j) { return {status, "application/json", j.dump()}; }
inline Response error_response(int status, std::string_view message) {
  return json_response(status, {{"error", message}});
}

inline nlohmann::json model_info(const TcnModel<float>& model) {
  const ModelConfig& cfg = model.config();
  const ReceptiveField rf = receptive_field(cfg);
  nlohmann::json j = config_to_json(cfg);
  j["receptive_field_samples"] = rf.samples;
  j["receptive_field_ms"] = rf.milliseconds;
  j["param_count"] = model.param_count();
  return j;
}

class Service {
 public:
  explicit Service(TcnModel<float> model, ServeConfig cfg = {}) : model_(std::move(model)), cfg_(std::move(cfg)) {}

  const TcnModel<float>& model() const { return model_; }
  const ServeConfig& config() const { return cfg_; }

  // Registers audio under a caller-chosen id (directory preloads).
  void add_source(const std::string& id, const AudioBuffer& audio) {
    require(audio.sample_rate == model_.config().sample_rate, "source '" + id + "' has the wrong sample rate");
    AudioBuffer mono = to_mono(audio);
    std::unique_lock lock(sources_mutex_);
    stored_bytes_ += mono.frames() * sizeof(float);
    sources_[id] = std::move(mono);
  }

  std::size_t preload_directory(const std::string& dir) {
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".wav") continue;
      add_source(entry.path().stem().string(), read_wav(entry.path().string()));
      ++n;
    }
    return n;
  }

  Response get_model() const { return json_response(200, model_info(model_)); }

  Response post_source(std::string_view body) {
    AudioBuffer audio;
    try {
      audio = decode_wav(body);
    } catch (const Error& e) {
      return error_response(415, e.what());
    }
    if (audio.sample_rate != model_.config().sample_rate) {
      return error_response(422, "upload sample rate " + std::to_string(audio.sample_rate) +
                                     " Hz does not match model sample rate " +
                                     std::to_string(model_.config().sample_rate) + " Hz");
    }
    AudioBuffer mono = to_mono(audio);
    const std::size_t bytes = mono.frames() * sizeof(float);
    std::unique_lock lock(sources_mutex_);
    if (stored_bytes_ + bytes > cfg_.quota_bytes) {
      return error_response(413, "upload exceeds the source quota of " + std::to_string(cfg_.quota_bytes) + " bytes");
    }
    const std::string id = "src-" + std::to_string(++upload_counter_);
    stored_bytes_ += bytes;
    sources_[id] = std::move(mono);
    return json_response(200, {{"id", id}});
  }

  Response post_render(std::string_view body) const {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      return error_response(400, std::string("request is not valid JSON: ") + e.what());
    }
    if (!req.is_object() || !req.contains("source") || !req["source"].is_string()) {
      return error_response(400, "request needs a string 'source'");
    }
    if (!req.contains("conditioning") || !req["conditioning"].is_array()) {
      return error_response(400, "request needs a 'conditioning' array");
    }
    std::vector<float> c;
    for (const auto& v : req["conditioning"]) {
      if (!v.is_number() || !std::isfinite(v.get<double>())) return error_response(400, "conditioning values must be finite numbers");
      c.push_back(static_cast<float>(v.get<double>()));
    }
    if (c.size() != static_cast<std::size_t>(model_.config().cond_dim)) {
      return error_response(400, "conditioning has " + std::to_string(c.size()) + " values, model expects " +
                                     std::to_string(model_.config().cond_dim));
    }
    double cap = cfg_.max_render_seconds;
    if (req.contains("max_duration")) {
      if (!req["max_duration"].is_number()) return error_response(400, "'max_duration' must be a number");
      cap = std::min(cap, req["max_duration"].get<double>());
    }
    Response r;
    AudioBuffer source;
    if (!lookup(req["source"].get<std::string>(), source, r)) return r;
    if (source.duration() > cap) {
      return error_response(400, "source is " + std::to_string(source.duration()) + " s, render cap is " +
                                     std::to_string(cap) + " s");
    }
    try {
      return {200, "audio/wav", render_wav(model_, source, c)};
    } catch (const Error& e) {
      return error_response(400, e.what());
    }
  }

  Response get_sweep(const std::map<std::string, std::string>& params) {
    auto get = [&](const std::string& key, const std::string& fallback) {
      const auto it = params.find(key);
      return it == params.end() ? fallback : it->second;
    };
    const std::string source_id = get("source", "");
    if (source_id.empty()) return error_response(400, "sweep needs a 'source'");
    double lo = 0.0, hi = 0.0;
    int steps = 0;
    Metric metric = Metric::kRms;
    try {
      lo = detail::parse_number(get("min", "-5"), "min");
      hi = detail::parse_number(get("max", "5"), "max");
      const double s = detail::parse_number(get("steps", "11"), "steps");
      require(s == std::floor(s) && s >= 2 && s <= 101, "steps must be an integer in [2, 101]");
      steps = static_cast<int>(s);
      metric = parse_metric(get("metric", "lufs"));
      lattice_axis(lo, hi, steps);
    } catch (const Error& e) {
      return error_response(400, e.what());
    }
    const std::string key = source_id + "|" + std::string(metric_name(metric)) + "|" + format_value(lo) + "|" +
                            format_value(hi) + "|" + std::to_string(steps);
    {
      std::lock_guard lock(cache_mutex_);
      const auto it = sweep_cache_.find(key);
      if (it != sweep_cache_.end()) return {200, "application/json", it->second};
    }
    Response r;
    AudioBuffer source;
    if (!lookup(source_id, source, r)) return r;
    if (source.duration() > cfg_.max_render_seconds) return error_response(400, "source exceeds the render cap");
    std::string payload;
    try {
      payload = sweep_json(grid_sweep(model_, source, lo, hi, steps, metric)).dump();
    } catch (const Error& e) {
      return error_response(400, e.what());
    }
    std::lock_guard lock(cache_mutex_);
    const auto [it, inserted] = sweep_cache_.emplace(key, std::move(payload));
    return {200, "application/json", it->second};
  }

  void bind(httplib::Server& server) {
    auto send = [](httplib::Response& res, const Response& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server.Get("/api/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_model()); });
    server.Post("/api/sources",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_source(req.body)); });
    server.Post("/api/render",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_render(req.body)); });
    server.Get("/api/sweep", [this, send](const httplib::Request& req, httplib::Response& res) {
      std::map<std::string, std::string> params;
      for (const auto& [k, v] : req.params) params[k] = v;
      send(res, get_sweep(params));
    });
    server.set_payload_max_length(cfg_.quota_bytes + (1u << 20));
    if (!cfg_.ui_dir.empty()) {
      server.set_mount_point("/", cfg_.ui_dir);
    } else {
      server.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(
            "<!doctype html><title>nafx</title><p>No UI bundle mounted. API: GET /api/model, POST /api/sources, "
            "POST /api/render, GET /api/sweep.</p>",
            "text/html");
      });
    }
  }

 private:
  bool lookup(const std::string& id, AudioBuffer& out, Response& err) const {
    if (is_source_spec(id)) {
      try {
        out = make_source(id, model_.config().sample_rate);
        return true;
      } catch (const Error& e) {
        err = error_response(400, e.what());
        return false;
      }
    }
    if (id.find(':') != std::string::npos) {
      err = error_response(400, "unknown source kind in '" + id + "'");
      return false;
    }
    std::shared_lock lock(sources_mutex_);
    const auto it = sources_.find(id);
    if (it == sources_.end()) {
      err = error_response(404, "unknown source '" + id + "'");
      return false;
    }
    out = it->second;
    return true;
  }

  const TcnModel<float> model_;
  const ServeConfig cfg_;

  mutable std::shared_mutex sources_mutex_;
  std::map<std::string, AudioBuffer> sources_;
  std::size_t stored_bytes_ = 0;
  std::size_t upload_counter_ = 0;

  std::mutex cache_mutex_;
  std::map<std::string, std::string> sweep_cache_;
};

}  // namespace nafx::serve
