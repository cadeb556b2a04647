// nafx: steer a conditional TCN towards a reference effect, render it under
// new conditioning, and measure the result.
//
// Exit codes: 0 success, 1 user error (flags, files, shapes), 2 runtime
// failure (divergence, failed fits, port conflicts).

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nafx/nafx.hpp"
#include "nafx/serve.hpp"

namespace {

constexpr int kExitUser = 1;
constexpr int kExitRuntime = 2;

int exit_code(const nafx::Error& e) {
  switch (e.kind()) {
    case nafx::ErrorKind::kInvalidArgument:
    case nafx::ErrorKind::kIo:
    case nafx::ErrorKind::kFormat:
      return kExitUser;
    default:
      return kExitRuntime;
  }
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt_ms(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

void print_model_config(const nafx::ModelConfig& cfg) {
  const auto rf = nafx::receptive_field(cfg);
  std::cout << "layers=" << cfg.layers << " channels=" << cfg.channels << " kernel_size=" << cfg.kernel_size
            << " dilation_growth=" << cfg.dilation_growth << " cond_dim=" << cfg.cond_dim
            << " sample_rate=" << cfg.sample_rate << "\n"
            << "receptive_field_samples=" << rf.samples << " receptive_field_ms=" << fmt_ms(rf.milliseconds)
            << " param_count=" << nafx::param_count(cfg) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    nafx::write_file(path, text);
  }
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  for (float v : nafx::parse_conditioning(text)) out.push_back(v);
  return out;
}

struct SteerArgs {
  std::string input, target, out = "model.nafx", history = "history.csv", state, resume;
  nafx::ModelConfig model;
  int iters = 2500;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 50;
  std::size_t crop = 0;
  double clip_norm = 0.0;
  int sample_rate = nafx::kDefaultSampleRate;
};

int run_steer(const SteerArgs& a) {
  nafx::AudioBuffer x = nafx::load_audio(a.input, a.sample_rate);
  nafx::AudioBuffer y;
  if (a.target.starts_with("fx:")) {
    y = nafx::make_reference_effect(a.target.substr(3)).apply(x);
  } else {
    y = nafx::load_audio(a.target, x.sample_rate);
  }
  if (x.channels() > 1 || y.channels() > 1) std::cout << "notice: collapsing multichannel input to mono\n";
  x = nafx::to_mono(x);
  y = nafx::to_mono(y);

  nafx::ModelConfig mc = a.model;
  mc.sample_rate = x.sample_rate;
  nafx::TrainConfig tc;
  tc.iterations = a.iters;
  tc.base_lr = a.lr;
  tc.seed = a.seed;
  tc.log_every = a.log_every;
  tc.crop_length = a.crop;
  tc.clip_norm = a.clip_norm;
  tc.checkpoint_path = a.out;

  std::cout << "command=steer input=" << a.input << " target=" << a.target << " iters=" << tc.iterations
            << " lr=" << fmt(tc.base_lr) << " seed=" << tc.seed << " crop=" << tc.crop_length
            << " clip_norm=" << fmt(tc.clip_norm) << " out=" << a.out << " history=" << a.history << "\n";
  print_model_config(mc);

  std::optional<nafx::Steerer> steerer;
  if (!a.resume.empty()) {
    nafx::TrainState st = nafx::load_train_state(a.resume);
    nafx::require(st.model.config() == mc, "resume state was trained with a different model configuration");
    steerer.emplace(x, y, tc, std::move(st));
    std::cout << "resumed_at=" << steerer->iteration() << "\n";
  } else {
    steerer.emplace(x, y, mc, tc);
  }
  for (const auto& w : steerer->warnings()) std::cout << "warning: " << w << "\n";

  steerer->run([](const nafx::IterationRecord& r) {
    std::cout << "iter=" << r.iteration << " lr=" << fmt(r.lr) << " loss=" << fmt(r.loss_total)
              << " sc=" << fmt(r.sc_total) << " logmag=" << fmt(r.logmag_total) << std::endl;
  });

  nafx::save_checkpoint(steerer->model(), a.out);
  if (!a.history.empty()) nafx::write_file(a.history, nafx::history_csv(steerer->history()));
  if (!a.state.empty()) nafx::save_train_state(steerer->state(), a.state);
  const auto& recs = steerer->history().records;
  const auto rf = nafx::receptive_field(mc);
  std::cout << "final_loss=" << fmt(recs.empty() ? 0.0 : recs.back().loss_total)
            << " receptive_field_samples=" << rf.samples << " receptive_field_ms=" << fmt_ms(rf.milliseconds)
            << " duration_s=" << fmt(steerer->history().duration_s) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional TCN audio effects: steer, render, sweep, analyze, decay, serve"};
  app.require_subcommand(1);

  SteerArgs steer;
  auto* cmd_steer = app.add_subcommand("steer", "Fit a conditional TCN to one input/target pair");
  cmd_steer->add_option("--input", steer.input, "Clean input (WAV or impulse:/noise:/sine: source)")->required();
  cmd_steer->add_option("--target", steer.target, "Processed target (WAV, source spec, or fx:<effect>)")->required();
  cmd_steer->add_option("--layers", steer.model.layers, "TCN blocks")->capture_default_str();
  cmd_steer->add_option("--channels", steer.model.channels, "Channels per block")->capture_default_str();
  cmd_steer->add_option("--kernel", steer.model.kernel_size, "Convolution kernel size")->capture_default_str();
  cmd_steer->add_option("--dilation-growth", steer.model.dilation_growth, "Dilation growth factor")->capture_default_str();
  cmd_steer->add_option("--cond-dim", steer.model.cond_dim, "Conditioning dimensions")->capture_default_str();
  cmd_steer->add_option("--iters", steer.iters, "Training iterations")->capture_default_str();
  cmd_steer->add_option("--lr", steer.lr, "Base learning rate")->capture_default_str();
  cmd_steer->add_option("--seed", steer.seed, "Initialization seed")->capture_default_str();
  cmd_steer->add_option("--out", steer.out, "Checkpoint output path")->capture_default_str();
  cmd_steer->add_option("--history", steer.history, "Loss history CSV path (empty to skip)")->capture_default_str();
  cmd_steer->add_option("--log-every", steer.log_every, "Progress interval in iterations")->capture_default_str();
  cmd_steer->add_option("--crop", steer.crop, "Random crop length in samples (0 = full sequence)")->capture_default_str();
  cmd_steer->add_option("--clip-norm", steer.clip_norm, "Gradient norm clip (0 = off)")->capture_default_str();
  cmd_steer->add_option("--state", steer.state, "Write resumable trainer state here when done");
  cmd_steer->add_option("--resume", steer.resume, "Resume from a trainer state file");
  cmd_steer->add_option("--sample-rate", steer.sample_rate, "Sample rate for built-in sources")->capture_default_str();

  std::string model_path, input, cond = "0,0", out_path;
  auto* cmd_render = app.add_subcommand("render", "Process audio with a steered model at a chosen conditioning");
  cmd_render->add_option("--model", model_path, "Checkpoint")->required();
  cmd_render->add_option("--input", input, "Input (WAV or source spec)")->required();
  cmd_render->add_option("--c", cond, "Conditioning values, comma separated")->capture_default_str();
  cmd_render->add_option("--out", out_path, "Output WAV (float32)")->required();

  double sweep_min = -5.0, sweep_max = 5.0;
  int sweep_steps = 11;
  std::string metric = "lufs";
  auto* cmd_sweep = app.add_subcommand("sweep", "Evaluate a metric over a 2-D conditioning lattice");
  cmd_sweep->add_option("--model", model_path, "Checkpoint")->required();
  cmd_sweep->add_option("--input", input, "Input (WAV or source spec, e.g. impulse:2.5s)")->required();
  cmd_sweep->add_option("--min", sweep_min, "Lattice minimum")->capture_default_str();
  cmd_sweep->add_option("--max", sweep_max, "Lattice maximum")->capture_default_str();
  cmd_sweep->add_option("--steps", sweep_steps, "Points per axis")->capture_default_str();
  cmd_sweep->add_option("--metric", metric, "lufs, t60 or rms")->capture_default_str();
  cmd_sweep->add_option("--out", out_path, "CSV output (default stdout)");

  std::string lufs_in, t60_in, edc_in;
  int analyze_rate = nafx::kDefaultSampleRate;
  auto* cmd_analyze = app.add_subcommand("analyze", "Measure loudness, T60 or the energy decay curve of a file");
  auto* o_lufs = cmd_analyze->add_option("--lufs", lufs_in, "Integrated loudness of this audio");
  auto* o_t60 = cmd_analyze->add_option("--t60", t60_in, "T60 of this impulse response");
  auto* o_edc = cmd_analyze->add_option("--edc", edc_in, "Energy decay curve CSV of this impulse response");
  cmd_analyze->add_option("--out", out_path, "CSV output for --edc (default stdout)");
  cmd_analyze->add_option("--sample-rate", analyze_rate, "Sample rate for built-in sources")->capture_default_str();
  o_lufs->excludes(o_t60)->excludes(o_edc);
  o_t60->excludes(o_edc);

  std::string levels = "0.25,0.5,1.0", out_prefix = "decay";
  double decay_len = 2.5;
  std::string decay_c;
  auto* cmd_decay = app.add_subcommand("decay", "Energy decay curves for impulses at several levels");
  cmd_decay->add_option("--model", model_path, "Checkpoint")->required();
  cmd_decay->add_option("--levels", levels, "Impulse amplitudes, comma separated")->capture_default_str();
  cmd_decay->add_option("--length", decay_len, "Response length in seconds")->capture_default_str();
  cmd_decay->add_option("--c", decay_c, "Conditioning (default zero)");
  cmd_decay->add_option("--out-prefix", out_prefix, "Writes <prefix>_summary.csv and <prefix>_level<i>.csv")
      ->capture_default_str();

  int port = 8080;
  std::string host = "127.0.0.1", input_dir, ui_dir;
  double max_duration = 30.0;
  std::size_t quota_mb = 256;
  auto* cmd_serve = app.add_subcommand("serve", "HTTP service for interactive exploration");
  cmd_serve->add_option("--model", model_path, "Checkpoint")->required();
  cmd_serve->add_option("--port", port, "TCP port")->capture_default_str();
  cmd_serve->add_option("--host", host, "Bind address")->capture_default_str();
  cmd_serve->add_option("--input-dir", input_dir, "Directory of WAV files preloaded as sources (id = file stem)");
  cmd_serve->add_option("--ui-dir", ui_dir, "Static UI bundle served at /");
  cmd_serve->add_option("--max-duration", max_duration, "Render cap in seconds")->capture_default_str();
  cmd_serve->add_option("--quota-mb", quota_mb, "Upload quota in MiB")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUser;
  }

  try {
    if (*cmd_steer) return run_steer(steer);

    if (*cmd_render) {
      const nafx::TcnModel<float> model = nafx::load_checkpoint(model_path);
      const std::vector<float> c = nafx::parse_conditioning(cond);
      const nafx::AudioBuffer x = nafx::load_audio(input, model.config().sample_rate);
      std::cout << "command=render model=" << model_path << " input=" << input << " c=" << cond << " out=" << out_path
                << "\n";
      nafx::write_file(out_path, nafx::render_wav(model, x, c));
      return 0;
    }

    if (*cmd_sweep) {
      const nafx::Metric m = nafx::parse_metric(metric);
      nafx::lattice_axis(sweep_min, sweep_max, sweep_steps);
      const nafx::TcnModel<float> model = nafx::load_checkpoint(model_path);
      const nafx::AudioBuffer x = nafx::load_audio(input, model.config().sample_rate);
      std::cerr << "command=sweep model=" << model_path << " input=" << input << " min=" << fmt(sweep_min)
                << " max=" << fmt(sweep_max) << " steps=" << sweep_steps << " metric=" << metric
                << " out=" << (out_path.empty() ? "-" : out_path) << "\n";
      write_text(out_path, nafx::sweep_csv(nafx::grid_sweep(model, x, sweep_min, sweep_max, sweep_steps, m)));
      return 0;
    }

    if (*cmd_analyze) {
      if (!*o_lufs && !*o_t60 && !*o_edc) {
        std::cerr << "analyze needs one of --lufs, --t60, --edc\n" << cmd_analyze->help();
        return kExitUser;
      }
      if (*o_lufs) {
        const nafx::LoudnessResult r = nafx::integrated_loudness(nafx::load_audio(lufs_in, analyze_rate));
        if (r.below_gate) {
          std::cout << "loudness: below gate (no block above -70 LUFS)\n";
        } else {
          std::cout << "integrated_lufs=" << fmt(r.lufs) << "\n";
        }
        return 0;
      }
      const nafx::AudioBuffer ir = nafx::load_audio(*o_t60 ? t60_in : edc_in, analyze_rate);
      const nafx::DecayCurve edc = nafx::schroeder_edc(ir);
      if (*o_edc) {
        write_text(out_path, nafx::edc_csv(edc));
        return 0;
      }
      const nafx::T60Estimate t = nafx::estimate_t60(edc);
      std::cout << "t60_s=" << fmt(t.seconds) << " fit_range_db=" << fmt(t.fit_start_db) << ".." << fmt(t.fit_end_db)
                << " confidence=" << (t.reduced_confidence ? "reduced" : "full") << "\n";
      return 0;
    }

    if (*cmd_decay) {
      const nafx::TcnModel<float> model = nafx::load_checkpoint(model_path);
      std::vector<float> c;
      if (!decay_c.empty()) c = nafx::parse_conditioning(decay_c);
      nafx::require(decay_len > 0.0, "--length must be positive");
      const auto len = static_cast<std::size_t>(std::llround(decay_len * model.config().sample_rate));
      std::cout << "command=decay model=" << model_path << " levels=" << levels << " length=" << fmt(decay_len)
                << " out_prefix=" << out_prefix << "\n";
      const auto reports = nafx::decay_consistency(model, parse_list(levels), len, c);
      nafx::write_file(out_prefix + "_summary.csv", nafx::decay_summary_csv(reports));
      for (std::size_t i = 0; i < reports.size(); ++i) {
        if (!reports[i].curve.time_s.empty()) {
          nafx::write_file(out_prefix + "_level" + std::to_string(i) + ".csv", nafx::edc_csv(reports[i].curve));
        }
      }
      std::cout << nafx::decay_summary_csv(reports);
      return 0;
    }

    if (*cmd_serve) {
      nafx::serve::ServeConfig sc;
      sc.max_render_seconds = max_duration;
      sc.quota_bytes = quota_mb << 20;
      sc.ui_dir = ui_dir;
      nafx::serve::Service service(nafx::load_checkpoint(model_path), sc);
      if (!input_dir.empty()) std::cout << "preloaded_sources=" << service.preload_directory(input_dir) << "\n";
      std::cout << "command=serve model=" << model_path << " host=" << host << " port=" << port
                << " max_duration=" << fmt(max_duration) << " quota_mb=" << quota_mb << "\n";
      httplib::Server server;
      service.bind(server);
      // httplib's default also sets SO_REUSEPORT, which would let us share a port another process is serving.
      server.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof yes);
      });
      if (!server.bind_to_port(host, port)) {
        std::cerr << "error: cannot bind " << host << ":" << port << " (port in use?)\n";
        return kExitRuntime;
      }
      std::cout << "listening=http://" << host << ":" << port << std::endl;
      server.listen_after_bind();
      return 0;
    }
  } catch (const nafx::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUser;
}
