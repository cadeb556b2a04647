#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nafx/error.hpp"
#include "nafx/rng.hpp"

namespace nafx {

inline constexpr int kDefaultSampleRate = 44100;

// Planar audio: one vector per channel, nominal full scale +/-1.
struct AudioBuffer {
  std::vector<std::vector<float>> samples;
  int sample_rate = kDefaultSampleRate;

  AudioBuffer() = default;
  AudioBuffer(int channels, std::size_t frames, int rate)
      : samples(static_cast<std::size_t>(channels), std::vector<float>(frames, 0.0f)),
        sample_rate(rate) {}

  static AudioBuffer mono(std::vector<float> data, int rate) {
    AudioBuffer b;
    b.samples.push_back(std::move(data));
    b.sample_rate = rate;
    return b;
  }

  int channels() const { return static_cast<int>(samples.size()); }
  std::size_t frames() const { return samples.empty() ? 0 : samples.front().size(); }
  double duration() const { return static_cast<double>(frames()) / sample_rate; }

  std::span<const float> channel(int c) const { return samples.at(static_cast<std::size_t>(c)); }
  std::span<float> channel(int c) { return samples.at(static_cast<std::size_t>(c)); }

  void validate() const {
    require(sample_rate > 0, "sample rate must be positive");
    require(!samples.empty(), "audio buffer has no channels");
    for (const auto& ch : samples) {
      require(ch.size() == samples.front().size(), "audio channels differ in length");
    }
  }

  bool operator==(const AudioBuffer&) const = default;
};

enum class SampleFormat { kFloat32, kPcm16, kPcm24 };

struct WriteReport {
  std::size_t clipped = 0;  // samples clamped into [-1, 1] (integer formats)
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
  return v;
}

inline std::uint16_t get_u16(std::string_view s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) |
                                    (static_cast<unsigned char>(s[at + 1]) << 8));
}

}  // namespace detail

// Encodes a RIFF/WAVE file in memory.
inline std::string encode_wav(const AudioBuffer& buffer, SampleFormat format = SampleFormat::kFloat32,
                              WriteReport* report = nullptr) {
  buffer.validate();
  const auto channels = static_cast<std::uint16_t>(buffer.channels());
  const std::size_t frames = buffer.frames();
  const std::uint16_t bits = format == SampleFormat::kFloat32 ? 32 : format == SampleFormat::kPcm24 ? 24 : 16;
  const std::uint16_t block_align = static_cast<std::uint16_t>(channels * bits / 8);
  const std::uint64_t data_bytes = static_cast<std::uint64_t>(frames) * block_align;
  require(data_bytes + 36 <= 0xffffffffULL, "audio too long for a WAV file");

  std::string out;
  out.reserve(static_cast<std::size_t>(data_bytes) + 44);
  out += "RIFF";
  detail::put_u32(out, static_cast<std::uint32_t>(36 + data_bytes));
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, format == SampleFormat::kFloat32 ? 3 : 1);
  detail::put_u16(out, channels);
  detail::put_u32(out, static_cast<std::uint32_t>(buffer.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(buffer.sample_rate) * block_align);
  detail::put_u16(out, block_align);
  detail::put_u16(out, bits);
  out += "data";
  detail::put_u32(out, static_cast<std::uint32_t>(data_bytes));

  std::size_t clipped = 0;
  for (std::size_t n = 0; n < frames; ++n) {
    for (int c = 0; c < channels; ++c) {
      const float x = buffer.samples[c][n];
      if (format == SampleFormat::kFloat32) {
        detail::put_u32(out, std::bit_cast<std::uint32_t>(x));
        continue;
      }
      float clamped = x;
      if (!(x >= -1.0f && x <= 1.0f)) {
        ++clipped;
        clamped = std::isnan(x) ? 0.0f : std::clamp(x, -1.0f, 1.0f);
      }
      if (format == SampleFormat::kPcm16) {
        const long v = std::clamp(std::lround(static_cast<double>(clamped) * 32768.0), -32768L, 32767L);
        detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
      } else {
        const long v = std::clamp(std::lround(static_cast<double>(clamped) * 8388608.0), -8388608L, 8388607L);
        const auto u = static_cast<std::uint32_t>(v);
        out.push_back(static_cast<char>(u & 0xff));
        out.push_back(static_cast<char>((u >> 8) & 0xff));
        out.push_back(static_cast<char>((u >> 16) & 0xff));
      }
    }
  }
  if (report) report->clipped = clipped;
  return out;
}

// Decodes PCM16, PCM24 or IEEE float32 RIFF/WAVE data.
inline AudioBuffer decode_wav(std::string_view bytes) {
  using detail::get_u16;
  using detail::get_u32;
  if (bytes.size() < 12 || bytes.substr(0, 4) != "RIFF" || bytes.substr(8, 4) != "WAVE") {
    fail(ErrorKind::kFormat, "not a RIFF/WAVE file");
  }
  std::uint16_t tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::string_view data;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string_view id = bytes.substr(pos, 4);
    const std::uint32_t size = get_u32(bytes, pos + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = bytes.size() - body;
    if (id == "fmt ") {
      if (size < 16 || avail < 16) fail(ErrorKind::kFormat, "truncated fmt chunk");
      tag = get_u16(bytes, body);
      channels = get_u16(bytes, body + 2);
      rate = get_u32(bytes, body + 4);
      bits = get_u16(bytes, body + 14);
      if (tag == 0xfffe) {
        if (size < 40 || avail < 40) fail(ErrorKind::kFormat, "truncated extensible fmt chunk");
        tag = get_u16(bytes, body + 24);
      }
      have_fmt = true;
    } else if (id == "data") {
      // Tolerate a data size that overruns the file (streamed writers).
      data = bytes.substr(body, std::min<std::size_t>(size, avail));
      have_data = true;
    }
    if (size > avail) break;
    pos = body + size + (size & 1);
  }
  if (!have_fmt) fail(ErrorKind::kFormat, "WAV file has no fmt chunk");
  if (!have_data) fail(ErrorKind::kFormat, "WAV file has no data chunk");
  if (channels == 0) fail(ErrorKind::kFormat, "WAV file declares zero channels");
  if (rate == 0) fail(ErrorKind::kFormat, "WAV file declares zero sample rate");
  const bool is_float = tag == 3 && bits == 32;
  const bool is_pcm = tag == 1 && (bits == 16 || bits == 24);
  if (!is_float && !is_pcm) {
    fail(ErrorKind::kFormat, "unsupported WAV codec (format tag " + std::to_string(tag) + ", " +
                                 std::to_string(bits) + " bits); expected PCM16, PCM24 or float32");
  }
  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frames = data.size() / (bytes_per_sample * channels);
  if (frames == 0) fail(ErrorKind::kFormat, "WAV file contains no audio");

  AudioBuffer out(channels, frames, static_cast<int>(rate));
  std::size_t at = 0;
  for (std::size_t n = 0; n < frames; ++n) {
    for (std::size_t c = 0; c < channels; ++c, at += bytes_per_sample) {
      float x = 0.0f;
      if (is_float) {
        x = std::bit_cast<float>(get_u32(data, at));
        if (!std::isfinite(x)) fail(ErrorKind::kFormat, "WAV file contains non-finite samples");
      } else if (bits == 16) {
        x = static_cast<float>(static_cast<std::int16_t>(get_u16(data, at)) / 32768.0);
      } else {
        std::uint32_t u = static_cast<unsigned char>(data[at]) |
                          (static_cast<unsigned char>(data[at + 1]) << 8) |
                          (static_cast<unsigned char>(data[at + 2]) << 16);
        if (u & 0x800000u) u |= 0xff000000u;
        x = static_cast<float>(static_cast<std::int32_t>(u) / 8388608.0);
      }
      out.samples[c][n] = x;
    }
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path + "'");
}

inline AudioBuffer read_wav(const std::string& path) {
  try {
    return decode_wav(read_file(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFormat) fail(ErrorKind::kFormat, path + ": " + e.what());
    throw;
  }
}

inline WriteReport write_wav(const std::string& path, const AudioBuffer& buffer,
                             SampleFormat format = SampleFormat::kFloat32) {
  WriteReport report;
  write_file(path, encode_wav(buffer, format, &report));
  return report;
}

inline AudioBuffer to_mono(const AudioBuffer& buffer) {
  buffer.validate();
  if (buffer.channels() == 1) return buffer;
  const std::size_t frames = buffer.frames();
  std::vector<float> mixed(frames);
  const double scale = 1.0 / buffer.channels();
  for (std::size_t n = 0; n < frames; ++n) {
    double acc = 0.0;
    for (const auto& ch : buffer.samples) acc += ch[n];
    mixed[n] = static_cast<float>(acc * scale);
  }
  return AudioBuffer::mono(std::move(mixed), buffer.sample_rate);
}

inline AudioBuffer make_impulse(std::size_t length, double amplitude, int sample_rate) {
  require(length >= 1, "impulse length must be at least one sample");
  require(std::isfinite(amplitude), "impulse amplitude must be finite");
  require(sample_rate > 0, "sample rate must be positive");
  AudioBuffer b(1, length, sample_rate);
  b.samples[0][0] = static_cast<float>(amplitude);
  return b;
}

inline AudioBuffer make_sine(double freq, double amplitude, double duration, int sample_rate) {
  require(sample_rate > 0, "sample rate must be positive");
  require(freq > 0.0 && freq < sample_rate / 2.0, "sine frequency must lie in (0, sample_rate/2)");
  require(duration > 0.0, "duration must be positive");
  const auto frames = static_cast<std::size_t>(std::llround(duration * sample_rate));
  AudioBuffer b(1, std::max<std::size_t>(frames, 1), sample_rate);
  const double w = 2.0 * std::numbers::pi * freq / sample_rate;
  for (std::size_t n = 0; n < b.frames(); ++n) {
    b.samples[0][n] = static_cast<float>(amplitude * std::sin(w * static_cast<double>(n)));
  }
  return b;
}

// Uniform white noise in [-amplitude, amplitude).
inline AudioBuffer make_noise(double duration, double amplitude, int sample_rate, std::uint64_t seed) {
  require(sample_rate > 0, "sample rate must be positive");
  require(duration > 0.0, "duration must be positive");
  const auto frames = static_cast<std::size_t>(std::llround(duration * sample_rate));
  AudioBuffer b(1, std::max<std::size_t>(frames, 1), sample_rate);
  Rng rng(seed);
  for (auto& x : b.samples[0]) x = static_cast<float>(rng.uniform(-amplitude, amplitude));
  return b;
}

namespace detail {

inline double parse_number(std::string_view text, std::string_view what) {
  std::string s(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::kInvalidArgument, "cannot parse " + std::string(what) + " from '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) {
    fail(ErrorKind::kInvalidArgument, "cannot parse " + std::string(what) + " from '" + s + "'");
  }
  return v;
}

// "2.5", "2.5s" or "250ms".
inline double parse_duration(std::string_view text) {
  double scale = 1.0;
  if (text.ends_with("ms")) {
    text.remove_suffix(2);
    scale = 1e-3;
  } else if (text.ends_with("s")) {
    text.remove_suffix(1);
  }
  const double d = parse_number(text, "duration") * scale;
  require(d > 0.0, "duration must be positive");
  return d;
}

}  // namespace detail

inline bool is_source_spec(std::string_view spec) {
  return spec.starts_with("impulse:") || spec.starts_with("noise:") || spec.starts_with("sine:");
}

inline constexpr double kNoiseSourceAmplitude = 0.5;

// Built-in signal sources: impulse:<dur>, noise:<dur>[,<seed>], sine:<freq>,<dur>.
inline AudioBuffer make_source(std::string_view spec, int sample_rate) {
  const auto colon = spec.find(':');
  require(colon != std::string_view::npos, "source spec needs a ':'");
  const std::string_view kind = spec.substr(0, colon);
  const std::string_view args = spec.substr(colon + 1);
  const auto comma = args.find(',');
  const std::string_view first = args.substr(0, comma);
  const std::string_view rest = comma == std::string_view::npos ? std::string_view{} : args.substr(comma + 1);
  if (kind == "impulse") {
    require(rest.empty(), "impulse source takes a single duration");
    const double d = detail::parse_duration(first);
    return make_impulse(static_cast<std::size_t>(std::max(1LL, std::llround(d * sample_rate))), 1.0, sample_rate);
  }
  if (kind == "noise") {
    std::uint64_t seed = 0;
    if (!rest.empty()) seed = static_cast<std::uint64_t>(detail::parse_number(rest, "noise seed"));
    return make_noise(detail::parse_duration(first), kNoiseSourceAmplitude, sample_rate, seed);
  }
  if (kind == "sine") {
    require(!rest.empty(), "sine source needs <freq>,<dur>");
    return make_sine(detail::parse_number(first, "sine frequency"), 1.0, detail::parse_duration(rest), sample_rate);
  }
  fail(ErrorKind::kInvalidArgument, "unknown source kind '" + std::string(kind) + "'");
}

// A WAV path or a built-in source spec.
inline AudioBuffer load_audio(const std::string& path_or_spec, int sample_rate = kDefaultSampleRate) {
  if (is_source_spec(path_or_spec)) return make_source(path_or_spec, sample_rate);
  return read_wav(path_or_spec);
}

}  // namespace nafx
