#pragma once

// Checkpoint layout (all integers little-endian):
//
//   "NAFX"                       4-byte magic
//   u32 version                  kCheckpointVersion
//   u32 n, n bytes               UTF-8 JSON config object
//   f32 x param_count            parameters in declaration order
//   u32 crc                      CRC-32 of every preceding byte

#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>
#include <zlib.h>

#include "nafx/audio_io.hpp"
#include "nafx/error.hpp"
#include "nafx/tcn.hpp"

namespace nafx {

inline constexpr std::string_view kCheckpointMagic = "NAFX";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"layers", cfg.layers},           {"channels", cfg.channels}, {"kernel_size", cfg.kernel_size},
          {"dilation_growth", cfg.dilation_growth}, {"cond_dim", cfg.cond_dim}, {"sample_rate", cfg.sample_rate}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.layers = j.at("layers").get<int>();
    cfg.channels = j.at("channels").get<int>();
    cfg.kernel_size = j.at("kernel_size").get<int>();
    cfg.dilation_growth = j.at("dilation_growth").get<int>();
    cfg.cond_dim = j.at("cond_dim").get<int>();
    cfg.sample_rate = j.at("sample_rate").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("checkpoint config: ") + e.what());
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kFormat, std::string("checkpoint config invalid: ") + e.what());
  }
  return cfg;
}

inline std::string encode_checkpoint(const TcnModel<float>& model) {
  nlohmann::json cfg = config_to_json(model.config());
  cfg["seed"] = model.seed();
  cfg["param_count"] = model.param_count();
  const std::string text = cfg.dump();

  std::string out;
  out.reserve(16 + text.size() + 4 * model.param_count());
  out += kCheckpointMagic;
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (float p : model.params()) detail::put_u32(out, std::bit_cast<std::uint32_t>(p));
  detail::put_u32(out, crc32_of(out));
  return out;
}

inline TcnModel<float> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != kCheckpointMagic) {
    fail(ErrorKind::kFormat, "checkpoint magic check failed: expected \"NAFX\"");
  }
  if (bytes.size() < 12) fail(ErrorKind::kFormat, "checkpoint truncated in header");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kFormat, "checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }
  const std::uint32_t json_len = detail::get_u32(bytes, 8);
  if (bytes.size() < 12ULL + json_len + 4) fail(ErrorKind::kFormat, "checkpoint truncated in config");

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.substr(12, json_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kFormat, "checkpoint config is not a JSON object");
  const ModelConfig cfg = config_from_json(j);
  const std::size_t expected = param_count(cfg);
  std::uint64_t seed = 0;
  std::optional<std::size_t> declared;
  try {
    if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("param_count")) declared = j.at("param_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("checkpoint config: ") + e.what());
  }
  if (declared) {
    if (*declared != expected) {
      fail(ErrorKind::kFormat, "checkpoint parameter count mismatch: declared " + std::to_string(*declared) +
                                   ", config implies " + std::to_string(expected));
    }
  }
  const std::size_t body = 12 + json_len;
  const std::size_t need = body + 4 * expected + 4;
  if (bytes.size() < need) {
    fail(ErrorKind::kFormat, "checkpoint truncated: " + std::to_string(bytes.size()) + " bytes, expected " +
                                 std::to_string(need));
  }
  if (bytes.size() > need) {
    fail(ErrorKind::kFormat, "checkpoint parameter count mismatch: file holds more data than the config implies");
  }
  const std::uint32_t stored = detail::get_u32(bytes, need - 4);
  if (stored != crc32_of(bytes.substr(0, need - 4))) fail(ErrorKind::kFormat, "checkpoint CRC mismatch");

  TcnModel<float> model(cfg, seed);
  auto p = model.params();
  for (std::size_t k = 0; k < expected; ++k) p[k] = std::bit_cast<float>(detail::get_u32(bytes, body + 4 * k));
  return model;
}

inline void save_checkpoint(const TcnModel<float>& model, const std::string& path) {
  write_file(path, encode_checkpoint(model));
}

inline TcnModel<float> load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

}  // namespace nafx
