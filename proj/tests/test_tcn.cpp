#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>
#include <zlib.h>

#include "nafx/checkpoint.hpp"
#include "nafx/tcn.hpp"
#include "oracles.hpp"

namespace {

using nafx::FeatureMap;
using nafx::ModelConfig;
using nafx::TcnModel;

ModelConfig make_config(int L, int C, int K, int g, int D = 2) {
  ModelConfig cfg;
  cfg.layers = L;
  cfg.channels = C;
  cfg.kernel_size = K;
  cfg.dilation_growth = g;
  cfg.cond_dim = D;
  return cfg;
}

template <typename T>
FeatureMap<T> as_map(const std::vector<T>& v) {
  FeatureMap<T> m(1, v.size());
  m.data = v;
  return m;
}

template <typename T>
std::vector<T> run(const TcnModel<T>& m, const std::vector<T>& x, const std::vector<T>& c) {
  return nafx::forward<T>(m, as_map(x), c).data;
}

TEST(ReceptiveField, TableValues) {
  const auto a = nafx::receptive_field(make_config(4, 32, 9, 10));
  EXPECT_EQ(a.samples, 8889);
  EXPECT_NEAR(a.milliseconds, 201.6, 0.05);
  const auto b = nafx::receptive_field(make_config(5, 32, 9, 10));
  EXPECT_EQ(b.samples, 88889);
  EXPECT_NEAR(b.milliseconds, 2015.6, 0.05);
}

TEST(ReceptiveField, SmallCases) {
  for (int g : {1, 2, 10, 1000}) EXPECT_EQ(nafx::receptive_field(make_config(1, 4, 9, g)).samples, 9);
  EXPECT_EQ(nafx::receptive_field(make_config(2, 8, 5, 4)).samples, 21);
  EXPECT_EQ(nafx::receptive_field(make_config(3, 8, 1, 4)).samples, 1);
  EXPECT_THROW(nafx::receptive_field(make_config(0, 8, 5, 4)), nafx::Error);
}

TEST(ParamCount, MatchesLayerSum) {
  for (const auto& cfg : {make_config(4, 32, 9, 10), make_config(2, 3, 3, 2, 5), make_config(1, 1, 1, 1, 1)}) {
    const std::size_t C = cfg.channels, K = cfg.kernel_size, D = cfg.cond_dim;
    std::size_t total = C + 1;
    for (int i = 0; i < cfg.layers; ++i) {
      const std::size_t in = i == 0 ? 1 : C;
      total += C * in * K + C + 2 * C * D + 2 * C + C + C * in + C;
    }
    EXPECT_EQ(nafx::param_count(cfg), total);
    EXPECT_EQ(nafx::init_model(cfg, 1).params().size(), total);
  }
}

TEST(InitModel, Bounds) {
  const auto cfg = make_config(3, 6, 4, 3);
  const auto m = nafx::init_model(cfg, 99);
  for (int i = 0; i < cfg.layers; ++i) {
    const double in = i == 0 ? 1.0 : cfg.channels;
    const auto conv = m.conv(i);
    EXPECT_EQ(conv.dilation, cfg.dilation(i));
    const double bound = std::sqrt(1.0 / (in * cfg.kernel_size));
    for (float w : conv.weights) EXPECT_LE(std::abs(w), bound);
    for (float w : m.film_weights(i)) EXPECT_LE(std::abs(w), nafx::kFilmInitRange);
    for (float s : m.prelu_slopes(i)) EXPECT_EQ(s, 0.25f);
    const auto fb = m.film_bias(i);
    for (int c = 0; c < cfg.channels; ++c) {
      EXPECT_EQ(fb[c], 1.0f);
      EXPECT_EQ(fb[cfg.channels + c], 0.0f);
    }
  }
}

TEST(InitModel, FilmIsIdentityAtZeroConditioning) {
  const auto m = nafx::init_model(make_config(3, 5, 3, 2), 4);
  const std::vector<float> zero(2, 0.0f);
  for (int i = 0; i < 3; ++i) {
    const auto gb = nafx::linear_fwd<float>(zero, m.film_weights(i), m.film_bias(i));
    for (int c = 0; c < 5; ++c) {
      EXPECT_EQ(gb[c], 1.0f);
      EXPECT_EQ(gb[5 + c], 0.0f);
    }
  }
}

TEST(InitModel, Determinism) {
  const auto cfg = make_config(2, 8, 5, 4);
  EXPECT_EQ(nafx::init_model(cfg, 7), nafx::init_model(cfg, 7));
  const auto a = nafx::init_model(cfg, 7), b = nafx::init_model(cfg, 8);
  EXPECT_FALSE(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
}

TEST(Forward, LengthMatchesInput) {
  const auto m = nafx::init_model(make_config(2, 4, 3, 3), 1);
  nafx::Rng rng(2);
  for (std::size_t n : {1u, 2u, 7u, 100u, 4097u, 10000u}) {
    std::vector<float> x(n);
    for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
    EXPECT_EQ(run<float>(m, x, {0.0f, 0.0f}).size(), n);
  }
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 1 + rng.bits() % 10000;
    EXPECT_EQ(run<float>(m, std::vector<float>(n, 0.1f), {1.0f, -1.0f}).size(), n);
  }
}

TEST(Forward, Errors) {
  const auto m = nafx::init_model(make_config(2, 4, 3, 3), 1);
  EXPECT_THROW(run<float>(m, {0.0f, 1.0f}, {0.0f}), nafx::Error);
  const nafx::AudioBuffer wrong_rate = nafx::AudioBuffer::mono({0.0f, 1.0f}, 48000);
  EXPECT_THROW(nafx::forward(m, wrong_rate, std::vector<float>{0.0f, 0.0f}), nafx::Error);
  const nafx::AudioBuffer ok = nafx::AudioBuffer::mono({0.0f, 1.0f}, 44100);
  EXPECT_EQ(nafx::forward(m, ok, std::vector<float>{0.0f, 0.0f}).frames(), 2u);
}

// Bit-level perturbation checks: y[n] ignores x[m] for m > n and for
// m <= n - RF.
TEST(ForwardProperty, CausalityAndFiniteMemory) {
  const auto cfg = make_config(2, 8, 5, 4);
  const auto m = nafx::init_model(cfg, 5);
  const auto rf = static_cast<std::size_t>(nafx::receptive_field(cfg).samples);
  nafx::Rng rng(6);
  const std::size_t N = 200;
  std::vector<float> x(N);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  const std::vector<float> c{0.7f, -1.3f};
  const auto y0 = run<float>(m, x, c);

  auto last = x;
  last.back() += 0.5f;
  const auto y_last = run<float>(m, last, c);
  for (std::size_t n = 0; n + 1 < N; ++n) ASSERT_EQ(y0[n], y_last[n]);
  EXPECT_NE(y0.back(), y_last.back());

  for (std::size_t mpos : {0u, 37u, 120u}) {
    auto p = x;
    p[mpos] += 0.25f;
    const auto y1 = run<float>(m, p, c);
    for (std::size_t n = 0; n < N; ++n) {
      if (n < mpos || n >= mpos + rf) ASSERT_EQ(y0[n], y1[n]) << "n=" << n << " m=" << mpos;
    }
    // The frame exactly RF - 1 samples later still sees the change.
    if (mpos + rf - 1 < N) EXPECT_NE(y0[mpos + rf - 1], y1[mpos + rf - 1]);
  }
}

TEST(ForwardProperty, TrailingSilence) {
  const auto m = nafx::init_model(make_config(2, 8, 5, 4), 3);
  nafx::Rng rng(1);
  std::vector<float> x(300);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  const std::vector<float> c{0.0f, 0.0f};
  const auto y = run<float>(m, x, c);
  auto padded = x;
  padded.resize(800, 0.0f);
  const auto yp = run<float>(m, padded, c);
  for (std::size_t n = 0; n < x.size(); ++n) ASSERT_EQ(y[n], yp[n]);
  // Beyond the receptive field the tail is the model's constant response to zeros.
  const auto zeros = run<float>(m, std::vector<float>(100, 0.0f), c);
  for (std::size_t n = 300 + 21; n < 800; ++n) ASSERT_EQ(yp[n], zeros.back());
}

TEST(ForwardProperty, ZeroFilmWeightsMakeConditioningInert) {
  auto m = nafx::init_model(make_config(3, 4, 3, 2), 8);
  for (int i = 0; i < 3; ++i) {
    for (auto& w : m.film_weights(i)) w = 0.0f;
  }
  nafx::Rng rng(3);
  std::vector<float> x(256);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  const auto ref = run<float>(m, x, {0.0f, 0.0f});
  for (int t = 0; t < 8; ++t) {
    const std::vector<float> c{static_cast<float>(rng.uniform(-5, 5)), static_cast<float>(rng.uniform(-5, 5))};
    EXPECT_EQ(run<float>(m, x, c), ref);
  }
}

TEST(ForwardProperty, ConditioningMattersWithNonzeroWeights) {
  const auto m = nafx::init_model(make_config(2, 4, 3, 2), 8);
  std::vector<float> x(128, 0.3f);
  EXPECT_NE(run<float>(m, x, {3.0f, -2.0f}), run<float>(m, x, {0.0f, 0.0f}));
}

// All weights positive, all biases zero, FiLM at identity: every
// pre-activation stays positive for a positive input, so the network is
// positively homogeneous and doubling is exact in binary floating point.
TEST(ForwardProperty, PositiveHomogeneity) {
  const auto cfg = make_config(3, 4, 3, 2);
  auto m = nafx::init_model<double>(cfg, 2);
  auto p = m.params();
  const auto& lay = m.layout();
  for (auto& v : p) v = std::abs(v);
  for (const auto& b : lay.blocks) {
    for (int c = 0; c < cfg.channels; ++c) {
      p[b.conv_b + c] = 0.0;
      p[b.res_b + c] = 0.0;
    }
  }
  p[lay.out_b] = 0.0;
  nafx::Rng rng(4);
  std::vector<double> x(200);
  for (auto& v : x) v = rng.uniform(0.01, 1.0);
  auto x2 = x;
  for (auto& v : x2) v *= 2.0;
  const std::vector<double> c{0.0, 0.0};
  const auto y = run<double>(m, x, c), y2 = run<double>(m, x2, c);
  for (std::size_t n = 0; n < y.size(); ++n) ASSERT_EQ(y2[n], 2.0 * y[n]);
}

// Full-model gradients against central differences over every parameter,
// the conditioning and the input.
TEST(Backward, FiniteDifferencesTinyModel) {
  const auto cfg = make_config(2, 3, 3, 2);
  auto m = nafx::init_model<double>(cfg, 17);
  // Move the FiLM projections and biases away from their special init values.
  nafx::Rng rng(18);
  for (auto& v : m.params()) v += rng.uniform(-0.2, 0.2);
  const std::size_t N = 32;
  const auto x = nafx::testing::random_vector(rng, N);
  const auto w = nafx::testing::random_vector(rng, N);
  const std::vector<double> c{0.4, -0.9};

  auto objective = [&](const TcnModel<double>& mm, const std::vector<double>& xx, const std::vector<double>& cc) {
    const auto y = run<double>(mm, xx, cc);
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) s += w[n] * y[n];
    return s;
  };

  nafx::ForwardCache<double> cache;
  nafx::forward<double>(m, as_map(x), c, &cache);
  const auto g = nafx::backward<double>(m, cache, as_map(w));

  const std::vector<double> theta(m.params().begin(), m.params().end());
  const auto fd_theta = nafx::testing::central_differences(
      [&](const std::vector<double>& t) {
        auto mm = m;
        std::copy(t.begin(), t.end(), mm.params().begin());
        return objective(mm, x, c);
      },
      theta);
  EXPECT_LT(nafx::testing::max_relative_error(g.params, fd_theta, 1e-6), 1e-4);

  const auto fd_x = nafx::testing::central_differences([&](const std::vector<double>& v) { return objective(m, v, c); }, x);
  EXPECT_LT(nafx::testing::max_relative_error(g.input.data, fd_x, 1e-6), 1e-4);

  const auto fd_c = nafx::testing::central_differences([&](const std::vector<double>& v) { return objective(m, x, v); }, c);
  EXPECT_LT(nafx::testing::max_relative_error(g.conditioning, fd_c, 1e-6), 1e-4);
}

TEST(Backward, ZeroGradientAndDeterminism) {
  const auto m = nafx::init_model<double>(make_config(2, 3, 3, 2), 1);
  nafx::Rng rng(2);
  const auto x = nafx::testing::random_vector(rng, 64);
  const std::vector<double> c{1.0, 2.0};
  nafx::ForwardCache<double> cache;
  nafx::forward<double>(m, as_map(x), c, &cache);
  const auto zero = nafx::backward<double>(m, cache, FeatureMap<double>(1, 64));
  for (double v : zero.params) EXPECT_EQ(v, 0.0);
  for (double v : zero.conditioning) EXPECT_EQ(v, 0.0);
  for (double v : zero.input.data) EXPECT_EQ(v, 0.0);

  const auto go = as_map(nafx::testing::random_vector(rng, 64));
  const auto a = nafx::backward<double>(m, cache, go), b = nafx::backward<double>(m, cache, go);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.input, b.input);

  nafx::ForwardCache<double> empty;
  EXPECT_THROW(nafx::backward<double>(m, empty, go), nafx::Error);
}

// Independent checkpoint writer used to craft malformed files.
std::string craft_checkpoint(const std::string& json, const std::vector<float>& params, std::uint32_t version = 1) {
  std::string s = "NAFX";
  auto u32 = [&s](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  u32(version);
  u32(static_cast<std::uint32_t>(json.size()));
  s += json;
  for (float p : params) {
    std::uint32_t bits;
    std::memcpy(&bits, &p, 4);
    u32(bits);
  }
  u32(static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()))));
  return s;
}

TEST(Checkpoint, LayoutMatchesIndependentWriter) {
  const auto m = nafx::init_model(make_config(1, 2, 2, 1, 1), 3);
  const std::vector<float> params(m.params().begin(), m.params().end());
  const std::string json = nafx::encode_checkpoint(m).substr(12, nafx::detail::get_u32(nafx::encode_checkpoint(m), 8));
  EXPECT_EQ(nafx::encode_checkpoint(m), craft_checkpoint(json, params));
  const auto j = nlohmann::json::parse(json);
  for (const char* key : {"layers", "channels", "kernel_size", "dilation_growth", "cond_dim", "sample_rate", "seed"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j.at("seed").get<int>(), 3);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto m = nafx::init_model(make_config(2, 8, 5, 4), 11);
  const std::string path = (std::filesystem::temp_directory_path() / "nafx_test_ckpt.nafx").string();
  nafx::save_checkpoint(m, path);
  const auto loaded = nafx::load_checkpoint(path);
  EXPECT_EQ(loaded, m);
  EXPECT_EQ(loaded.seed(), 11u);
  EXPECT_EQ(nafx::encode_checkpoint(loaded), nafx::read_file(path));
  std::filesystem::remove(path);
}

void expect_format_error(const std::string& bytes, const std::string& fragment) {
  try {
    nafx::decode_checkpoint(bytes);
    FAIL() << "expected failure containing '" << fragment << "'";
  } catch (const nafx::Error& e) {
    EXPECT_EQ(e.kind(), nafx::ErrorKind::kFormat);
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, Errors) {
  const auto m = nafx::init_model(make_config(1, 2, 2, 1, 1), 3);
  const std::string good = nafx::encode_checkpoint(m);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  expect_format_error(bad_magic, "magic");

  const std::string json = good.substr(12, nafx::detail::get_u32(good, 8));
  const std::vector<float> params(m.params().begin(), m.params().end());
  expect_format_error(craft_checkpoint(json, params, 2), "version");
  expect_format_error(good.substr(0, good.size() - 3), "truncated");
  expect_format_error(good.substr(0, 10), "truncated");

  std::string flipped = good;
  flipped[good.size() - 8] ^= 0x01;
  expect_format_error(flipped, "CRC");

  auto j = nlohmann::json::parse(json);
  j["param_count"] = params.size() + 1;
  expect_format_error(craft_checkpoint(j.dump(), params), "parameter count");

  auto extra = params;
  extra.push_back(0.0f);
  auto j2 = nlohmann::json::parse(json);
  j2.erase("param_count");
  expect_format_error(craft_checkpoint(j2.dump(), extra), "parameter count");

  auto j3 = nlohmann::json::parse(json);
  j3["layers"] = 0;
  expect_format_error(craft_checkpoint(j3.dump(), params), "config");
  expect_format_error(craft_checkpoint("{not json", params), "JSON");
}

}  // namespace
