#include <thread>

#include <gtest/gtest.h>

#include "nafx/serve.hpp"

namespace {

using nafx::AudioBuffer;
using nafx::serve::Service;

nafx::TcnModel<float> small_model(int layers = 2) {
  nafx::ModelConfig cfg;
  cfg.layers = layers;
  cfg.channels = 4;
  cfg.kernel_size = 3;
  cfg.dilation_growth = 2;
  return nafx::init_model(cfg, 3);
}

nlohmann::json body_json(const nafx::serve::Response& r) { return nlohmann::json::parse(r.body); }

TEST(ServeModel, Info) {
  Service s(small_model());
  const auto r = s.get_model();
  EXPECT_EQ(r.status, 200);
  const auto j = body_json(r);
  EXPECT_EQ(j.at("layers"), 2);
  EXPECT_EQ(j.at("receptive_field_samples"), 7);
  EXPECT_EQ(j.at("param_count"), s.model().param_count());
  for (const char* key : {"channels", "kernel_size", "dilation_growth", "cond_dim", "sample_rate", "receptive_field_ms"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }

  nafx::ModelConfig five;
  five.layers = 5;
  Service big(nafx::TcnModel<float>(five, 0));
  EXPECT_EQ(body_json(big.get_model()).at("receptive_field_samples"), 88889);
}

TEST(ServeSources, UploadRules) {
  nafx::serve::ServeConfig cfg;
  cfg.quota_bytes = 4 * 44100;
  Service s(small_model(), cfg);
  const auto ok = s.post_source(nafx::encode_wav(nafx::make_noise(0.5, 0.5, 44100, 1)));
  ASSERT_EQ(ok.status, 200);
  EXPECT_EQ(body_json(ok).at("id"), "src-1");
  EXPECT_EQ(s.post_source("not a wav").status, 415);
  EXPECT_EQ(s.post_source(nafx::encode_wav(nafx::make_noise(0.1, 0.5, 22050, 1))).status, 422);
  EXPECT_EQ(s.post_source(nafx::encode_wav(nafx::make_noise(0.6, 0.5, 44100, 1))).status, 413);
  EXPECT_EQ(s.post_source(nafx::encode_wav(nafx::make_noise(0.4, 0.5, 44100, 1))).status, 200);
}

TEST(ServeRender, MatchesSharedRenderPath) {
  Service s(small_model());
  const AudioBuffer src = nafx::make_noise(0.2, 0.5, 44100, 4);
  const auto id = body_json(s.post_source(nafx::encode_wav(src, nafx::SampleFormat::kFloat32))).at("id").get<std::string>();
  const auto r = s.post_render(nlohmann::json{{"source", id}, {"conditioning", {1.5, -2}}}.dump());
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.content_type, "audio/wav");
  EXPECT_EQ(r.body, nafx::render_wav(s.model(), src, std::vector<float>{1.5f, -2.0f}));
  EXPECT_EQ(s.post_render(nlohmann::json{{"source", id}, {"conditioning", {1.5, -2}}}.dump()).body, r.body);

  const auto builtin = s.post_render(R"({"source":"impulse:0.05","conditioning":[0,0]})");
  EXPECT_EQ(builtin.status, 200);
  EXPECT_EQ(builtin.body, nafx::render_wav(s.model(), nafx::make_source("impulse:0.05", 44100), std::vector<float>{0, 0}));
}

TEST(ServeRender, Errors) {
  Service s(small_model());
  EXPECT_EQ(s.post_render(R"({"source":"src-9","conditioning":[0,0]})").status, 404);
  EXPECT_EQ(s.post_render(R"({"source":"noise:0.1","conditioning":[0,0,0]})").status, 400);
  EXPECT_EQ(s.post_render(R"({"source":"noise:0.1","conditioning":["a",0]})").status, 400);
  EXPECT_EQ(s.post_render(R"({"source":"noise:0.1"})").status, 400);
  EXPECT_EQ(s.post_render("{").status, 400);
  EXPECT_EQ(s.post_render(R"({"source":"noise:2","conditioning":[0,0],"max_duration":1})").status, 400);
  EXPECT_EQ(s.post_render(R"({"source":"chirp:2","conditioning":[0,0]})").status, 400);
}

TEST(ServeSweep, ShapeCacheAndErrors) {
  Service s(small_model());
  const std::map<std::string, std::string> q{{"source", "noise:0.5"}, {"metric", "rms"}, {"steps", "11"}};
  const auto a = s.get_sweep(q);
  ASSERT_EQ(a.status, 200);
  const auto j = body_json(a);
  EXPECT_EQ(j.at("values").size(), 11u);
  EXPECT_EQ(j.at("values")[10].size(), 11u);
  EXPECT_EQ(j.at("c0_axis")[0], -5.0);
  EXPECT_EQ(s.get_sweep(q).body, a.body);
  const auto direct = nafx::grid_sweep(s.model(), nafx::make_source("noise:0.5", 44100), -5, 5, 11, nafx::Metric::kRms);
  EXPECT_EQ(a.body, nafx::sweep_json(direct).dump());

  EXPECT_EQ(s.get_sweep({{"source", "noise:0.5"}, {"steps", "1"}}).status, 400);
  EXPECT_EQ(s.get_sweep({{"source", "noise:0.5"}, {"min", "3"}, {"max", "1"}}).status, 400);
  EXPECT_EQ(s.get_sweep({{"source", "noise:0.5"}, {"metric", "peak"}}).status, 400);
  EXPECT_EQ(s.get_sweep({{"metric", "rms"}}).status, 400);
  EXPECT_EQ(s.get_sweep({{"source", "src-4"}}).status, 404);

  const auto t60 = s.get_sweep({{"source", "noise:0.5"}, {"metric", "t60"}, {"steps", "2"}});
  EXPECT_EQ(t60.status, 200);
  EXPECT_EQ(body_json(t60).at("status").size(), 2u);
}

TEST(ServeHttp, EndToEnd) {
  Service service(small_model());
  httplib::Server server;
  service.bind(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto model = cli.Get("/api/model");
  ASSERT_TRUE(model);
  EXPECT_EQ(model->status, 200);
  EXPECT_EQ(nlohmann::json::parse(model->body).at("cond_dim"), 2);
  EXPECT_EQ(cli.Get("/api/nothing")->status, 404);
  EXPECT_EQ(cli.Get("/")->status, 200);

  const AudioBuffer src = nafx::make_noise(0.1, 0.5, 44100, 8);
  auto up = cli.Post("/api/sources", nafx::encode_wav(src), "audio/wav");
  ASSERT_TRUE(up);
  ASSERT_EQ(up->status, 200);
  const std::string id = nlohmann::json::parse(up->body).at("id");

  const std::string req = nlohmann::json{{"source", id}, {"conditioning", {3, -2}}}.dump();
  // Concurrent renders return the same bytes as a serial call.
  const std::string expected = nafx::render_wav(service.model(), src, std::vector<float>{3.0f, -2.0f});
  std::vector<std::string> bodies(4);
  std::vector<std::thread> workers;
  for (int i = 0; i < 4; ++i) {
    workers.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      auto r = c.Post("/api/render", req, "application/json");
      if (r && r->status == 200) bodies[i] = r->body;
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& b : bodies) EXPECT_EQ(b, expected);

  auto sweep = cli.Get("/api/sweep?source=noise:0.1&metric=rms&steps=3");
  ASSERT_TRUE(sweep);
  EXPECT_EQ(sweep->status, 200);
  EXPECT_EQ(nlohmann::json::parse(sweep->body).at("values").size(), 3u);

  server.stop();
  t.join();
}

}  // namespace
