#include <gtest/gtest.h>

#include <thread>

#include "curvedit/service_http.hpp"

using namespace curvedit;
using json = nlohmann::json;

namespace {

struct Fixture {
  std::shared_ptr<const SyntheticWorld> world = std::make_shared<const SyntheticWorld>();
  std::shared_ptr<EditService> service;

  Fixture() {
    FlowConfig fc;
    fc.kind = FlowKind::coupling;
    fc.layers = 4;
    fc.hidden = 16;
    fc.output_scale = 0.5;
    fc.seed = 3;
    auto flow = std::make_shared<const FlowModel>(FlowModel::create(fc));
    std::map<BackendKind, EditBackend> backends;
    backends.emplace(BackendKind::decurved, EditBackend(DecurvedBackend(flow)));
    backends.emplace(BackendKind::warped, EditBackend(WarpedBackend::random(8, 8, 42)));
    ServiceConfig sc;
    sc.normalize_samples = 20;
    sc.sweep_samples = 10;
    service = std::make_shared<EditService>(world, std::move(backends), sc);
  }

  json call(const std::string& method, const std::string& path, const json& body = json(), int expect = 200,
            const std::string& accept = {}) {
    const ApiResponse r = service->dispatch(method, path, body.is_null() ? "" : body.dump(), accept);
    EXPECT_EQ(r.status, expect) << method << " " << path << ": " << r.body;
    return json::parse(r.body);
  }

  std::string create(const json& body = {{"seed", 7}}) { return call("POST", "/sessions", body, 201)["id"]; }

  std::string image_hash(const std::string& id) { return call("GET", "/sessions/" + id + "/image")["hash"]; }
};

}  // namespace

TEST(Service, CreateSessionFromSeedIsDeterministic) {
  Fixture f;
  const json a = f.call("POST", "/sessions", {{"seed", 5}}, 201);
  const json b = f.call("POST", "/sessions", {{"seed", 5}}, 201);
  EXPECT_NE(a["id"], b["id"]);
  EXPECT_EQ(a["z"], b["z"]);
  EXPECT_EQ(a["backend"], "decurved");
  EXPECT_TRUE(a["history"].empty());
}

TEST(Service, CreateSessionFromGivenLatent) {
  Fixture f;
  const std::vector<double> z{0.1, -0.2, 0.3, 0.0, 1.0, -1.0, 0.5, 0.25};
  const json s = f.call("POST", "/sessions", {{"z", z}}, 201);
  EXPECT_EQ(s["z"].get<std::vector<double>>(), z);
  f.call("POST", "/sessions", {{"z", {1.0, 2.0}}}, 400);
  f.call("POST", "/sessions", {{"backend", "curly"}}, 400);
  f.call("POST", "/sessions", {{"backend", "linear"}}, 400);  // not loaded
}

TEST(Service, ImageNegotiation) {
  Fixture f;
  const std::string id = f.create();
  const json png = f.call("GET", "/sessions/" + id + "/image", json(), 200, "image/png");
  EXPECT_EQ(png["format"], "png");
  const auto png_bytes = base64_decode(png["data"]);
  ASSERT_GT(png_bytes.size(), 8u);
  EXPECT_EQ(png_bytes[1], 'P');
  const json pgm = f.call("GET", "/sessions/" + id + "/image", json(), 200, "image/x-portable-graymap");
  EXPECT_EQ(pgm["format"], "pgm");
  const GrayImage img = decode_pgm(base64_decode(pgm["data"]));
  EXPECT_EQ(img.width, 32u);
  EXPECT_EQ(hex64(hash_bytes(img.pixels)), pgm["hash"]);
  EXPECT_EQ(png["hash"], pgm["hash"]);
}

TEST(Service, EditThenInverseRestoresImage) {
  Fixture f;
  const std::string id = f.create();
  const std::string before = f.image_hash(id);
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 2}, {"dt", 0.1}});
  EXPECT_NE(f.image_hash(id), before);
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 2}, {"dt", -0.1}});
  EXPECT_EQ(f.image_hash(id), before);
}

TEST(Service, UndoAppliesInverseAndPopsHistory) {
  Fixture f;
  const std::string id = f.create();
  const json start = f.call("GET", "/sessions/" + id);
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 1}, {"dt", 0.3}});
  const json after = f.call("POST", "/sessions/" + id + "/undo");
  EXPECT_TRUE(after["history"].empty());
  EXPECT_EQ(after["image_hash"], start["image_hash"]);
  const auto z0 = start["z"].get<std::vector<double>>(), z1 = after["z"].get<std::vector<double>>();
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_NEAR(z0[i], z1[i], 1e-9);
  f.call("POST", "/sessions/" + id + "/undo", json(), 400);
}

TEST(Service, HistoryTotalsAreSumsOfDeltas) {
  Fixture f;
  const std::string id = f.create();
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 0.1}});
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 3}, {"dt", -0.2}});
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 0.2}});
  const json h = f.call("GET", "/sessions/" + id + "/history");
  ASSERT_EQ(h["history"].size(), 3u);
  EXPECT_DOUBLE_EQ(h["totals"]["0"].get<double>(), 0.1 + 0.2);
  EXPECT_DOUBLE_EQ(h["totals"]["3"].get<double>(), -0.2);
}

TEST(Service, ReorderOnDecurvedKeepsImage) {
  Fixture f;
  const std::string id = f.create();
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 0.5}});
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 4}, {"dt", -0.5}});
  const std::string before = f.image_hash(id);
  const json r = f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", {1, 0}}});
  EXPECT_EQ(r["history"][0]["k"], 4);
  EXPECT_EQ(f.image_hash(id), before);
}

TEST(Service, ReorderOnWarpedChangesImage) {
  Fixture f;
  const std::string id = f.create({{"seed", 7}, {"backend", "warped"}});
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 20.0}});
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 1}, {"dt", 20.0}});
  const std::string before = f.image_hash(id);
  f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", {1, 0}}});
  EXPECT_NE(f.image_hash(id), before);
}

TEST(Service, IdentityPermutationIsNoOp) {
  Fixture f;
  const std::string id = f.create();
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 0.5}});
  const json before = f.call("GET", "/sessions/" + id);
  const json after = f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", {0}}});
  EXPECT_EQ(before["z"], after["z"]);
}

TEST(Service, BadPermutationsRejectedAndHistoryKept) {
  Fixture f;
  const std::string id = f.create();
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 0.5}});
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 1}, {"dt", 0.5}});
  f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", {0, 0}}}, 400);
  f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", {1}}}, 400);
  f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", "x"}}, 400);
  EXPECT_EQ(f.call("GET", "/sessions/" + id + "/history")["history"][0]["k"], 0);
}

TEST(Service, ErrorsAre404And400) {
  Fixture f;
  const json e = f.call("GET", "/sessions/nope/image", json(), 404);
  EXPECT_NE(e["error"].get<std::string>().find("nope"), std::string::npos);
  f.call("GET", "/nothing", json(), 404);
  const std::string id = f.create();
  const json bad = f.call("POST", "/sessions/" + id + "/edits", {{"k", 8}, {"dt", 0.1}}, 400);
  EXPECT_NE(bad["error"].get<std::string>().find("k=8"), std::string::npos);
  f.call("POST", "/sessions/" + id + "/edits", {{"k", -1}, {"dt", 0.1}}, 400);
  f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}}, 400);
  EXPECT_EQ(f.service->dispatch("POST", "/sessions/" + id + "/edits", "{not json").status, 400);
  EXPECT_EQ(f.service->dispatch("DELETE", "/sessions/" + id).status, 405);
}

TEST(Service, AttributesCarryNormalizedScale) {
  Fixture f;
  const json a = f.call("GET", "/attributes");
  EXPECT_EQ(a["backend"], "decurved");
  ASSERT_EQ(a["attributes"].size(), 8u);
  std::size_t normalized = 0;
  for (const auto& e : a["attributes"]) {
    if (e["normalized"]) {
      ++normalized;
      EXPECT_GT(std::abs(e["raw_per_unit"].get<double>()), 0.0);
      EXPECT_GT(e["target_change"].get<double>(), 0.0);
    }
  }
  EXPECT_GE(normalized, 1u);
  EXPECT_EQ(f.call("GET", "/attributes?backend=warped")["backend"], "warped");
}

TEST(Service, SameSeedSameEditsSameBytes) {
  Fixture f;
  const std::string a = f.create(), b = f.create();
  for (const std::string& id : {a, b}) {
    f.call("POST", "/sessions/" + id + "/edits", {{"k", 0}, {"dt", 0.4}});
    f.call("POST", "/sessions/" + id + "/edits", {{"k", 5}, {"dt", -0.2}});
  }
  EXPECT_EQ(f.call("GET", "/sessions/" + a + "/image")["data"], f.call("GET", "/sessions/" + b + "/image")["data"]);
}

TEST(Service, ConcurrentSessionsDoNotInterfere) {
  Fixture f;
  f.service->scales(BackendKind::decurved);
  const std::string a = f.create({{"seed", 1}}), b = f.create({{"seed", 2}});
  auto worker = [&](const std::string& id, std::size_t k) {
    for (int i = 0; i < 20; ++i)
      f.service->dispatch("POST", "/sessions/" + id + "/edits", json{{"k", k}, {"dt", 0.05}}.dump());
  };
  std::thread ta(worker, a, 0), tb(worker, b, 3);
  ta.join();
  tb.join();
  for (const auto& [id, k] : {std::pair{a, 0}, std::pair{b, 3}}) {
    const json s = f.call("GET", "/sessions/" + id);
    ASSERT_EQ(s["history"].size(), 20u);
    for (const auto& e : s["history"]) EXPECT_EQ(e["k"], k);
    // Replaying the history from the initial latent reproduces the state.
    const json r = f.call("POST", "/sessions/" + id + "/reorder", {{"permutation", [] {
                                                                     std::vector<int> p(20);
                                                                     for (int i = 0; i < 20; ++i) p[i] = i;
                                                                     return p;
                                                                   }()}});
    const auto z0 = s["z"].get<std::vector<double>>(), z1 = r["z"].get<std::vector<double>>();
    for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_NEAR(z0[i], z1[i], 1e-9);
  }
}

TEST(ServiceHttp, EndToEndOverLoopback) {
  Fixture f;
  httplib::Server server;
  f.service->install(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto created = client.Post("/sessions", R"({"seed": 3})", "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const std::string id = json::parse(created->body)["id"];
  auto img = client.Get("/sessions/" + id + "/image", {{"Accept", "image/x-portable-graymap"}});
  ASSERT_TRUE(img);
  EXPECT_EQ(json::parse(img->body)["format"], "pgm");
  auto attrs = client.Get("/attributes?backend=warped");
  ASSERT_TRUE(attrs);
  EXPECT_EQ(json::parse(attrs->body)["backend"], "warped");
  auto missing = client.Get("/sessions/zzz/history");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  // A form content type must not turn the JSON body into query parameters.
  auto form = client.Post("/sessions/" + id + "/edits", R"({"k": 0, "dt": 1.0})",
                          "application/x-www-form-urlencoded");
  ASSERT_TRUE(form);
  EXPECT_EQ(form->status, 200) << form->body;
  server.stop();
  t.join();
}
