#include "torch_catch.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <thread>

#include <httplib.h>

#include "cfprobe/causal_spec.hpp"
#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"
#include "cfprobe/service.hpp"

using namespace cfprobe;
using namespace cfprobe::service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

diffusion::DiffusionState tiny_state() {
  diffusion::DenoiserConfig c;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.cond_width = 16;
  c.token_width = 8;
  c.groups = 4;
  diffusion::DiffusionState state(c, diffusion::NoiseSchedule::linear(400, 1e-4, 0.02, 8), 51);
  state.freeze();
  return state;
}

evalsuite::ClassifierBank tiny_bank() {
  torch::manual_seed(52);
  std::vector<evalsuite::ClassifierReport> reports;
  for (auto a : kEvalAttributes) {
    evalsuite::ClassifierReport r;
    r.attribute = a;
    r.val_accuracy = r.train_accuracy = 1.0;
    reports.push_back(r);
  }
  return evalsuite::ClassifierBank(evalsuite::ClassifierNet(kDefaultImageSize, 8), reports);
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cfprobe_service_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

synthgen::DatasetManifest small_manifest(const fs::path& dir) {
  auto m = synthgen::build_manifest(synthgen::CausalSpec::independent(), 200, {0.6, 0.2, 0.2}, 53);
  synthgen::materialize(m, dir);
  return m;
}

ProbeService make_service(const std::string& name, std::size_t max_waiting = 64) {
  const auto dir = scratch(name);
  ServiceConfig config;
  config.runs_dir = dir / "runs";
  config.max_waiting = max_waiting;
  config.edit.null_text.iters_per_step = 2;
  return ProbeService(config, tiny_state(), tiny_bank(), small_manifest(dir / "data"));
}

std::string test_image(const ProbeService& svc, std::size_t i = 0) {
  return svc.list_images("test", 10, 0).body["images"][i]["id"];
}

json without_session(json body) {
  for (const char* k : {"session_id", "result_ref", "probe_index"}) body.erase(k);
  return body;
}

std::set<std::string> error_fields(const Response& r) {
  std::set<std::string> out;
  for (const auto& f : r.body["fields"]) out.insert(f["field"].get<std::string>());
  return out;
}

}  // namespace

TEST_CASE("invalid edit requests are rejected field by field", "[service][validation]") {
  auto svc = make_service("validation");
  const auto id = test_image(svc);
  const auto r = svc.submit_edit({{"image_id", "img-missing"},
                                  {"assignments", {{"sex", "tall"}, {"height", "2m"}}},
                                  {"dropped", {"findings", "mood"}},
                                  {"seed", -3},
                                  {"guidance", "high"},
                                  {"policy", "random"},
                                  {"session_id", "../etc"}});
  CHECK(r.status == 422);
  CHECK(r.body["error"] == "validation");
  CHECK(error_fields(r) == std::set<std::string>{"image_id", "assignments.sex", "assignments.height", "dropped[1]",
                                                 "seed", "guidance", "policy", "session_id"});

  const auto empty = svc.submit_edit({{"image_id", id}});
  CHECK(empty.status == 422);
  CHECK(error_fields(empty) == std::set<std::string>{"assignments"});
  CHECK(svc.submit_edit(json::array()).status == 422);
  CHECK(svc.submit_edit({{"image_id", id}, {"assignments", {{"sex", "female"}}}, {"guidance", 0.5}}).status == 422);
}

TEST_CASE("prompt preview matches the editor's counterfactual prompt", "[service][preview]") {
  auto svc = make_service("preview");
  const auto id = test_image(svc);
  const json body = {{"image_id", id}, {"assignments", {{"race", "black"}}}, {"dropped", {"age"}}};
  const auto preview = svc.preview(body);
  REQUIRE(preview.status == 200);
  const auto edit = svc.submit_edit(body);
  REQUIRE(edit.status == 200);
  CHECK(preview.body["prompt"] == edit.body["counterfactual_prompt"]);
  CHECK(preview.body["factual_prompt"] == edit.body["factual_prompt"]);
  CHECK(preview.body["intervention"] == edit.body["intervention"]);
  CHECK(svc.preview({{"image_id", id}, {"assignments", {{"sex", "x"}}}}).status == 422);
}

TEST_CASE("identical edits give identical responses and history grows by one", "[service][determinism]") {
  auto svc = make_service("determinism");
  const auto id = test_image(svc, 1);
  json body = {{"image_id", id}, {"assignments", {{"sex", "female"}}}, {"seed", 4}, {"session_id", "alpha"}};
  const auto a = svc.submit_edit(body);
  REQUIRE(a.status == 200);
  body["session_id"] = "beta";
  const auto b = svc.submit_edit(body);
  REQUIRE(b.status == 200);
  CHECK(without_session(a.body).dump() == without_session(b.body).dump());
  CHECK(a.body["lpips"].is_string());
  CHECK(a.body["cpg"]["sex"].is_string());
  CHECK(a.body["provenance"]["seed"] == 4);
  CHECK_FALSE(a.body["provenance"].contains("created_at"));

  CHECK(svc.history("alpha").body["probes"].size() == 1);
  body["session_id"] = "alpha";
  body["assignments"] = {{"findings", "cardiomegaly"}};
  const auto c = svc.submit_edit(body);
  REQUIRE(c.status == 200);
  CHECK(c.body["probe_index"] == 1);
  const auto history = svc.history("alpha");
  REQUIRE(history.status == 200);
  REQUIRE(history.body["probes"].size() == 2);
  CHECK(history.body["probes"][1]["index"] == 1);
  CHECK(fs::exists(svc.config().runs_dir / c.body["result_ref"].get<std::string>() / "meta.json"));

  const auto image = image_from_payload(a.body["counterfactual"]);
  CHECK(image.height() == kDefaultImageSize);
}

TEST_CASE("session effect matrix is computed from the session history", "[service][matrix]") {
  auto svc = make_service("matrix");
  for (std::size_t i = 0; i < 3; ++i) {
    const auto r = svc.submit_edit({{"image_id", test_image(svc, i)},
                                    {"assignments", {{"device", i % 2 ? "none" : "present"}}},
                                    {"session_id", "m"}});
    REQUIRE(r.status == 200);
  }
  std::vector<evalsuite::Probe> probes;
  for (const auto& e : svc.load_history("m")) probes.push_back(*e.probe);
  REQUIRE(probes.size() == 3);
  const auto m = svc.session_effect_matrix("m");
  REQUIRE(m.status == 200);
  CHECK(m.body["matrix"] == evalsuite::EffectMatrix::from_probes(probes).to_json());
  CHECK(svc.session_effect_matrix("nobody").status == 404);
  CHECK(svc.history("nobody").status == 404);
}

TEST_CASE("failed edits return 500 and are logged", "[service][errors]") {
  auto svc = make_service("failure");
  const auto id = test_image(svc);
  fs::remove(svc.config().runs_dir.parent_path() / "data" / "images" / (id + ".png"));
  const auto r = svc.submit_edit({{"image_id", id}, {"assignments", {{"sex", "female"}}}, {"session_id", "f"}});
  CHECK(r.status == 500);
  const auto history = svc.load_history("f");
  REQUIRE(history.size() == 1);
  CHECK_FALSE(history[0].probe.has_value());
  CHECK_FALSE(history[0].error.empty());
}

TEST_CASE("reports and images", "[service][reports]") {
  auto svc = make_service("reports");
  CHECK(svc.report("run1").status == 404);
  CHECK(svc.report("../x").status == 404);
  fs::create_directories(svc.config().runs_dir / "reports" / "run1");
  write_file_atomic(svc.config().runs_dir / "reports" / "run1" / "report.json", R"({"ok": true})");
  CHECK(svc.report("run1").body["ok"] == true);

  const auto list = svc.list_images("test", 2, 1);
  CHECK(list.body["images"].size() == 2);
  CHECK(svc.list_images("holdout", 2, 0).status == 422);
  const auto id = test_image(svc);
  const auto img = svc.image(id);
  REQUIRE(img.status == 200);
  CHECK(image_from_payload(img.body["image"]) ==
        read_png(svc.config().runs_dir.parent_path() / "data" / "images" / (id + ".png")));
  CHECK(svc.image("nope").status == 404);

  const auto health = svc.health();
  CHECK(health.status == 200);
  CHECK(health.body["checkpoint_hash"] == svc.checkpoint_hash());
}

TEST_CASE("missing artifacts fail with a diagnostic", "[service][artifact]") {
  ServiceConfig config;
  config.checkpoint = "/nonexistent/ckpt";
  config.classifiers = "/nonexistent/clf";
  config.manifest = "/nonexistent/data";
  try {
    ProbeService svc(config);
    FAIL("expected ArtifactError");
  } catch (const ArtifactError& e) {
    CHECK(std::string(e.what()).find("not found") != std::string::npos);
  }
}

TEST_CASE("job gate admits in FIFO order and bounds the line", "[service][queue]") {
  JobGate gate(1, 2);
  auto first = gate.acquire();
  REQUIRE(first);
  CHECK(first->queue_position() == 0);
  CHECK(gate.in_flight() == 1);

  std::vector<int> order;
  std::mutex mu;
  std::vector<std::thread> threads;
  std::vector<std::size_t> positions(2);
  for (int i = 0; i < 2; ++i) {
    threads.emplace_back([&, i] {
      auto t = gate.acquire();
      std::lock_guard lock(mu);
      positions[i] = t->queue_position();
      order.push_back(i);
    });
    while (gate.waiting() < static_cast<std::size_t>(i + 1)) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  CHECK_FALSE(gate.acquire().has_value());
  first.reset();
  for (auto& t : threads) t.join();
  CHECK(order == std::vector<int>{0, 1});
  CHECK(positions == std::vector<std::size_t>{1, 2});
  CHECK(gate.in_flight() == 0);
  CHECK(gate.waiting() == 0);
  CHECK_THROWS_AS(JobGate(0, 1), ValidationError);
}

TEST_CASE("a full queue answers 503", "[service][queue]") {
  auto svc = make_service("busy", 0);
  const auto id = test_image(svc);
  Response first;
  std::thread worker([&] { first = svc.submit_edit({{"image_id", id}, {"assignments", {{"sex", "female"}}}}); });
  while (svc.queue().body["in_flight"] == 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  const auto second = svc.submit_edit({{"image_id", id}, {"assignments", {{"sex", "female"}}}});
  worker.join();
  CHECK(second.status == 503);
  CHECK(first.status == 200);
}

TEST_CASE("HTTP routes, CORS and status codes", "[service][http]") {
  auto svc = make_service("http");
  Server server(svc);
  server.start("127.0.0.1", 0);
  httplib::Client client("127.0.0.1", server.port());

  const auto health = client.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");
  CHECK(json::parse(health->body)["status"] == "ok");

  const auto bad = client.Post("/edits", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  const auto invalid = client.Post("/edits", R"({"image_id": "nope"})", "application/json");
  REQUIRE(invalid);
  CHECK(invalid->status == 422);

  const auto id = test_image(svc);
  const auto preview =
      client.Post("/prompt-preview", json({{"image_id", id}, {"assignments", {{"sex", "female"}}}}).dump(), "application/json");
  REQUIRE(preview);
  CHECK(preview->status == 200);

  const auto images = client.Get("/images?split=val&limit=3");
  REQUIRE(images);
  CHECK(json::parse(images->body)["images"].size() == 3);
  CHECK(client.Get("/images?limit=abc")->status == 422);
  CHECK(client.Get("/images/" + id)->status == 200);
  CHECK(client.Get("/sessions/none/history")->status == 404);
  CHECK(client.Get("/reports/none")->status == 404);
  CHECK(client.Get("/queue")->status == 200);
  CHECK(client.Options("/edits")->status == 204);

  Server clash(svc);
  CHECK_THROWS_AS(clash.start("127.0.0.1", server.port()), std::runtime_error);
  server.stop();
}
