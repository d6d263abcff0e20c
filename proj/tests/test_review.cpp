#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "foamqc/review.hpp"
#include "foamqc/synthgen.hpp"

#include <httplib.h>  // after Eigen: resolv.h defines _res

using namespace foamqc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Fixture {
  fs::path root;
  fs::path data, ckpt, state, runs;
  int groups = 6;

  explicit Fixture(const std::string& name, int n = 6) : groups(n) {
    root = fs::temp_directory_path() / ("foamqc_review_" + name);
    fs::remove_all(root);
    data = root / "data";
    ckpt = root / "model.bin";
    state = root / "state";
    runs = root / "runs";
    SynthParams p;
    p.n_groups = n;
    p.image_size = 96;
    p.seed = 21;
    std::vector<ExampleGroup> processed;
    for (auto& s : generate(p)) {
      auto g = preprocess_group(s.group, {}, Size2{32, 32});
      for (const auto& [v, img] : g.images) {
        g.source_paths[v] = data / g.id / (std::string(to_string(v)) + ".png");
        write_png(g.source_paths[v], img.pixels);
      }
      processed.push_back(g);
    }
    write_manifest(data / "manifest.json", processed);
    Model m(BackboneSpec{1, 32}, 5);
    CheckpointInfo info;
    info.config = ModelConfig{ViewMode::one_view, {ViewKind::top}, true};
    info.input_size = 32;
    save_checkpoint(ckpt, m, info);
  }
  ~Fixture() { fs::remove_all(root); }

  ReviewOptions options(bool blind = false) const {
    ReviewOptions o;
    o.dataset = data;
    o.checkpoint = ckpt;
    o.state_dir = state;
    o.runs_dir = runs;
    o.blind = blind;
    o.explain.n_samples = 120;
    o.explain.cell = 8;
    return o;
  }
};

std::size_t journal_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("queue ordering") {
  ReviewState s;
  s.add_item("a", 0.52);
  s.add_item("b", 0.95);
  s.add_item("c", 0.50);
  auto q = s.queue();
  REQUIRE(q.size() == 3);
  CHECK(q[0]->p_defective == 0.50);
  CHECK(q[1]->p_defective == 0.52);
  CHECK(q[2]->p_defective == 0.95);
  CHECK(ReviewState{}.queue().empty());

  LabelEvent e;
  e.seq = 1;
  e.id = "c";
  s.apply(e);
  q = s.queue();
  CHECK(q[0]->id == "a");
  CHECK(q[2]->id == "c");
  CHECK(q[2]->reviewed());
  for (std::string id : {"a", "b"}) {
    e.seq++;
    e.id = id;
    s.apply(e);
  }
  for (const auto* item : s.queue()) CHECK(item->reviewed());
  CHECK(s.queue(QueueOrder::id)[0]->id == "a");

  e.seq = 1;
  CHECK_THROWS_AS(s.apply(e), ValidationError);
  CHECK_THROWS_AS(s.add_item("d", 1.5), ValidationError);
}

TEST_CASE("journal replay equals live state after 100 randomized operations") {
  Fixture fx("replay", 8);
  ReviewService svc(fx.options());
  svc.warm_up();
  std::vector<std::string> ids;
  const auto initial = svc.state();
  for (const auto& [id, item] : initial.items()) ids.push_back(id);

  std::mt19937_64 rng(99);
  const char* labels[] = {"normal", "normal_defective", "defective", "broken"};
  std::map<int, int> statuses;
  for (int op = 0; op < 100; ++op) {
    const auto& id = ids[std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng)];
    json body{{"expert_label", labels[std::uniform_int_distribution<int>(0, 3)(rng)]},
              {"note", std::uniform_int_distribution<int>(0, 2)(rng) == 0 ? "" : "note " + std::to_string(op % 3)}};
    const int version = svc.state().item(id).version;
    switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
      case 0: break;
      case 1: body["expected_version"] = version; break;
      case 2: body["expected_version"] = version + 1; break;
    }
    ++statuses[svc.post_label(id, body.dump()).status];
  }
  CHECK(statuses[200] > 20);
  CHECK(statuses[400] > 0);
  CHECK(statuses[409] > 0);

  const auto events = LabelJournal::read(svc.journal_path());
  CHECK(events.size() == svc.state().last_seq());
  for (std::size_t i = 1; i < events.size(); ++i) CHECK(events[i].seq > events[i - 1].seq);
  CHECK(replay(svc.base_state(), events) == svc.state());

  // a restarted service rebuilds the same state from disk
  ReviewService again(fx.options());
  again.warm_up();
  CHECK(again.state() == svc.state());

  // a torn final line is ignored
  { std::ofstream(svc.journal_path(), std::ios::app) << R"({"seq": 999, "id": ")"; }
  CHECK(LabelJournal::read(svc.journal_path()).size() == events.size());
  { std::ofstream(svc.journal_path(), std::ios::app) << "\n"; }
  CHECK_THROWS_AS(LabelJournal::read(svc.journal_path()), ParseError);
}

TEST_CASE("HTTP endpoints") {
  Fixture fx("http", 4);
  ReviewService svc(fx.options());
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);

  auto res = cli.Get("/api/queue");
  REQUIRE(res);
  CHECK(res->status == 503);

  svc.warm_up();
  res = cli.Get("/api/queue");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  auto queue = json::parse(res->body);
  REQUIRE(queue.size() == 4);
  double last = -1;
  for (const auto& item : queue) {
    CHECK(item["status"] == "pending");
    const double u = std::abs(item["p_defective"].get<double>() - 0.5);
    CHECK(u >= last);
    last = u;
  }
  const std::string id = queue[0]["id"];

  res = cli.Get("/api/groups/nope");
  REQUIRE(res);
  CHECK(res->status == 404);

  res = cli.Get("/api/groups/" + id);
  REQUIRE(res);
  CHECK(res->status == 200);
  auto detail = json::parse(res->body);
  CHECK(detail["images"].size() == 5);
  CHECK(detail["cached"] == false);
  CHECK(detail["explanation"]["view"] == "top");
  res = cli.Get("/api/groups/" + id);
  CHECK(json::parse(res->body)["cached"] == true);

  res = cli.Get(detail["explanation"]["overlay_url"].get<std::string>());
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->body.substr(1, 3) == "PNG");
  res = cli.Get(detail["images"]["profile_2"].get<std::string>());
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "image/png");
  CHECK(cli.Get("/api/images/" + id + "/side.png")->status == 404);

  const auto journal = svc.journal_path();
  res = cli.Post("/api/groups/" + id + "/label", R"({"expert_label": "normal_defective", "note": "edge"})",
                 "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["status"] == "reviewed");
  CHECK(journal_lines(journal) == 1);
  res = cli.Post("/api/groups/" + id + "/label", R"({"expert_label": "normal_defective", "note": "edge"})",
                 "application/json");
  CHECK(res->status == 200);
  CHECK(journal_lines(journal) == 1);
  CHECK(cli.Post("/api/groups/" + id + "/label", R"({"expert_label": "broken"})", "application/json")->status == 400);
  CHECK(cli.Post("/api/groups/" + id + "/label", "not json", "application/json")->status == 400);
  CHECK(cli.Post("/api/groups/" + id + "/label", R"({"expert_label": "normal"})", "application/json")->status == 409);
  CHECK(cli.Post("/api/groups/nope/label", R"({"expert_label": "normal"})", "application/json")->status == 404);
  res = cli.Post("/api/groups/" + id + "/label", R"({"expert_label": "normal", "expected_version": 1})",
                 "application/json");
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["version"] == 2);
  CHECK(journal_lines(journal) == 2);

  queue = json::parse(cli.Get("/api/queue")->body);
  CHECK(queue.back()["id"] == id);
  CHECK(queue.front()["status"] == "pending");

  CHECK(cli.Options("/api/queue")->status == 204);

  CHECK(cli.Get("/api/metrics")->status == 204);
  json cells = json::array();
  for (bool nd : {true, false})
    for (const auto& c : standard_configs(nd))
      cells.push_back({{"name", c.name()}, {"include_nd", nd}, {"accuracy", 80.0}, {"auc", 90.0}, {"failed", false}});
  fs::create_directories(fx.runs);
  std::ofstream(fx.runs / "grid.json") << json{{"cells", cells}}.dump();
  res = cli.Get("/api/metrics");
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto metrics = json::parse(res->body);
  CHECK(metrics["cells"].size() == 12);
  int by_status = 0, by_label = 0;
  for (const auto& [k, v] : metrics["counts"]["by_status"].items()) by_status += v.get<int>();
  for (const auto& [k, v] : metrics["counts"]["by_label"].items()) by_label += v.get<int>();
  CHECK(by_status == 4);
  CHECK(by_label == 4);
  CHECK(metrics["counts"]["total"] == 4);

  // the source images and manifest are untouched
  CHECK(load_manifest(fx.data / "manifest.json").size() == 4);
  server.stop();
}

TEST_CASE("blind mode hides predictions of pending items") {
  Fixture fx("blind", 3);
  ReviewService svc(fx.options(true));
  svc.warm_up();
  const auto queue = svc.get_queue().body;
  for (const auto& item : queue) CHECK(item["p_defective"].is_null());
  const std::string id = queue[0]["id"];
  CHECK(svc.get_group(id).body["explanation"].is_null());
  const auto labeled = svc.post_label(id, R"({"expert_label": "defective"})");
  CHECK(labeled.status == 200);
  CHECK(labeled.body["p_defective"].is_number());
}

TEST_CASE("concurrent explanation requests share one computation") {
  Fixture fx("flight", 2);
  ReviewService svc(fx.options());
  svc.warm_up();
  const std::string id = svc.get_queue().body[0]["id"];
  std::vector<HttpReply> replies(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) threads.emplace_back([&, i] { replies[static_cast<std::size_t>(i)] = svc.get_group(id); });
  for (auto& t : threads) t.join();
  for (const auto& r : replies) {
    CHECK(r.status == 200);
    CHECK(r.body["explanation"]["weights"] == replies[0].body["explanation"]["weights"]);
  }
  CHECK(svc.get_group(id).body["cached"] == true);
}

TEST_CASE("port from environment") {
  unsetenv("FOAMQC_PORT");
  CHECK(review_port_from_env() == 8080);
  setenv("FOAMQC_PORT", "9123", 1);
  CHECK(review_port_from_env() == 9123);
  setenv("FOAMQC_PORT", "http", 1);
  CHECK_THROWS_AS(review_port_from_env(), ValidationError);
  unsetenv("FOAMQC_PORT");
}
