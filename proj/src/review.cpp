#include "foamqc/review.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <httplib.h>

namespace foamqc {

using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
  return out.str();
}

RawLabel label_from(const json& j) {
  auto l = parse_raw_label(j.get<std::string>());
  if (!l) throw ValidationError("invalid label: " + j.dump());
  return *l;
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    if (!out) throw Error("cannot write " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

json to_json(const LabelEvent& e) {
  return {{"seq", e.seq},
          {"id", e.id},
          {"expert_label", std::string(to_string(e.expert_label))},
          {"note", e.note},
          {"prior_p_defective", e.prior_p_defective},
          {"prior_prediction", std::string(to_string(e.prior_prediction))},
          {"timestamp", e.timestamp}};
}

LabelEvent label_event_from_json(const json& j) {
  LabelEvent e;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.id = j.at("id").get<std::string>();
  e.expert_label = label_from(j.at("expert_label"));
  e.note = j.value("note", "");
  e.prior_p_defective = j.value("prior_p_defective", 0.5);
  e.prior_prediction = j.value("prior_prediction", "normal") == "defective" ? BinaryLabel::defective : BinaryLabel::normal;
  e.timestamp = j.value("timestamp", "");
  return e;
}

// ---------------------------------------------------------------------------

void ReviewState::add_item(const std::string& id, double p_defective) {
  if (!(p_defective >= 0.0 && p_defective <= 1.0)) throw ValidationError("probability of " + id + " outside [0, 1]");
  ReviewItem item;
  item.id = id;
  item.p_defective = p_defective;
  if (!items_.emplace(id, item).second) throw ValidationError("duplicate review item " + id);
}

const ReviewItem& ReviewState::item(const std::string& id) const {
  auto it = items_.find(id);
  if (it == items_.end()) throw ValidationError("unknown group " + id);
  return it->second;
}

bool ReviewState::is_noop(const std::string& id, RawLabel label, const std::string& note) const {
  const auto& it = item(id);
  return it.expert_label == label && it.note == note;
}

void ReviewState::apply(const LabelEvent& e) {
  if (e.seq <= last_seq_)
    throw ValidationError("label event sequence " + std::to_string(e.seq) + " does not follow " + std::to_string(last_seq_));
  auto it = items_.find(e.id);
  if (it == items_.end()) throw ValidationError("label event for unknown group " + e.id);
  it->second.expert_label = e.expert_label;
  it->second.note = e.note;
  ++it->second.version;
  it->second.last_seq = e.seq;
  last_seq_ = e.seq;
}

std::vector<const ReviewItem*> ReviewState::queue(QueueOrder order) const {
  std::vector<const ReviewItem*> out;
  for (const auto& [id, item] : items_) out.push_back(&item);
  std::stable_sort(out.begin(), out.end(), [order](const ReviewItem* a, const ReviewItem* b) {
    if (a->reviewed() != b->reviewed()) return !a->reviewed();
    if (order == QueueOrder::uncertainty) {
      const double ua = std::abs(a->p_defective - 0.5), ub = std::abs(b->p_defective - 0.5);
      if (ua != ub) return ua < ub;
    }
    return a->id < b->id;
  });
  return out;
}

ReviewState replay(ReviewState base, const std::vector<LabelEvent>& events) {
  for (const auto& e : events) base.apply(e);
  return base;
}

// ---------------------------------------------------------------------------

LabelJournal::LabelJournal(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void LabelJournal::append(const LabelEvent& e) {
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  out << to_json(e).dump() << '\n';
  out.flush();
  if (!out) throw Error("cannot append to journal " + path_.string());
}

std::vector<LabelEvent> LabelJournal::read(const std::filesystem::path& path) {
  std::vector<LabelEvent> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t start = 0;
  int line = 1;
  while (start < content.size()) {
    const auto end = content.find('\n', start);
    if (end == std::string::npos) break;  // torn tail
    const std::string text = content.substr(start, end - start);
    if (!text.empty()) try {
        out.push_back(label_event_from_json(json::parse(text)));
      } catch (const json::exception& e) {
        throw ParseError("malformed journal entry in " + path.string() + ": " + e.what(), line);
      }
    start = end + 1;
    ++line;
  }
  return out;
}

json item_summary(const ReviewItem& item, bool blind) {
  json j{{"id", item.id},
         {"status", item.reviewed() ? "reviewed" : "pending"},
         {"expert_label", item.expert_label ? json(std::string(to_string(*item.expert_label))) : json(nullptr)},
         {"note", item.note},
         {"version", item.version}};
  if (!blind || item.reviewed()) {
    j["p_defective"] = item.p_defective;
    j["predicted"] = std::string(to_string(item.predicted()));
  } else {
    j["p_defective"] = nullptr;
    j["predicted"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------------------

ReviewService::ReviewService(ReviewOptions opts) : opts_(std::move(opts)) {
  if (opts_.state_dir.empty()) throw ValidationError("review service needs a state directory");
  if (opts_.snapshot_every < 1) throw ParameterError("snapshot_every must be >= 1");
}

ReviewService::~ReviewService() {
  if (warm_up_thread_.joinable()) warm_up_thread_.join();
}

std::string ReviewService::warm_up_error() const {
  std::lock_guard lock(state_mutex_);
  return warm_up_error_;
}

void ReviewService::warm_up() {
  auto manifest = opts_.dataset;
  if (std::filesystem::is_directory(manifest)) manifest /= "manifest.json";
  groups_ = load_manifest(manifest);
  auto loaded = load_checkpoint(opts_.checkpoint);
  model_ = std::move(loaded.model);
  model_info_ = loaded.info;

  ReviewState base;
  for (const auto& g : groups_) {
    if (!g.complete()) continue;
    const double p = softmax(classify_group(*model_, g, model_info_.config, model_info_.norm))(1);
    base.add_item(g.id, p);
    by_id_[g.id] = &g;
  }

  std::filesystem::create_directories(opts_.state_dir);
  // The snapshot is a cache of the journal; the journal wins on disagreement.
  ReviewState state = replay(base, LabelJournal::read(journal_path()));
  {
    std::lock_guard lock(state_mutex_);
    base_ = std::move(base);
    state_ = std::move(state);
    journal_ = std::make_unique<LabelJournal>(journal_path());
  }
  write_snapshot();
  ready_ = true;
}

void ReviewService::warm_up_async() {
  warm_up_thread_ = std::thread([this] {
    try {
      warm_up();
    } catch (const std::exception& e) {
      std::lock_guard lock(state_mutex_);
      warm_up_error_ = e.what();
    }
  });
}

ReviewState ReviewService::state() const {
  std::lock_guard lock(state_mutex_);
  return state_;
}

void ReviewService::write_snapshot() const {
  json items = json::object();
  for (const auto& [id, item] : state_.items())
    if (item.version > 0)
      items[id] = {{"expert_label", std::string(to_string(*item.expert_label))},
                   {"note", item.note},
                   {"version", item.version},
                   {"last_seq", item.last_seq}};
  write_atomic(snapshot_path(), json{{"last_seq", state_.last_seq()}, {"items", items}}.dump(2) + "\n");
}

HttpReply ReviewService::get_queue() const {
  if (!ready_) return {503, {{"error", "model warm-up in progress"}}};
  std::lock_guard lock(state_mutex_);
  json out = json::array();
  const auto order = opts_.blind ? QueueOrder::id : opts_.order;
  for (const auto* item : state_.queue(order)) out.push_back(item_summary(*item, opts_.blind));
  return {200, out};
}

ReviewService::ExplanationRecord ReviewService::ensure_explanation(const std::string& id, bool& cached) {
  const ModelConfig& cfg = model_info_.config;
  const ViewKind view = cfg.mode == ViewMode::one_view && cfg.views.size() == 1 ? cfg.views.front() : ViewKind::top;
  const ExplanationRecord rec{opts_.state_dir / "explanations" / (id + ".png"),
                              opts_.state_dir / "explanations" / (id + ".json"), view};
  std::shared_future<ExplanationRecord> future;
  std::shared_ptr<std::promise<ExplanationRecord>> promise;
  {
    std::lock_guard lock(flight_mutex_);
    if (std::filesystem::exists(rec.weights) && std::filesystem::exists(rec.overlay)) {
      cached = true;
      return rec;
    }
    if (auto it = in_flight_.find(id); it != in_flight_.end()) {
      future = it->second;
    } else {
      promise = std::make_shared<std::promise<ExplanationRecord>>();
      future = promise->get_future().share();
      in_flight_[id] = future;
    }
  }
  cached = false;
  if (!promise) return future.get();

  try {
    const GrayImage& img = by_id_.at(id)->view(view);
    Explanation expl;
    {
      std::lock_guard lock(model_mutex_);
      expl = explain(model_probability_fn(*model_, model_info_.norm, opts_.explain.batch), img, opts_.explain);
    }
    std::filesystem::create_directories(rec.overlay.parent_path());
    json weights = weights_json(expl);
    weights["view"] = std::string(to_string(view));
    weights["model"] = cfg.name();
    const auto tmp_png = rec.overlay.string() + ".tmp.png";
    write_png(tmp_png, render_overlay(img, expl));
    std::filesystem::rename(tmp_png, rec.overlay);
    write_atomic(rec.weights, weights.dump(2) + "\n");
    promise->set_value(rec);
  } catch (...) {
    promise->set_exception(std::current_exception());
  }
  {
    std::lock_guard lock(flight_mutex_);
    in_flight_.erase(id);
  }
  return future.get();
}

HttpReply ReviewService::get_group(const std::string& id) {
  if (!ready_) return {503, {{"error", "model warm-up in progress"}}};
  json out;
  bool reviewed = false;
  {
    std::lock_guard lock(state_mutex_);
    if (!state_.contains(id)) return {404, {{"error", "unknown group " + id}}};
    const auto& item = state_.item(id);
    out = item_summary(item, opts_.blind);
    reviewed = item.reviewed();
  }
  json images = json::object();
  for (auto v : kAllViews)
    images[std::string(to_string(v))] = "/api/images/" + id + "/" + std::string(to_string(v)) + ".png";
  out["images"] = images;
  if (opts_.blind && !reviewed) {
    out["explanation"] = nullptr;
    out["cached"] = false;
    return {200, out};
  }
  bool cached = false;
  const auto rec = ensure_explanation(id, cached);
  std::ifstream in(rec.weights);
  json weights = json::parse(in);
  out["explanation"] = {{"view", std::string(to_string(rec.view))},
                        {"overlay_url", "/api/groups/" + id + "/overlay.png"},
                        {"weights", weights.at("weights")},
                        {"fidelity_r2", weights.at("fidelity_r2")}};
  out["cached"] = cached;
  return {200, out};
}

HttpReply ReviewService::post_label(const std::string& id, const std::string& body) {
  if (!ready_) return {503, {{"error", "model warm-up in progress"}}};
  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error&) {
    return {400, {{"error", "request body is not JSON"}}};
  }
  if (!req.is_object() || !req.contains("expert_label") || !req["expert_label"].is_string())
    return {400, {{"error", "expert_label is required"}}};
  const auto label = parse_raw_label(req["expert_label"].get<std::string>());
  if (!label) return {400, {{"error", "invalid label " + req["expert_label"].dump()}}};
  std::string note;
  if (req.contains("note")) {
    if (!req["note"].is_string()) return {400, {{"error", "note must be a string"}}};
    note = req["note"].get<std::string>();
  }
  std::optional<int> expected;
  if (req.contains("expected_version") && !req["expected_version"].is_null()) {
    if (!req["expected_version"].is_number_integer()) return {400, {{"error", "expected_version must be an integer"}}};
    expected = req["expected_version"].get<int>();
  }

  std::lock_guard lock(state_mutex_);
  if (!state_.contains(id)) return {404, {{"error", "unknown group " + id}}};
  const ReviewItem& item = state_.item(id);
  if (state_.is_noop(id, *label, note)) return {200, item_summary(item, opts_.blind)};
  if ((expected && *expected != item.version) || (!expected && item.reviewed()))
    return {409, {{"error", "group " + id + " was labeled concurrently; refetch and retry with expected_version"},
                  {"current", item_summary(item, opts_.blind)}}};
  LabelEvent e;
  e.seq = state_.last_seq() + 1;
  e.id = id;
  e.expert_label = *label;
  e.note = note;
  e.prior_p_defective = item.p_defective;
  e.prior_prediction = item.predicted();
  e.timestamp = utc_now();
  journal_->append(e);
  state_.apply(e);
  if (++events_since_snapshot_ >= opts_.snapshot_every) {
    write_snapshot();
    events_since_snapshot_ = 0;
  }
  return {200, item_summary(state_.item(id), opts_.blind)};
}

HttpReply ReviewService::get_metrics() const {
  if (opts_.runs_dir.empty() || !std::filesystem::exists(opts_.runs_dir / "grid.json")) return {204, nullptr};
  std::ifstream in(opts_.runs_dir / "grid.json");
  json grid;
  try {
    grid = json::parse(in);
  } catch (const json::parse_error& e) {
    return {500, {{"error", std::string("unreadable grid.json: ") + e.what()}}};
  }
  json by_status{{"pending", 0}, {"reviewed", 0}};
  json by_label{{"normal", 0}, {"normal_defective", 0}, {"defective", 0}, {"unlabeled", 0}};
  int total = 0;
  {
    std::lock_guard lock(state_mutex_);
    for (const auto& [id, item] : state_.items()) {
      ++total;
      by_status[item.reviewed() ? "reviewed" : "pending"] = by_status[item.reviewed() ? "reviewed" : "pending"].get<int>() + 1;
      std::optional<RawLabel> label = item.expert_label;
      if (!label) {
        auto it = by_id_.find(id);
        if (it != by_id_.end()) label = it->second->raw_label;
      }
      const std::string key = label ? std::string(to_string(*label)) : "unlabeled";
      by_label[key] = by_label[key].get<int>() + 1;
    }
  }
  return {200, {{"cells", grid.value("cells", json::array())},
                {"counts", {{"total", total}, {"by_status", by_status}, {"by_label", by_label}}}}};
}

std::optional<std::filesystem::path> ReviewService::image_path(const std::string& id, const std::string& view) const {
  if (!ready_) return std::nullopt;
  auto it = by_id_.find(id);
  const auto kind = parse_view(view);
  if (it == by_id_.end() || !kind) return std::nullopt;
  auto p = it->second->source_paths.find(*kind);
  if (p == it->second->source_paths.end()) return std::nullopt;
  return p->second;
}

std::optional<std::filesystem::path> ReviewService::overlay_path(const std::string& id) const {
  if (!ready_ || by_id_.count(id) == 0) return std::nullopt;
  const auto path = opts_.state_dir / "explanations" / (id + ".png");
  if (!std::filesystem::exists(path)) return std::nullopt;
  return path;
}

// ---------------------------------------------------------------------------
// HTTP transport

struct HttpServer::Impl {
  ReviewService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(ReviewService& s) : service(s) {}
};

namespace {

void reply(httplib::Response& res, const HttpReply& r) {
  res.status = r.status;
  if (!r.body.is_null()) res.set_content(r.body.dump(), "application/json");
}

void send_file(httplib::Response& res, const std::optional<std::filesystem::path>& path) {
  if (!path) {
    res.status = 404;
    res.set_content(R"({"error":"not found"})", "application/json");
    return;
  }
  std::ifstream in(*path, std::ios::binary);
  if (!in) {
    res.status = 404;
    return;
  }
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  res.set_content(std::move(data), "image/png");
}

void guarded(httplib::Response& res, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    reply(res, {400, {{"error", e.what()}}});
  } catch (const std::exception& e) {
    reply(res, {500, {{"error", e.what()}}});
  }
}

}  // namespace

HttpServer::HttpServer(ReviewService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  auto& svc = impl_->service;
  srv.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/api/queue", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, svc.get_queue()); });
  });
  srv.Get("/api/metrics", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, svc.get_metrics()); });
  });
  srv.Get(R"(/api/groups/([^/]+)/overlay\.png)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_file(res, svc.overlay_path(req.matches[1])); });
  });
  srv.Get(R"(/api/groups/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, svc.get_group(req.matches[1])); });
  });
  srv.Post(R"(/api/groups/([^/]+)/label)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, svc.post_label(req.matches[1], req.body)); });
  });
  srv.Get(R"(/api/images/([^/]+)/([^/]+)\.png)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_file(res, svc.image_path(req.matches[1], req.matches[2])); });
  });
  if (!svc.options().ui_dir.empty() && std::filesystem::is_directory(svc.options().ui_dir))
    srv.set_mount_point("/", svc.options().ui_dir.string());
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  int bound = port;
  if (port == 0)
    bound = srv.bind_to_any_port(host);
  else if (!srv.bind_to_port(host, port))
    bound = -1;
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int review_port_from_env() {
  const char* env = std::getenv("FOAMQC_PORT");
  if (!env || !*env) return 8080;
  char* end = nullptr;
  const long port = std::strtol(env, &end, 10);
  if (*end != '\0' || port < 0 || port > 65535) throw ValidationError(std::string("invalid FOAMQC_PORT: ") + env);
  return static_cast<int>(port);
}

}  // namespace foamqc
