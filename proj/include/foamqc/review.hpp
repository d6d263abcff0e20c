#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "foamqc/checkpoint.hpp"
#include "foamqc/dataset.hpp"
#include "foamqc/explain.hpp"

namespace foamqc {

struct ReviewItem {
  std::string id;
  double p_defective = 0.5;
  std::optional<RawLabel> expert_label;
  std::string note;
  int version = 0;  // label events applied to this item
  std::uint64_t last_seq = 0;

  bool reviewed() const { return expert_label.has_value(); }
  BinaryLabel predicted() const { return p_defective > 0.5 ? BinaryLabel::defective : BinaryLabel::normal; }
  friend bool operator==(const ReviewItem&, const ReviewItem&) = default;
};

struct LabelEvent {
  std::uint64_t seq = 0;
  std::string id;
  RawLabel expert_label = RawLabel::normal;
  std::string note;
  double prior_p_defective = 0.5;
  BinaryLabel prior_prediction = BinaryLabel::normal;
  std::string timestamp;  // UTC, ISO 8601
  friend bool operator==(const LabelEvent&, const LabelEvent&) = default;
};

nlohmann::json to_json(const LabelEvent& e);
LabelEvent label_event_from_json(const nlohmann::json& j);

enum class QueueOrder { uncertainty, id };

// Review state as a pure value: items plus the sequence number of the last
// applied event.
class ReviewState {
 public:
  void add_item(const std::string& id, double p_defective);
  bool contains(const std::string& id) const { return items_.count(id) != 0; }
  const ReviewItem& item(const std::string& id) const;
  const std::map<std::string, ReviewItem>& items() const { return items_; }
  std::uint64_t last_seq() const { return last_seq_; }

  // True when the label/note already match (the event would change nothing).
  bool is_noop(const std::string& id, RawLabel label, const std::string& note) const;
  // Applies an event; sequence numbers must increase strictly.
  void apply(const LabelEvent& e);

  // Pending items first, then reviewed ones. Uncertainty order sorts each
  // section by |p - 0.5| ascending, then id; id order sorts by id only.
  std::vector<const ReviewItem*> queue(QueueOrder order = QueueOrder::uncertainty) const;

  friend bool operator==(const ReviewState&, const ReviewState&) = default;

 private:
  std::map<std::string, ReviewItem> items_;
  std::uint64_t last_seq_ = 0;
};

// Append-only JSON-lines file of label events.
class LabelJournal {
 public:
  explicit LabelJournal(std::filesystem::path path);
  void append(const LabelEvent& e);
  const std::filesystem::path& path() const { return path_; }
  // A torn final line (no trailing newline) is ignored; any other malformed
  // line throws ParseError.
  static std::vector<LabelEvent> read(const std::filesystem::path& path);

 private:
  std::filesystem::path path_;
};

// base with every event applied in order.
ReviewState replay(ReviewState base, const std::vector<LabelEvent>& events);

nlohmann::json item_summary(const ReviewItem& item, bool blind);

struct ReviewOptions {
  std::filesystem::path dataset;     // manifest.json of processed groups, or its directory
  std::filesystem::path checkpoint;  // model used for predictions and explanations
  std::filesystem::path state_dir;   // journal, snapshot and explanation cache
  std::filesystem::path runs_dir;    // grid.json for /api/metrics (optional)
  std::filesystem::path ui_dir;      // static files served at / (optional)
  bool blind = false;                // hide predictions of pending items
  QueueOrder order = QueueOrder::uncertainty;
  ExplainParams explain;
  int snapshot_every = 25;  // events between snapshots
};

struct HttpReply {
  int status = 200;
  nlohmann::json body;  // null for bodiless replies
};

// Expert review backend, independent of the HTTP transport.
class ReviewService {
 public:
  explicit ReviewService(ReviewOptions opts);
  ~ReviewService();

  // Loads the dataset and model, scores every group and replays the journal.
  void warm_up();
  void warm_up_async();
  bool ready() const { return ready_; }
  std::string warm_up_error() const;

  HttpReply get_queue() const;
  HttpReply get_group(const std::string& id);
  HttpReply post_label(const std::string& id, const std::string& body);
  HttpReply get_metrics() const;

  // PNG file of a processed view, or of a computed explanation overlay.
  std::optional<std::filesystem::path> image_path(const std::string& id, const std::string& view) const;
  std::optional<std::filesystem::path> overlay_path(const std::string& id) const;

  ReviewState state() const;
  const ReviewState& base_state() const { return base_; }
  const ReviewOptions& options() const { return opts_; }
  std::filesystem::path journal_path() const { return opts_.state_dir / "journal.jsonl"; }
  std::filesystem::path snapshot_path() const { return opts_.state_dir / "snapshot.json"; }

 private:
  struct ExplanationRecord {
    std::filesystem::path overlay, weights;
    ViewKind view;
  };
  ExplanationRecord ensure_explanation(const std::string& id, bool& cached);
  void write_snapshot() const;

  ReviewOptions opts_;
  std::atomic<bool> ready_{false};
  std::string warm_up_error_;
  std::thread warm_up_thread_;

  std::vector<ExampleGroup> groups_;
  std::map<std::string, const ExampleGroup*> by_id_;
  std::unique_ptr<Model> model_;
  CheckpointInfo model_info_;
  ReviewState base_;

  mutable std::mutex state_mutex_;
  ReviewState state_;
  std::unique_ptr<LabelJournal> journal_;
  int events_since_snapshot_ = 0;

  std::mutex model_mutex_;
  std::mutex flight_mutex_;
  std::map<std::string, std::shared_future<ExplanationRecord>> in_flight_;
};

// httplib transport for ReviewService: JSON API, PNG files, CORS, static UI.
class HttpServer {
 public:
  HttpServer(ReviewService& service);
  ~HttpServer();
  // Binds host:port (port 0 picks a free one) and serves on a background thread.
  int start(const std::string& host, int port);
  // Binds and serves on the calling thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// FOAMQC_PORT, default 8080.
int review_port_from_env();

}  // namespace foamqc
