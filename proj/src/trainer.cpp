#include "foamqc/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>

#include "foamqc/loss.hpp"
#include "foamqc/parallel.hpp"
#include "foamqc/rng.hpp"

namespace foamqc {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("epochs must be >= 1");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ParameterError("learning_rate must be > 0");
  if (weight_decay < 0) throw ParameterError("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ParameterError("Adam betas must lie in [0, 1)");
  if (input_size < 32) throw ParameterError("input_size must be >= 32");
  if (normalization && !(normalization->std > 0)) throw ParameterError("normalization std must be > 0");
  augmentation.validate();
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<nn::Param<float>*> params, const TrainConfig& cfg)
    : lr_(cfg.learning_rate), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_epsilon) {
  for (auto* p : params)
    if (p->trainable) {
      params_.push_back(p);
      m_.push_back(nn::Mat<float>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(nn::Mat<float>::Zero(p->value.rows(), p->value.cols()));
    }
}

void Adam::step() {
  ++t_;
  const auto c1 = static_cast<float>(1.0 / (1.0 - std::pow(b1_, static_cast<double>(t_))));
  const auto c2 = static_cast<float>(1.0 / (1.0 - std::pow(b2_, static_cast<double>(t_))));
  const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const auto lr = static_cast<float>(lr_), wd = static_cast<float>(wd_), eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    const nn::Mat<float> g = p.grad + wd * p.value;
    m_[i] = b1 * m_[i] + (1 - b1) * g;
    v_[i] = b2 * v_[i] + (1 - b2) * g.cwiseAbs2();
    p.value.array() -= lr * (m_[i].array() * c1) / ((v_[i].array() * c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  long long pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg_rank, ++pos;
    i = j;
  }
  const long long neg = static_cast<long long>(n) - pos;
  if (pos == 0 || neg == 0) throw ValidationError("AUC is undefined: the evaluation set contains only one class");
  return (rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

namespace {

int binary(const ExampleGroup& g) {
  if (!g.raw_label) throw ValidationError("group " + g.id + " is unlabeled");
  return static_cast<int>(collapse_label(*g.raw_label));
}

std::vector<const ExampleGroup*> resolve(const std::vector<ExampleGroup>& groups, const std::vector<std::string>& ids) {
  std::map<std::string_view, const ExampleGroup*> by_id;
  for (const auto& g : groups) by_id[g.id] = &g;
  std::vector<const ExampleGroup*> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("split refers to unknown group " + id);
    out.push_back(it->second);
  }
  return out;
}

void check_groups(const std::vector<const ExampleGroup*>& groups, const ModelConfig& cfg, int size) {
  for (const auto* g : groups) {
    binary(*g);
    if (!cfg.include_nd && *g->raw_label == RawLabel::normal_defective)
      throw ValidationError("group " + g->id + " is normal_defective but the configuration excludes ND groups");
    for (auto v : cfg.views) {
      if (!g->has_view(v)) throw ValidationError("group " + g->id + " is missing view " + std::string(to_string(v)));
      const auto& img = g->view(v);
      if (img.height() != size || img.width() != size)
        throw ValidationError("group " + g->id + " view " + std::string(to_string(v)) + " is " +
                              std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                              ", expected the preprocessed size " + std::to_string(size));
    }
  }
}

double unweighted_ce(const Eigen::Vector2f& logits, int label) {
  const double m = std::max(logits(0), logits(1));
  const double lse = m + std::log(std::exp(logits(0) - m) + std::exp(logits(1) - m));
  return lse - logits(label);
}

}  // namespace

Normalization compute_normalization(const std::vector<const ExampleGroup*>& groups, const ModelConfig& cfg) {
  double sum = 0, sum_sq = 0, count = 0;
  for (const auto* g : groups)
    for (auto v : cfg.views) {
      const auto& px = g->view(v).pixels;
      const Eigen::ArrayXd a = px.cast<double>().reshaped().array() / 255.0;
      sum += a.sum();
      sum_sq += a.square().sum();
      count += static_cast<double>(a.size());
    }
  if (count == 0) return {};
  const double mean = sum / count;
  const double var = std::max(0.0, sum_sq / count - mean * mean);
  if (var < 1e-12) return {};
  return {mean, std::sqrt(var)};
}

EvalResult evaluate(Model& model, const std::vector<const ExampleGroup*>& groups, const ModelConfig& cfg,
                    const Normalization& norm) {
  EvalResult out;
  if (groups.empty()) throw ValidationError("cannot evaluate on an empty set of groups");
  std::vector<double> scores;
  std::vector<int> labels;
  int correct = 0;
  for (const auto* g : groups) {
    const int y = binary(*g);
    const Eigen::Vector2f logits = classify_group(model, *g, cfg, norm);
    const double p = softmax(logits)(1);
    out.loss += unweighted_ce(logits, y);
    // argmax with ties to "normal"
    correct += (logits(1) > logits(0) ? 1 : 0) == y;
    out.predictions.push_back({g->id, y, p});
    scores.push_back(p);
    labels.push_back(y);
  }
  out.loss /= static_cast<double>(groups.size());
  out.accuracy = 100.0 * correct / static_cast<double>(groups.size());
  try {
    out.auc = 100.0 * roc_auc(scores, labels);
  } catch (const ValidationError& e) {
    out.auc_error = e.what();
  }
  return out;
}

EvalResult evaluate(const std::filesystem::path& checkpoint, const std::vector<const ExampleGroup*>& groups,
                    const ModelConfig& cfg) {
  auto loaded = load_checkpoint(checkpoint);
  return evaluate(*loaded.model, groups, cfg, loaded.info.norm);
}

json to_json(const EvalResult& r) {
  json preds = json::array();
  for (const auto& p : r.predictions) preds.push_back({{"id", p.id}, {"label", p.label}, {"p_defective", p.p_defective}});
  json j{{"accuracy", r.accuracy}, {"loss", r.loss}, {"predictions", preds}};
  j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
  if (!r.auc_error.empty()) j["auc_error"] = r.auc_error;
  return j;
}

// ---------------------------------------------------------------------------

TrainReport train(Model& model, const std::vector<ExampleGroup>& groups, const DatasetSplit& split,
                  const ModelConfig& cfg, const TrainConfig& tcfg, const TrainOptions& opts) {
  tcfg.validate();
  if (cfg.views.empty()) throw ValidationError("configuration has no views");
  if (split.train.empty() || split.test.empty()) throw ValidationError("training needs non-empty train and test splits");
  if (split.include_nd != cfg.include_nd)
    throw ValidationError("split and configuration disagree on normal_defective groups");
  const int size = model.backbone.spec().input_size;
  if (size != tcfg.input_size)
    throw ValidationError("model input size " + std::to_string(size) + " differs from input_size " +
                          std::to_string(tcfg.input_size));
  const auto train_groups = resolve(groups, split.train);
  const auto test_groups = resolve(groups, split.test);
  check_groups(train_groups, cfg, size);
  check_groups(test_groups, cfg, size);

  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.config = cfg;
  report.training = tcfg;
  report.split = split;
  report.seed = tcfg.seed;
  report.norm = tcfg.normalization ? *tcfg.normalization : compute_normalization(train_groups, cfg);

  std::array<double, 2> class_weights{1.0, 1.0};
  if (tcfg.class_weights) {
    std::array<int, 2> counts{0, 0};
    for (const auto* g : train_groups) ++counts[binary(*g)];
    for (int c = 0; c < 2; ++c)
      if (counts[c] > 0) class_weights[c] = static_cast<double>(train_groups.size()) / (2.0 * counts[c]);
  }

  const bool multi = cfg.mode == ViewMode::multi_view;
  const int views_per_sample = multi ? static_cast<int>(cfg.views.size()) : 1;
  Adam adam(model.params(), tcfg);
  Rng order_rng(mix_seed(tcfg.seed, 0x5eedULL));
  const int combos = tcfg.augmentation.combinations();

  std::vector<nn::Mat<float>> best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_groups.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    AugmentSpec aug = tcfg.augmentation;
    aug.seed = mix_seed(tcfg.augmentation.seed, tcfg.seed, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0;
    int samples_seen = 0, correct = 0;
    for (std::size_t b0 = 0, batch = 0; b0 < order.size(); b0 += tcfg.batch_size, ++batch) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(tcfg.batch_size));
      std::vector<ExampleGroup> storage;
      storage.reserve(b1 - b0);
      std::vector<int> labels;
      for (std::size_t i = b0; i < b1; ++i) {
        const ExampleGroup& src = *train_groups[order[i]];
        ExampleGroup g;
        g.id = src.id;
        for (auto v : cfg.views) g.images[v] = src.view(v);
        if (tcfg.augment) {
          const int index = static_cast<int>(
              mix_seed(tcfg.seed, static_cast<std::uint64_t>(epoch), fnv1a(src.id)) % static_cast<std::uint64_t>(combos));
          g = augment_variant(g, aug, index);
        }
        storage.push_back(std::move(g));
        for (int k = 0; k < (multi ? 1 : static_cast<int>(cfg.views.size())); ++k) labels.push_back(binary(src));
      }
      std::vector<const GrayImage*> images;
      for (const auto& g : storage)
        for (auto v : cfg.views) images.push_back(&g.view(v));

      const auto input = make_input<float>(images, size, report.norm);
      model.zero_grad();
      const nn::Mat<float> logits = model.forward(input, views_per_sample, nn::Mode::train);
      const auto loss = cross_entropy<float>(logits, labels, class_weights);
      if (!std::isfinite(loss.loss))
        throw Error("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(batch) + " (learning rate " + std::to_string(tcfg.learning_rate) + ")");
      model.backward(loss.d_logits);
      model.release();
      adam.step();

      const auto n = static_cast<int>(labels.size());
      loss_sum += static_cast<double>(loss.loss) * n;
      samples_seen += n;
      for (int i = 0; i < n; ++i) correct += (logits(1, i) > logits(0, i) ? 1 : 0) == labels[static_cast<std::size_t>(i)];
    }

    EpochMetrics m;
    m.train_loss = loss_sum / samples_seen;
    m.train_acc = 100.0 * correct / samples_seen;
    const EvalResult eval = evaluate(model, test_groups, cfg, report.norm);
    m.test_loss = eval.loss;
    m.test_acc = eval.accuracy;
    m.test_auc = eval.auc ? *eval.auc : std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(m.test_loss))
      throw Error("training diverged: non-finite test loss at epoch " + std::to_string(epoch));
    report.epochs.push_back(m);
    if (m.test_loss < best_loss) {
      best_loss = m.test_loss;
      report.selected_epoch = epoch;
      best.clear();
      for (auto* p : model.params()) best.push_back(p->value);
      report.test_probabilities.clear();
      for (const auto& p : eval.predictions) report.test_probabilities[p.id] = p.p_defective;
    }
    if (opts.on_epoch) opts.on_epoch(epoch, m);
  }

  auto params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  const auto& sel = report.epochs[static_cast<std::size_t>(report.selected_epoch)];
  report.accuracy_at_min_loss = sel.test_acc;
  report.auc = sel.test_auc;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!opts.checkpoint.empty()) {
    CheckpointInfo info;
    info.config = cfg;
    info.epoch = report.selected_epoch;
    info.metrics = {{"accuracy", sel.test_acc}, {"auc", std::isfinite(sel.test_auc) ? json(sel.test_auc) : json(nullptr)},
                    {"test_loss", sel.test_loss}};
    info.input_size = size;
    info.norm = report.norm;
    save_checkpoint(opts.checkpoint, model, info);
  }
  return report;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double null_to_nan(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

json split_json(const DatasetSplit& s) {
  return {{"train", s.train}, {"test", s.test}, {"seed", s.seed}, {"include_nd", s.include_nd}};
}

}  // namespace

json to_json(const TrainReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"test_loss", e.test_loss},
                      {"test_acc", e.test_acc},
                      {"test_auc", nan_to_null(e.test_auc)}});
  const auto& t = r.training;
  return {{"config", to_json(r.config)},
          {"training",
           {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"weight_decay", t.weight_decay},
            {"class_weights", t.class_weights},
            {"augment", t.augment},
            {"input_size", t.input_size}}},
          {"split", split_json(r.split)},
          {"seed", r.seed},
          {"normalization", {{"mean", r.norm.mean}, {"std", r.norm.std}}},
          {"epochs", epochs},
          {"selected_epoch", r.selected_epoch},
          {"accuracy_at_min_loss", r.accuracy_at_min_loss},
          {"auc", nan_to_null(r.auc)},
          {"test_probabilities", r.test_probabilities}};
}

TrainReport train_report_from_json(const json& j) {
  TrainReport r;
  r.config = model_config_from_json(j.at("config"));
  if (j.contains("training")) {
    const auto& t = j["training"];
    r.training.epochs = t.value("epochs", r.training.epochs);
    r.training.batch_size = t.value("batch_size", r.training.batch_size);
    r.training.learning_rate = t.value("learning_rate", r.training.learning_rate);
    r.training.weight_decay = t.value("weight_decay", r.training.weight_decay);
    r.training.class_weights = t.value("class_weights", r.training.class_weights);
    r.training.augment = t.value("augment", r.training.augment);
    r.training.input_size = t.value("input_size", r.training.input_size);
  }
  r.seed = j.value("seed", r.training.seed);
  const auto& s = j.at("split");
  r.split.train = s.at("train").get<std::vector<std::string>>();
  r.split.test = s.at("test").get<std::vector<std::string>>();
  r.split.seed = s.value("seed", std::uint64_t{0});
  r.split.include_nd = s.value("include_nd", true);
  if (j.contains("normalization")) r.norm = {j["normalization"].at("mean"), j["normalization"].at("std")};
  for (const auto& e : j.at("epochs"))
    r.epochs.push_back({e.at("train_loss"), e.at("train_acc"), e.at("test_loss"), e.at("test_acc"),
                        null_to_nan(e.at("test_auc"))});
  r.selected_epoch = j.at("selected_epoch");
  r.accuracy_at_min_loss = j.at("accuracy_at_min_loss");
  r.auc = null_to_nan(j.at("auc"));
  if (j.contains("test_probabilities")) r.test_probabilities = j["test_probabilities"].get<std::map<std::string, double>>();
  return r;
}

// ---------------------------------------------------------------------------
// Grid

namespace {

double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string slug(const ModelConfig& cfg) {
  std::string s;
  for (char c : cfg.name()) s += (c == ' ' || c == '-') ? '_' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s + (cfg.include_nd ? "_nd" : "_no_nd");
}

std::vector<ModelConfig> grid_configs(const TensorArchive* pretrained) {
  std::vector<ModelConfig> out;
  for (bool nd : {true, false})
    for (auto c : standard_configs(nd)) {
      c.pretrained = pretrained != nullptr;
      out.push_back(c);
    }
  return out;
}

struct Job {
  std::size_t cell;
  std::uint64_t seed;
  int removed;
};

// One training run; the split is derived from (seed, include_nd) so every
// configuration of a seed sees the same test set.
TrainReport run_one(const std::vector<ExampleGroup>& groups, const ModelConfig& cfg, const TrainConfig& tcfg,
                    const GridOptions& opts, std::uint64_t seed, int removed, const std::string& tag) {
  DatasetSplit split = stratified_split(groups, opts.train_ratio, cfg.include_nd, seed);
  if (removed > 0) {
    if (static_cast<int>(split.train.size()) <= removed)
      throw ValidationError("train split has " + std::to_string(split.train.size()) + " groups, cannot remove " +
                            std::to_string(removed));
    split = reduce_train(split, groups, removed, seed);
  }
  TrainConfig run_cfg = tcfg;
  run_cfg.seed = seed;
  Model model(BackboneSpec{1, tcfg.input_size}, mix_seed(seed, 0x1417ULL));
  if (opts.pretrained) load_pretrained(model, *opts.pretrained);
  TrainOptions topts;
  std::filesystem::path dir;
  if (!opts.out_dir.empty()) {
    dir = opts.out_dir / tag / run_directory(cfg, seed);
    if (opts.save_checkpoints) topts.checkpoint = dir / "checkpoint.bin";
  }
  auto report = train(model, groups, split, cfg, run_cfg, topts);
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "report.json") << to_json(report).dump(2) << '\n';
  }
  if (opts.log) {
    std::ostringstream msg;
    msg << cfg.name() << (cfg.include_nd ? " +ND" : " -ND") << " seed " << seed << (removed ? " reduced" : "")
        << ": accuracy " << report.accuracy_at_min_loss << "%, AUC " << report.auc << "% (epoch "
        << report.selected_epoch << ", " << report.seconds << " s)";
    opts.log(msg.str());
  }
  return report;
}

}  // namespace

std::string run_directory(const ModelConfig& cfg, std::uint64_t seed) {
  return slug(cfg) + "/seed" + std::to_string(seed);
}

double GridCell::accuracy() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.accuracy_at_min_loss);
  return mean(v);
}

double GridCell::auc() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.auc);
  return mean(v);
}

const GridCell* GridResult::find(const std::string& name, bool include_nd) const {
  for (const auto& c : cells)
    if (c.config.name() == name && c.config.include_nd == include_nd) return &c;
  return nullptr;
}

GridResult run_grid(const std::vector<ExampleGroup>& groups, const TrainConfig& tcfg, const GridOptions& opts) {
  tcfg.validate();
  if (opts.seeds.empty()) throw ParameterError("grid needs at least one seed");
  GridResult grid;
  for (const auto& c : grid_configs(opts.pretrained)) grid.cells.push_back(GridCell{c, {}, false, {}});

  std::vector<Job> jobs;
  for (std::size_t c = 0; c < grid.cells.size(); ++c)
    for (auto s : opts.seeds) jobs.push_back({c, s, 0});
  std::vector<std::optional<TrainReport>> reports(jobs.size());
  std::vector<std::string> errors(jobs.size());
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t i) {
    try {
      reports[i] = run_one(groups, grid.cells[jobs[i].cell].config, tcfg, opts, jobs[i].seed, 0, "");
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (opts.log) opts.log(grid.cells[jobs[i].cell].config.name() + " failed: " + e.what());
    }
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto& cell = grid.cells[jobs[i].cell];
    if (reports[i])
      cell.runs.push_back(std::move(*reports[i]));
    else if (!cell.failed)
      cell.failed = true, cell.error = errors[i];
  }
  return grid;
}

std::string grid_csv(const GridResult& grid) {
  struct Row {
    const char* label;
    const char* one_view;
    const char* multi_view;
  };
  const Row rows[] = {{"Top", "OV Top", nullptr},
                      {"Bottom", "OV Bottom", nullptr},
                      {"Top-Bottom", "OV Top-Bottom", "MV Top-Bottom"},
                      {"Profiles", nullptr, "MV Profiles"},
                      {"Full Group", nullptr, "MV Full Group"}};
  auto cell_text = [&](const char* name, bool nd, bool want_auc) -> std::string {
    if (!name) return "--";
    const GridCell* c = grid.find(name, nd);
    if (!c) return "--";
    if (c->failed || c->runs.empty()) return "failed";
    const double v = want_auc ? c->auc() : c->accuracy();
    if (!std::isfinite(v)) return "nan";
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(1);
    s << v;
    return s.str();
  };
  std::ostringstream out;
  out << "metric,views,One-view +ND,One-view -ND,Multi-view +ND,Multi-view -ND\n";
  for (bool want_auc : {false, true})
    for (const auto& r : rows)
      out << (want_auc ? "auc" : "accuracy") << ',' << r.label << ',' << cell_text(r.one_view, true, want_auc) << ','
          << cell_text(r.one_view, false, want_auc) << ',' << cell_text(r.multi_view, true, want_auc) << ','
          << cell_text(r.multi_view, false, want_auc) << '\n';
  return out.str();
}

json to_json(const GridResult& grid) {
  json cells = json::array();
  for (const auto& c : grid.cells) {
    json runs = json::array();
    for (const auto& r : c.runs)
      runs.push_back({{"seed", r.seed},
                      {"accuracy", r.accuracy_at_min_loss},
                      {"auc", nan_to_null(r.auc)},
                      {"selected_epoch", r.selected_epoch},
                      {"directory", run_directory(c.config, r.seed)}});
    json cell{{"name", c.config.name()}, {"include_nd", c.config.include_nd}, {"config", to_json(c.config)},
              {"failed", c.failed}, {"runs", runs}};
    cell["accuracy"] = c.runs.empty() ? json(nullptr) : nan_to_null(c.accuracy());
    cell["auc"] = c.runs.empty() ? json(nullptr) : nan_to_null(c.auc());
    if (c.failed) cell["error"] = c.error;
    cells.push_back(cell);
  }
  return {{"cells", cells}};
}

// ---------------------------------------------------------------------------
// Ablation

double AblationCell::accuracy_delta() const {
  std::vector<double> d;
  for (std::size_t i = 0; i < accuracy_full.size(); ++i) d.push_back(accuracy_full[i] - accuracy_reduced[i]);
  return mean(d);
}

double AblationCell::auc_delta() const {
  std::vector<double> d;
  for (std::size_t i = 0; i < auc_full.size(); ++i) d.push_back(auc_full[i] - auc_reduced[i]);
  return mean(d);
}

AblationResult ablate_data_size(const std::vector<ExampleGroup>& groups, const TrainConfig& tcfg,
                                const GridOptions& opts, int removed) {
  tcfg.validate();
  if (removed < 0) throw ParameterError("removed must be >= 0");
  if (opts.seeds.empty()) throw ParameterError("ablation needs at least one seed");
  AblationResult result;
  result.removed = removed;
  for (const auto& c : grid_configs(opts.pretrained)) result.cells.push_back(AblationCell{c, {}, {}, {}, {}, false, {}});

  // Fail fast on a train split that is too small.
  for (bool nd : {true, false}) {
    const auto split = stratified_split(groups, opts.train_ratio, nd, opts.seeds.front());
    if (removed > 0 && static_cast<int>(split.train.size()) <= removed)
      throw ValidationError("train split has " + std::to_string(split.train.size()) + " groups, cannot remove " +
                            std::to_string(removed));
  }

  std::vector<Job> jobs;
  for (std::size_t c = 0; c < result.cells.size(); ++c)
    for (auto s : opts.seeds) {
      jobs.push_back({c, s, 0});
      if (removed > 0) jobs.push_back({c, s, removed});
    }
  std::vector<std::optional<TrainReport>> reports(jobs.size());
  std::vector<std::string> errors(jobs.size());
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t i) {
    const auto& j = jobs[i];
    try {
      reports[i] = run_one(groups, result.cells[j.cell].config, tcfg, opts, j.seed, j.removed,
                           j.removed ? "reduced" : "full");
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  std::map<std::pair<std::size_t, std::uint64_t>, std::pair<const TrainReport*, const TrainReport*>> pairs;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto& cell = result.cells[jobs[i].cell];
    if (!reports[i]) {
      if (!cell.failed) cell.failed = true, cell.error = errors[i];
      continue;
    }
    auto& p = pairs[{jobs[i].cell, jobs[i].seed}];
    (jobs[i].removed ? p.second : p.first) = &*reports[i];
    if (removed == 0) p.second = &*reports[i];
  }
  for (const auto& [key, p] : pairs) {
    auto& cell = result.cells[key.first];
    if (cell.failed || !p.first || !p.second) continue;
    cell.accuracy_full.push_back(p.first->accuracy_at_min_loss);
    cell.accuracy_reduced.push_back(p.second->accuracy_at_min_loss);
    cell.auc_full.push_back(p.first->auc);
    cell.auc_reduced.push_back(p.second->auc);
  }
  std::vector<double> acc, auc;
  for (const auto& c : result.cells)
    if (!c.failed && !c.accuracy_full.empty()) {
      acc.push_back(c.accuracy_delta());
      auc.push_back(c.auc_delta());
    }
  result.mean_accuracy_delta = mean(acc);
  result.mean_auc_delta = mean(auc);
  return result;
}

json to_json(const AblationResult& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    json cell{{"name", c.config.name()},
              {"include_nd", c.config.include_nd},
              {"failed", c.failed},
              {"accuracy_full", c.accuracy_full},
              {"accuracy_reduced", c.accuracy_reduced},
              {"auc_full", c.auc_full},
              {"auc_reduced", c.auc_reduced}};
    cell["accuracy_delta"] = c.accuracy_full.empty() ? json(nullptr) : nan_to_null(c.accuracy_delta());
    cell["auc_delta"] = c.auc_full.empty() ? json(nullptr) : nan_to_null(c.auc_delta());
    if (c.failed) cell["error"] = c.error;
    cells.push_back(cell);
  }
  return {{"removed", r.removed},
          {"cells", cells},
          {"mean_accuracy_delta", nan_to_null(r.mean_accuracy_delta)},
          {"mean_auc_delta", nan_to_null(r.mean_auc_delta)}};
}

}  // namespace foamqc
