#include "foamqc/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "foamqc/augment.hpp"
#include "foamqc/checkpoint.hpp"
#include "foamqc/explain.hpp"
#include "foamqc/parallel.hpp"
#include "foamqc/preprocess.hpp"
#include "foamqc/review.hpp"
#include "foamqc/synthgen.hpp"
#include "foamqc/trainer.hpp"

namespace foamqc {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void log(const std::string& msg) { std::cerr << "[foamqc] " << msg << std::endl; }

std::string hex(const unsigned char* data, unsigned len) {
  std::ostringstream out;
  for (unsigned i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(data[i]);
  return out.str();
}

std::string sha1(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr)) throw Error("SHA-1 failed");
  return hex(digest, len);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    if (!out) throw Error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace

std::string content_hash(const fs::path& path) {
  if (fs::is_regular_file(path)) {
    const std::string bytes = read_file(path);
    return sha1("blob " + std::to_string(bytes.size()) + '\0' + bytes);
  }
  if (!fs::is_directory(path)) throw ValidationError("no such input: " + path.string());
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), path).generic_string());
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += content_hash(path / f) + ' ' + f + '\n';
  return sha1(listing);
}

json default_settings() {
  const SynthParams sp;
  const CircleSearchParams cp;
  const AugmentSpec aug;
  const TrainConfig tc;
  const ExplainParams ep;
  const ModelConfig mc;
  json views = json::array();
  for (auto v : mc.views) views.push_back(std::string(to_string(v)));
  return {
      {"seed", 0},
      {"jobs", default_jobs()},
      // synthgen
      {"n_groups", sp.n_groups},
      {"image_size", sp.image_size},
      {"raw_scale", sp.raw_scale},
      {"class_mix", sp.class_mix},
      {"stain_min", sp.defects.stain_min},
      {"stain_max", sp.defects.stain_max},
      {"stain_area_lo", sp.defects.stain_area_lo},
      {"stain_area_hi", sp.defects.stain_area_hi},
      {"scratch_min", sp.defects.scratch_min},
      {"scratch_max", sp.defects.scratch_max},
      {"scratch_length_lo", sp.defects.scratch_length_lo},
      {"scratch_length_hi", sp.defects.scratch_length_hi},
      {"scratch_width_max", sp.defects.scratch_width_max},
      {"dark_hole_prob", sp.defects.dark_hole_prob},
      // preprocess
      {"input_size", tc.input_size},
      {"bright_threshold", cp.bright_threshold},
      {"radius_lo", cp.radius_lo},
      {"radius_hi", cp.radius_hi},
      {"center_window", cp.center_window},
      {"step", cp.step},
      // augment
      {"profile_angles", aug.profile_angles},
      {"plan_angles", aug.plan_angles},
      {"noise_sigma", aug.noise_sigma},
      {"brightness_delta", aug.brightness_delta},
      {"contrast_lo", aug.contrast_lo},
      {"contrast_hi", aug.contrast_hi},
      // split / model
      {"train_ratio", 0.7},
      {"include_nd", mc.include_nd},
      {"mode", std::string(to_string(mc.mode))},
      {"views", views},
      {"pretrained", ""},
      // train
      {"epochs", tc.epochs},
      {"batch_size", tc.batch_size},
      {"learning_rate", tc.learning_rate},
      {"weight_decay", tc.weight_decay},
      {"class_weights", tc.class_weights},
      {"augment", tc.augment},
      {"seeds", json::array()},
      {"removed", 20},
      // explain
      {"n_samples", ep.n_samples},
      {"kernel_width", ep.kernel_width},
      {"ridge", ep.ridge},
      {"cell", ep.cell},
      {"top_k", 6},
  };
}

namespace {

// Defaults < config file < flags.
class Settings {
 public:
  void load_file(const fs::path& path) {
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw ValidationError("config " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ValidationError("config " + path.string() + " must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      if (!values_.contains(key)) throw ValidationError("unknown config key: " + key);
      values_[key] = value;
    }
  }
  void set(const std::string& key, json value) { values_[key] = std::move(value); }
  const json& all() const { return values_; }

  template <typename T>
  T get(const std::string& key) const {
    try {
      return values_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("setting " + key + ": " + e.what());
    }
  }

 private:
  json values_ = default_settings();
};

struct Context {
  Settings settings;
  json flags = json::object();
  std::string config_path;
  fs::path out;
  bool force = false;
  std::vector<std::string> argv;
  std::string command;
  json inputs = json::array();
  std::vector<std::string> outputs;

  void input(const fs::path& p) { inputs.push_back({{"path", p.string()}, {"sha1", content_hash(p)}}); }

  fs::path output(const std::string& name) {
    if (out.empty()) throw ValidationError("--out is required for " + command);
    const fs::path p = out / name;
    if (fs::exists(p) && !force) throw ValidationError("output exists: " + p.string() + " (use --force to overwrite)");
    outputs.push_back(p.string());
    return p;
  }

  void write_manifest() const {
    json doc{{"command", command},
             {"argv", argv},
             {"config", settings.all()},
             {"inputs", inputs},
             {"outputs", outputs},
             {"timestamp", utc_timestamp()}};
    write_atomic(out / "run_manifest.json", doc.dump(2) + "\n");
  }
};

template <typename T>
void flag(CLI::App* app, Context& ctx, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<T>(name, [&ctx, key](const T& v) { ctx.flags[key] = v; }, help);
}

std::uint64_t seed_of(const Settings& s) { return s.get<std::uint64_t>("seed"); }

fs::path manifest_of(const fs::path& data) { return fs::is_directory(data) ? data / "manifest.json" : data; }

std::vector<ExampleGroup> load_eligible(const fs::path& data, Context& ctx) {
  const auto path = manifest_of(data);
  ctx.input(fs::is_directory(data) ? data : path);
  auto groups = load_manifest(path);
  std::vector<ExampleGroup> out;
  for (auto& g : groups) {
    if (!g.errors.empty())
      for (const auto& e : g.errors) log("skipping group " + g.id + ": " + e);
    else if (!g.raw_label)
      log("skipping unlabeled group " + g.id);
    else if (!g.complete())
      log("skipping incomplete group " + g.id);
    else
      out.push_back(std::move(g));
  }
  log("loaded " + std::to_string(out.size()) + " labeled groups from " + path.string());
  return out;
}

ModelConfig model_config(const Settings& s) {
  json j{{"mode", s.get<std::string>("mode")}, {"views", s.get<json>("views")}, {"include_nd", s.get<bool>("include_nd")},
         {"pretrained", !s.get<std::string>("pretrained").empty()}};
  ModelConfig cfg = model_config_from_json(j);
  if (cfg.views.empty()) throw ValidationError("views must not be empty");
  return cfg;
}

AugmentSpec augment_spec(const Settings& s) {
  AugmentSpec a;
  a.profile_angles = s.get<std::vector<double>>("profile_angles");
  a.plan_angles = s.get<std::vector<double>>("plan_angles");
  a.noise_sigma = s.get<double>("noise_sigma");
  a.brightness_delta = s.get<double>("brightness_delta");
  a.contrast_lo = s.get<double>("contrast_lo");
  a.contrast_hi = s.get<double>("contrast_hi");
  a.seed = seed_of(s);
  a.validate();
  return a;
}

TrainConfig train_config(const Settings& s) {
  TrainConfig t;
  t.epochs = s.get<int>("epochs");
  t.batch_size = s.get<int>("batch_size");
  t.learning_rate = s.get<double>("learning_rate");
  t.weight_decay = s.get<double>("weight_decay");
  t.class_weights = s.get<bool>("class_weights");
  t.augment = s.get<bool>("augment");
  t.augmentation = augment_spec(s);
  t.seed = seed_of(s);
  t.input_size = s.get<int>("input_size");
  t.validate();
  return t;
}

CircleSearchParams circle_params(const Settings& s) {
  CircleSearchParams p;
  p.bright_threshold = s.get<int>("bright_threshold");
  p.radius_lo = s.get<double>("radius_lo");
  p.radius_hi = s.get<double>("radius_hi");
  p.center_window = s.get<double>("center_window");
  p.step = s.get<int>("step");
  p.validate();
  return p;
}

ExplainParams explain_params(const Settings& s) {
  ExplainParams p;
  p.n_samples = s.get<int>("n_samples");
  p.kernel_width = s.get<double>("kernel_width");
  p.ridge = s.get<double>("ridge");
  p.cell = s.get<int>("cell");
  p.seed = seed_of(s);
  p.validate();
  return p;
}

std::optional<TensorArchive> pretrained_archive(const Settings& s, Context& ctx) {
  const auto path = s.get<std::string>("pretrained");
  if (path.empty()) return std::nullopt;
  ctx.input(path);
  return read_archive(path);
}

json split_json(const DatasetSplit& split, const std::vector<ExampleGroup>& groups, double ratio) {
  auto counts = [&](const std::vector<std::string>& ids) {
    json c = json::object();
    for (const auto& [label, n] : count_by_label(groups, ids)) c[std::string(to_string(label))] = n;
    return c;
  };
  return {{"train", split.train},
          {"test", split.test},
          {"seed", split.seed},
          {"include_nd", split.include_nd},
          {"train_ratio", ratio},
          {"counts", {{"train", counts(split.train)}, {"test", counts(split.test)}}}};
}

DatasetSplit read_split(const fs::path& path, Context& ctx) {
  ctx.input(path);
  try {
    const json j = json::parse(read_file(path));
    DatasetSplit s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.include_nd = j.value("include_nd", true);
    return s;
  } catch (const json::exception& e) {
    throw ValidationError("split file " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(Context& ctx) {
  const auto& s = ctx.settings;
  SynthParams p;
  p.n_groups = s.get<int>("n_groups");
  p.image_size = s.get<int>("image_size");
  p.raw_scale = s.get<int>("raw_scale");
  p.class_mix = s.get<std::array<double, 3>>("class_mix");
  p.defects.stain_min = s.get<int>("stain_min");
  p.defects.stain_max = s.get<int>("stain_max");
  p.defects.stain_area_lo = s.get<double>("stain_area_lo");
  p.defects.stain_area_hi = s.get<double>("stain_area_hi");
  p.defects.scratch_min = s.get<int>("scratch_min");
  p.defects.scratch_max = s.get<int>("scratch_max");
  p.defects.scratch_length_lo = s.get<double>("scratch_length_lo");
  p.defects.scratch_length_hi = s.get<double>("scratch_length_hi");
  p.defects.scratch_width_max = s.get<int>("scratch_width_max");
  p.defects.dark_hole_prob = s.get<double>("dark_hole_prob");
  p.seed = seed_of(s);
  p.validate();
  ctx.output("manifest.json");
  auto samples = generate(p);
  write_synth_dataset(ctx.out, samples);
  log("wrote " + std::to_string(samples.size()) + " synthetic groups to " + ctx.out.string());
}

void cmd_preprocess(Context& ctx, const fs::path& data) {
  const auto& s = ctx.settings;
  const auto params = circle_params(s);
  const int size = s.get<int>("input_size");
  const auto manifest = manifest_of(data);
  ctx.input(fs::is_directory(data) ? data : manifest);
  const auto out_manifest = ctx.output("manifest.json");
  const auto groups = load_manifest(manifest);
  std::vector<std::string> errors(groups.size());
  std::vector<std::optional<ExampleGroup>> processed(groups.size());
  parallel_for(groups.size(), s.get<int>("jobs"), [&](std::size_t i) {
    const ExampleGroup& g = groups[i];
    try {
      if (!g.errors.empty()) throw ValidationError("group " + g.id + ": " + g.errors.front());
      ExampleGroup p = preprocess_group(g, params, Size2{size, size});
      p.source_paths.clear();
      for (const auto& [v, img] : p.images) {
        const auto path = ctx.out / g.id / (std::string(to_string(v)) + ".png");
        write_png(path, img.pixels);
        p.source_paths[v] = path;
      }
      processed[i] = std::move(p);
    } catch (const ValidationError& e) {
      errors[i] = e.what();
    }
  });
  std::vector<ExampleGroup> ok;
  json failures = json::array();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (processed[i])
      ok.push_back(std::move(*processed[i]));
    else {
      log("skipping " + errors[i]);
      failures.push_back({{"id", groups[i].id}, {"error", errors[i]}});
    }
  }
  write_manifest(out_manifest, ok);
  if (!failures.empty()) write_atomic(ctx.out / "preprocess_errors.json", failures.dump(2) + "\n");
  log("preprocessed " + std::to_string(ok.size()) + " groups to " + std::to_string(size) + "x" + std::to_string(size));
}

void cmd_augment(Context& ctx, const fs::path& data) {
  const auto spec = augment_spec(ctx.settings);
  const auto manifest = manifest_of(data);
  ctx.input(fs::is_directory(data) ? data : manifest);
  const auto out_manifest = ctx.output("manifest.json");
  const auto groups = load_manifest(manifest);
  for (const auto& g : groups)
    if (!g.errors.empty()) throw ValidationError("group " + g.id + ": " + g.errors.front());
  auto variants = parallel_map(groups, ctx.settings.get<int>("jobs"), [&](const ExampleGroup& g) {
    std::vector<ExampleGroup> out;
    int index = 0;
    for (auto& a : augment_group(g, spec)) {
      a.id = g.id + "_a" + std::to_string(index++);
      a.source_paths.clear();
      for (const auto& [v, img] : a.images) {
        const auto path = ctx.out / a.id / (std::string(to_string(v)) + ".png");
        write_png(path, img.pixels);
        a.source_paths[v] = path;
      }
      a.images.clear();
      out.push_back(std::move(a));
    }
    return out;
  });
  std::vector<ExampleGroup> all;
  for (auto& v : variants)
    for (auto& g : v) all.push_back(std::move(g));
  write_manifest(out_manifest, all);
  log("wrote " + std::to_string(all.size()) + " augmented groups (" + std::to_string(spec.combinations()) +
      " per source)");
}

void cmd_split(Context& ctx, const fs::path& data) {
  const auto groups = load_eligible(data, ctx);
  const double ratio = ctx.settings.get<double>("train_ratio");
  const auto split = stratified_split(groups, ratio, ctx.settings.get<bool>("include_nd"), seed_of(ctx.settings));
  write_atomic(ctx.output("split.json"), split_json(split, groups, ratio).dump(2) + "\n");
  log("split: " + std::to_string(split.train.size()) + " train, " + std::to_string(split.test.size()) + " test");
}

void cmd_train(Context& ctx, const fs::path& data, const fs::path& split_path) {
  const auto& s = ctx.settings;
  const auto tcfg = train_config(s);
  const auto cfg = model_config(s);
  const auto groups = load_eligible(data, ctx);
  const auto split = split_path.empty()
                         ? stratified_split(groups, s.get<double>("train_ratio"), cfg.include_nd, seed_of(s))
                         : read_split(split_path, ctx);
  const auto pretrained = pretrained_archive(s, ctx);
  const auto report_path = ctx.output("report.json");
  TrainOptions opts;
  opts.checkpoint = ctx.output("checkpoint.bin");
  opts.on_epoch = [](int e, const EpochMetrics& m) {
    std::ostringstream msg;
    msg << "epoch " << e << ": train loss " << m.train_loss << ", test loss " << m.test_loss << ", test accuracy "
        << m.test_acc << "%, AUC " << m.test_auc << "%";
    log(msg.str());
  };
  Model model(BackboneSpec{1, tcfg.input_size}, mix_seed(tcfg.seed, 0x1417ULL));
  if (pretrained) load_pretrained(model, *pretrained);
  const auto report = train(model, groups, split, cfg, tcfg, opts);
  write_atomic(report_path, to_json(report).dump(2) + "\n");
  log(cfg.name() + ": selected epoch " + std::to_string(report.selected_epoch) + ", accuracy " +
      std::to_string(report.accuracy_at_min_loss) + "%, AUC " + std::to_string(report.auc) + "%");
}

GridOptions grid_options(Context& ctx, const std::optional<TensorArchive>& pretrained) {
  GridOptions g;
  auto seeds = ctx.settings.get<std::vector<std::uint64_t>>("seeds");
  g.seeds = seeds.empty() ? std::vector<std::uint64_t>{seed_of(ctx.settings)} : seeds;
  g.train_ratio = ctx.settings.get<double>("train_ratio");
  g.jobs = ctx.settings.get<int>("jobs");
  g.out_dir = ctx.out / "runs";
  g.pretrained = pretrained ? &*pretrained : nullptr;
  g.log = log;
  return g;
}

void cmd_grid(Context& ctx, const fs::path& data) {
  const auto tcfg = train_config(ctx.settings);
  const auto groups = load_eligible(data, ctx);
  const auto pretrained = pretrained_archive(ctx.settings, ctx);
  const auto csv = ctx.output("grid.csv");
  const auto summary = ctx.output("grid.json");
  const auto grid = run_grid(groups, tcfg, grid_options(ctx, pretrained));
  write_atomic(summary, to_json(grid).dump(2) + "\n");
  write_atomic(csv, grid_csv(grid));
  int failed = 0;
  for (const auto& c : grid.cells) failed += c.failed;
  log("grid finished: " + std::to_string(grid.cells.size() - failed) + " cells, " + std::to_string(failed) + " failed");
}

void cmd_ablate(Context& ctx, const fs::path& data) {
  const auto tcfg = train_config(ctx.settings);
  const auto groups = load_eligible(data, ctx);
  const auto pretrained = pretrained_archive(ctx.settings, ctx);
  const auto out = ctx.output("ablation.json");
  const auto result = ablate_data_size(groups, tcfg, grid_options(ctx, pretrained), ctx.settings.get<int>("removed"));
  write_atomic(out, to_json(result).dump(2) + "\n");
  log("mean accuracy delta " + std::to_string(result.mean_accuracy_delta) + ", mean AUC delta " +
      std::to_string(result.mean_auc_delta));
}

int cmd_eval(Context& ctx, const fs::path& data, const fs::path& ckpt, const fs::path& split_path) {
  ctx.input(ckpt);
  auto loaded = load_checkpoint(ckpt);
  const auto groups = load_eligible(data, ctx);
  std::vector<const ExampleGroup*> eval_groups;
  std::set<std::string> wanted;
  if (!split_path.empty())
    for (const auto& id : read_split(split_path, ctx).test) wanted.insert(id);
  for (const auto& g : groups) {
    if (!wanted.empty() && !wanted.count(g.id)) continue;
    if (!loaded.info.config.include_nd && *g.raw_label == RawLabel::normal_defective) continue;
    eval_groups.push_back(&g);
  }
  const auto out = ctx.output("eval.json");
  const auto result = evaluate(*loaded.model, eval_groups, loaded.info.config, loaded.info.norm);
  write_atomic(out, to_json(result).dump(2) + "\n");
  log("accuracy " + std::to_string(result.accuracy) + "%");
  if (!result.auc) {
    log("error: " + result.auc_error);
    return 1;
  }
  log("AUC " + std::to_string(*result.auc) + "%");
  return 0;
}

void cmd_explain(Context& ctx, const fs::path& data, const fs::path& ckpt, const std::string& group,
                 const std::string& view_name) {
  ctx.input(ckpt);
  auto loaded = load_checkpoint(ckpt);
  const auto view = parse_view(view_name);
  if (!view) throw ValidationError("unknown view: " + view_name);
  const auto manifest = manifest_of(data);
  ctx.input(fs::is_directory(data) ? data : manifest);
  const auto groups = load_manifest(manifest);
  auto it = std::find_if(groups.begin(), groups.end(), [&](const ExampleGroup& g) { return g.id == group; });
  if (it == groups.end()) throw ValidationError("unknown group " + group);
  const std::string stem = group + "_" + view_name;
  const auto overlay_path = ctx.output(stem + "_overlay.png");
  const auto weights_path = ctx.output(stem + "_weights.json");
  const GrayImage& img = it->view(*view);
  const ModelConfig single{ViewMode::one_view, {*view}, loaded.info.config.include_nd, loaded.info.config.pretrained};
  if (loaded.info.config.mode == ViewMode::multi_view || loaded.info.config.views != single.views)
    log("note: explaining the " + loaded.info.config.name() + " model on the single view " + view_name);
  const auto params = explain_params(ctx.settings);
  const auto expl = explain(*loaded.model, img, single, loaded.info.norm, params);
  write_png(overlay_path, render_overlay(img, expl, ctx.settings.get<int>("top_k")));
  json w = weights_json(expl);
  w["group"] = group;
  w["view"] = view_name;
  write_atomic(weights_path, w.dump(2) + "\n");
  log("explained " + group + "/" + view_name + ": " + std::to_string(expl.segments.segments) + " segments, R^2 " +
      std::to_string(expl.fidelity_r2));
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  Context ctx;
  for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);

  CLI::App app{"Foam quality control: synthetic data, preprocessing, multi-view training, explanations, review"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", ctx.config_path, "Flat JSON configuration overriding the defaults");
  flag<std::uint64_t>(&app, ctx, "--seed", "seed", "Seed for every stochastic stage");
  app.add_option("--out", ctx.out, "Output directory");
  flag<int>(&app, ctx, "--jobs", "jobs", "Worker threads (default: host cores)");
  app.add_flag("--force", ctx.force, "Overwrite existing outputs");

  fs::path data, ckpt, split_path, state_dir, runs_dir, ui_dir;
  std::string group, view = "top", host = "127.0.0.1";
  std::optional<int> port;
  bool blind = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
  flag<int>(synth, ctx, "--n", "n_groups", "Number of groups");
  flag<int>(synth, ctx, "--image-size", "image_size", "Raw image side");

  auto* preprocess = app.add_subcommand("preprocess", "Circle extraction, grayscale, quantisation, resizing");
  preprocess->add_option("--data", data, "Raw dataset directory or manifest")->required();
  flag<int>(preprocess, ctx, "--size", "input_size", "Output side in pixels");

  auto* augment = app.add_subcommand("augment", "Write every augmentation combination of a processed dataset");
  augment->add_option("--data", data, "Processed dataset")->required();

  auto* split = app.add_subcommand("split", "Stratified train/test split");
  split->add_option("--data", data, "Processed dataset")->required();
  flag<double>(split, ctx, "--ratio", "train_ratio", "Train fraction");
  flag<bool>(split, ctx, "--include-nd", "include_nd", "Keep normal_defective groups (true/false)");

  auto add_model_flags = [&](CLI::App* sub) {
    flag<std::string>(sub, ctx, "--mode", "mode", "one_view or multi_view");
    sub->add_option_function<std::vector<std::string>>(
        "--views", [&ctx](const std::vector<std::string>& v) { ctx.flags["views"] = v; }, "Views, e.g. top bottom");
    flag<bool>(sub, ctx, "--include-nd", "include_nd", "Keep normal_defective groups (true/false)");
  };
  auto add_train_flags = [&](CLI::App* sub) {
    flag<int>(sub, ctx, "--epochs", "epochs", "Epochs");
    flag<int>(sub, ctx, "--batch-size", "batch_size", "Groups per batch");
    flag<double>(sub, ctx, "--lr", "learning_rate", "Learning rate");
    flag<double>(sub, ctx, "--weight-decay", "weight_decay", "L2 weight decay");
    flag<int>(sub, ctx, "--size", "input_size", "Model input side (must match the processed images)");
    flag<std::string>(sub, ctx, "--pretrained", "pretrained", "Reference network weights archive");
  };

  auto* train_cmd = app.add_subcommand("train", "Train one configuration");
  train_cmd->add_option("--data", data, "Processed dataset")->required();
  train_cmd->add_option("--split", split_path, "split.json (default: stratified split from --seed)");
  add_model_flags(train_cmd);
  add_train_flags(train_cmd);

  auto* grid = app.add_subcommand("grid", "Train all 6 configurations with and without ND groups");
  grid->add_option("--data", data, "Processed dataset")->required();
  grid->add_option_function<std::vector<std::uint64_t>>(
      "--seeds", [&ctx](const std::vector<std::uint64_t>& v) { ctx.flags["seeds"] = v; }, "Seeds (default: --seed)");
  add_train_flags(grid);

  auto* ablate = app.add_subcommand("ablate", "Data-size ablation over the grid");
  ablate->add_option("--data", data, "Processed dataset")->required();
  ablate->add_option_function<std::vector<std::uint64_t>>(
      "--seeds", [&ctx](const std::vector<std::uint64_t>& v) { ctx.flags["seeds"] = v; }, "Seeds (default: --seed)");
  flag<int>(ablate, ctx, "--removed", "removed", "Training groups removed");
  add_train_flags(ablate);

  auto* eval = app.add_subcommand("eval", "Accuracy and AUC of a checkpoint");
  eval->add_option("--data", data, "Processed dataset")->required();
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--split", split_path, "Evaluate the test side of this split");

  auto* expl = app.add_subcommand("explain", "Perturbation explanation of one view");
  expl->add_option("--data", data, "Processed dataset")->required();
  expl->add_option("--ckpt", ckpt, "Checkpoint")->required();
  expl->add_option("--group", group, "Group id")->required();
  expl->add_option("--view", view, "View (default top)");
  flag<int>(expl, ctx, "--samples", "n_samples", "Perturbation samples");
  flag<int>(expl, ctx, "--cell", "cell", "Segment grid cell in pixels");
  flag<int>(expl, ctx, "--top-k", "top_k", "Segments tinted in the overlay");

  auto* serve = app.add_subcommand("serve", "Expert review HTTP service");
  serve->add_option("--data", data, "Processed dataset")->required();
  serve->add_option("--ckpt", ckpt, "Checkpoint")->required();
  serve->add_option("--state", state_dir, "Journal/snapshot/cache directory (default: --out)");
  serve->add_option("--runs", runs_dir, "Directory holding grid.json");
  serve->add_option("--ui", ui_dir, "Static UI bundle");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (default: FOAMQC_PORT or 8080)");
  serve->add_flag("--blind", blind, "Hide predictions of pending items");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    ctx.command = app.get_subcommands().front()->get_name();
    if (!ctx.config_path.empty()) {
      ctx.settings.load_file(ctx.config_path);
      ctx.input(ctx.config_path);
    }
    for (const auto& [key, value] : ctx.flags.items()) ctx.settings.set(key, value);
    if (ctx.settings.get<int>("jobs") < 1) throw ValidationError("jobs must be >= 1");

    int code = 0;
    if (ctx.command == "serve") {
      ReviewOptions opts;
      opts.dataset = data;
      opts.checkpoint = ckpt;
      opts.state_dir = state_dir.empty() ? ctx.out : state_dir;
      if (opts.state_dir.empty()) throw ValidationError("serve needs --state or --out");
      opts.runs_dir = runs_dir;
      opts.ui_dir = ui_dir;
      opts.blind = blind;
      opts.explain = explain_params(ctx.settings);
      ReviewService service(opts);
      HttpServer server(service);
      const int p = port ? *port : review_port_from_env();
      service.warm_up_async();
      log("serving on http://" + host + ":" + std::to_string(p));
      server.listen(host, p);
      return 0;
    }
    if (ctx.out.empty()) throw ValidationError("--out is required");
    if (ctx.command == "synth") cmd_synth(ctx);
    if (ctx.command == "preprocess") cmd_preprocess(ctx, data);
    if (ctx.command == "augment") cmd_augment(ctx, data);
    if (ctx.command == "split") cmd_split(ctx, data);
    if (ctx.command == "train") cmd_train(ctx, data, split_path);
    if (ctx.command == "grid") cmd_grid(ctx, data);
    if (ctx.command == "ablate") cmd_ablate(ctx, data);
    if (ctx.command == "eval") code = cmd_eval(ctx, data, ckpt, split_path);
    if (ctx.command == "explain") cmd_explain(ctx, data, ckpt, group, view);
    ctx.write_manifest();
    return code;
  } catch (const ValidationError& e) {
    log(std::string("error: ") + e.what());
    return 1;
  } catch (const std::exception& e) {
    log(std::string("internal error: ") + e.what());
    return 2;
  }
}

}  // namespace foamqc
