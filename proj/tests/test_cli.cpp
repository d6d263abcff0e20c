#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "foamqc/cli.hpp"
#include "foamqc/dataset.hpp"

using namespace foamqc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(std::initializer_list<std::string> args) {
  std::vector<std::string> a{"foamqc"};
  a.insert(a.end(), args);
  std::vector<const char*> argv;
  for (const auto& s : a) argv.push_back(s.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

struct Workdir {
  fs::path root;
  explicit Workdir(const std::string& name) : root(fs::temp_directory_path() / ("foamqc_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workdir() { fs::remove_all(root); }
  std::string operator/(const std::string& s) const { return (root / s).string(); }
};

}  // namespace

TEST_CASE("content_hash matches git blob hashes") {
  Workdir w("hash");
  std::ofstream(w / "hello.txt") << "hello\n";
  CHECK(content_hash(w / "hello.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
  std::ofstream(w / "empty.txt").close();
  CHECK(content_hash(w / "empty.txt") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  const auto dir_hash = content_hash(w.root);
  CHECK(dir_hash.size() == 40);
  std::ofstream(w / "empty.txt") << "x";
  CHECK(content_hash(w.root) != dir_hash);
}

TEST_CASE("usage errors exit with 1") {
  Workdir w("usage");
  CHECK(run({"frobnicate"}) == 1);
  CHECK(run({}) == 1);
  CHECK(run({"train"}) == 1);  // --data missing
  CHECK(run({"synth", "--n", "many", "--out", w / "x"}) == 1);
  CHECK(run({"synth", "--n", "0", "--out", w / "x"}) == 1);
  CHECK(run({"synth", "--out", w / "x", "--jobs", "0"}) == 1);
  std::ofstream(w / "bad.json") << R"({"epochz": 3})";
  CHECK(run({"--config", w / "bad.json", "synth", "--n", "3", "--out", w / "y"}) == 1);
  std::ofstream(w / "broken.json") << "{";
  CHECK(run({"--config", w / "broken.json", "synth", "--n", "3", "--out", w / "y"}) == 1);
  CHECK(run({"split", "--data", w / "nowhere", "--out", w / "z"}) != 0);
}

TEST_CASE("default settings are complete") {
  const auto d = default_settings();
  for (const char* key : {"seed", "jobs", "n_groups", "image_size", "input_size", "epochs", "batch_size",
                          "learning_rate", "weight_decay", "train_ratio", "include_nd", "mode", "views", "n_samples",
                          "cell", "removed"})
    CHECK_MESSAGE(d.contains(key), key);
  CHECK(d["epochs"] == 100);
  CHECK(d["batch_size"] == 8);
  CHECK(d["learning_rate"] == 1e-4);
  CHECK(d["train_ratio"] == 0.7);
  CHECK(d["input_size"] == 224);
}

TEST_CASE("pipeline: synth, preprocess, split, train, eval, explain") {
  Workdir w("pipeline");
  REQUIRE(run({"--seed", "4", "synth", "--n", "14", "--image-size", "96", "--out", w / "raw"}) == 0);
  CHECK(fs::exists(w / "raw/manifest.json"));
  // outputs are never overwritten silently
  CHECK(run({"--seed", "4", "synth", "--n", "14", "--image-size", "96", "--out", w / "raw"}) == 1);
  CHECK(run({"--seed", "4", "--force", "synth", "--n", "14", "--image-size", "96", "--out", w / "raw"}) == 0);

  REQUIRE(run({"preprocess", "--data", w / "raw", "--size", "32", "--out", w / "proc"}) == 0);
  const auto groups = load_manifest(w / "proc/manifest.json");
  REQUIRE(groups.size() == 14);
  for (const auto& g : groups) {
    CHECK(g.complete());
    CHECK(g.view(ViewKind::top).width() == 32);
  }
  const auto pm = read_json(w / "proc/run_manifest.json");
  CHECK(pm["command"] == "preprocess");
  CHECK(pm["inputs"][0]["sha1"].get<std::string>().size() == 40);
  CHECK(pm["config"]["input_size"] == 32);
  CHECK(pm["outputs"][0].get<std::string>().ends_with("manifest.json"));

  REQUIRE(run({"--seed", "2", "split", "--data", w / "proc", "--out", w / "split"}) == 0);
  const auto split = read_json(w / "split/split.json");
  CHECK(split["train"].size() + split["test"].size() == 14);

  // flags override the config file, which overrides the defaults
  std::ofstream(w / "cfg.json") << R"({"epochs": 7, "batch_size": 4, "learning_rate": 0.001, "input_size": 32})";
  for (const char* out : {"train_a", "train_b"})
    REQUIRE(run({"--config", w / "cfg.json", "train", "--data", w / "proc", "--split", w / "split/split.json",
                 "--mode", "one_view", "--views", "top", "--epochs", "2", "--out", w / out}) == 0);
  const auto report = read_json(w / "train_a/report.json");
  CHECK(report["epochs"].size() == 2);
  CHECK(report["training"]["batch_size"] == 4);
  const auto tm = read_json(w / "train_a/run_manifest.json");
  CHECK(tm["config"]["epochs"] == 2);
  CHECK(tm["config"]["batch_size"] == 4);
  CHECK(tm["config"]["weight_decay"] == 1e-4);
  CHECK(tm["inputs"].size() == 3);
  // same seed, same bytes
  CHECK(slurp(w / "train_a/report.json") == slurp(w / "train_b/report.json"));
  CHECK(slurp(w / "train_a/checkpoint.bin") == slurp(w / "train_b/checkpoint.bin"));

  REQUIRE(run({"eval", "--data", w / "proc", "--ckpt", w / "train_a/checkpoint.bin", "--out", w / "eval"}) == 0);
  const auto ev = read_json(w / "eval/eval.json");
  CHECK(ev["accuracy"].get<double>() >= 0);
  CHECK(ev["predictions"].size() == 14);

  const std::string id = groups.front().id;
  REQUIRE(run({"explain", "--data", w / "proc", "--ckpt", w / "train_a/checkpoint.bin", "--group", id, "--cell", "8",
               "--samples", "100", "--out", w / "expl"}) == 0);
  CHECK(fs::exists(w / ("expl/" + id + "_top_overlay.png")));
  const auto weights = read_json(w / ("expl/" + id + "_top_weights.json"));
  CHECK(weights["weights"].size() == weights["segments"].get<std::size_t>());
  CHECK(run({"explain", "--data", w / "proc", "--ckpt", w / "train_a/checkpoint.bin", "--group", "missing", "--out",
             w / "expl2"}) == 1);
  CHECK(run({"explain", "--data", w / "proc", "--ckpt", w / "train_a/checkpoint.bin", "--group", id, "--view",
             "side", "--out", w / "expl3"}) == 1);

  REQUIRE(run({"augment", "--data", w / "proc", "--out", w / "aug"}) == 0);
  CHECK(load_manifest(w / "aug/manifest.json", {false}).size() == 14 * 20);
}

TEST_CASE("preprocess skips groups it cannot process") {
  Workdir w("skip");
  REQUIRE(run({"synth", "--n", "4", "--image-size", "96", "--out", w / "raw"}) == 0);
  auto groups = load_manifest(w / "raw/manifest.json", {false});
  fs::remove(groups[1].source_paths.at(ViewKind::bottom));
  REQUIRE(run({"preprocess", "--data", w / "raw", "--size", "32", "--out", w / "proc"}) == 0);
  CHECK(load_manifest(w / "proc/manifest.json").size() == 3);
  const auto errors = read_json(w / "proc/preprocess_errors.json");
  REQUIRE(errors.size() == 1);
  CHECK(errors[0]["id"] == groups[1].id);
}
