#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "foamqc/synthgen.hpp"
#include "foamqc/trainer.hpp"
#include "test_util.hpp"

using namespace foamqc;

namespace {

double brute_force_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

std::vector<ExampleGroup> small_dataset(int n, int size, std::uint64_t seed) {
  SynthParams p;
  p.n_groups = n;
  p.seed = seed;
  p.image_size = 96;
  std::vector<ExampleGroup> out;
  for (auto& s : generate(p)) out.push_back(preprocess_group(s.group, {}, Size2{size, size}));
  return out;
}

TrainConfig tiny_config(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.input_size = 32;
  t.batch_size = 4;
  t.learning_rate = 1e-3;
  return t;
}

}  // namespace

TEST_CASE("roc_auc matches pair enumeration on random score sets with ties") {
  std::mt19937_64 rng(42);
  int checked = 0;
  while (checked < 1000) {
    const int n = std::uniform_int_distribution<int>(2, 200)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 50)(rng);
    const bool tied = checked % 2 == 0;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = tied ? std::uniform_int_distribution<int>(0, levels)(rng) / double(levels)
                  : std::uniform_real_distribution<double>(0, 1)(rng);
      y[i] = std::bernoulli_distribution(0.4)(rng);
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    CHECK(std::abs(roc_auc(s, y) - brute_force_auc(s, y)) <= 1e-9);
    ++checked;
  }
}

TEST_CASE("roc_auc examples") {
  CHECK(roc_auc({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == doctest::Approx(0.5));
  CHECK(roc_auc({0.8, 0.3, 0.5, 0.1}, {1, 1, 0, 0}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), ValidationError);
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {0, 0}), ValidationError);
}

TEST_CASE("TrainConfig validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = {};
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ParameterError);
  t = {};
  CHECK(t.epochs == 100);
  CHECK(t.batch_size == 8);
  CHECK(t.learning_rate == 1e-4);
  CHECK(t.weight_decay == 1e-4);
}

TEST_CASE("Adam step on a quadratic") {
  nn::Param<float> p("w", 2, 1);
  p.value << 1.0f, -2.0f;
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0;
  Adam adam({&p}, cfg);
  p.grad = 2 * p.value;
  adam.step();
  // the first step moves each coordinate by lr against the gradient sign
  CHECK(p.value(0) == doctest::Approx(0.9f).epsilon(1e-5));
  CHECK(p.value(1) == doctest::Approx(-1.9f).epsilon(1e-5));
  for (int i = 0; i < 300; ++i) {
    p.grad = 2 * p.value;
    adam.step();
  }
  CHECK(p.value.norm() < 0.1f);
}

TEST_CASE("compute_normalization uses the configured views") {
  std::mt19937_64 rng(1);
  auto g = testing::random_group("a", 8, rng);
  g.images[ViewKind::top] = GrayImage(PixelMatrix::Constant(8, 8, 0), ViewKind::top);
  g.images[ViewKind::bottom] = GrayImage(PixelMatrix::Constant(8, 8, 255), ViewKind::bottom);
  const auto n = compute_normalization({&g}, ModelConfig{ViewMode::multi_view, {ViewKind::top, ViewKind::bottom}});
  CHECK(n.mean == doctest::Approx(0.5));
  CHECK(n.std == doctest::Approx(0.5));
  const auto flat = compute_normalization({&g}, ModelConfig{ViewMode::one_view, {ViewKind::top}});
  CHECK(flat.mean == 0.3);
  CHECK(flat.std == 0.25);
}

TEST_CASE("train: one epoch, determinism, selection invariant") {
  const auto groups = small_dataset(18, 32, 3);
  const auto split = stratified_split(groups, 0.7, true, 5);
  const ModelConfig cfg{ViewMode::multi_view, {ViewKind::top, ViewKind::bottom}, true};

  Model a(BackboneSpec{1, 32}, 9);
  const auto r1 = train(a, groups, split, cfg, tiny_config(1));
  CHECK(r1.epochs.size() == 1);
  CHECK(r1.selected_epoch == 0);

  Model b(BackboneSpec{1, 32}, 9), c(BackboneSpec{1, 32}, 9);
  const auto r2 = train(b, groups, split, cfg, tiny_config(3));
  const auto r3 = train(c, groups, split, cfg, tiny_config(3));
  REQUIRE(r2.epochs.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(r2.epochs[e].train_loss == r3.epochs[e].train_loss);
    CHECK(r2.epochs[e].test_loss == r3.epochs[e].test_loss);
  }
  int argmin = 0;
  for (int e = 1; e < 3; ++e)
    if (r2.epochs[e].test_loss < r2.epochs[argmin].test_loss) argmin = e;
  CHECK(r2.selected_epoch == argmin);
  CHECK(r2.accuracy_at_min_loss == r2.epochs[argmin].test_acc);

  // the model keeps the selected epoch's weights
  std::vector<const ExampleGroup*> test;
  for (const auto& g : groups)
    if (std::find(split.test.begin(), split.test.end(), g.id) != split.test.end()) test.push_back(&g);
  const auto eval = evaluate(b, test, cfg, r2.norm);
  CHECK(eval.loss == doctest::Approx(r2.epochs[argmin].test_loss).epsilon(1e-9));
  CHECK(eval.accuracy == r2.accuracy_at_min_loss);
}

TEST_CASE("train: errors") {
  const auto groups = small_dataset(12, 32, 4);
  const ModelConfig cfg{ViewMode::multi_view, {ViewKind::top, ViewKind::bottom}, true};
  Model m(BackboneSpec{1, 32}, 1);
  DatasetSplit empty;
  CHECK_THROWS_AS(train(m, groups, empty, cfg, tiny_config(1)), ValidationError);

  auto split = stratified_split(groups, 0.7, true, 1);
  auto no_nd = cfg;
  no_nd.include_nd = false;
  CHECK_THROWS_AS(train(m, groups, split, no_nd, tiny_config(1)), ValidationError);

  auto wrong_size = tiny_config(1);
  wrong_size.input_size = 64;
  CHECK_THROWS_AS(train(m, groups, split, cfg, wrong_size), ValidationError);

  auto diverge = tiny_config(2);
  diverge.learning_rate = 1e30;
  diverge.weight_decay = 1e30;
  CHECK_THROWS_WITH_AS(train(m, groups, split, cfg, diverge), doctest::Contains("diverged"), Error);
}

TEST_CASE("evaluate: single-class set keeps accuracy, reports AUC error") {
  const auto groups = small_dataset(12, 32, 6);
  std::vector<const ExampleGroup*> normals;
  for (const auto& g : groups)
    if (g.raw_label == RawLabel::normal) normals.push_back(&g);
  REQUIRE(!normals.empty());
  Model m(BackboneSpec{1, 32}, 2);
  const auto r = evaluate(m, normals, ModelConfig{ViewMode::one_view, {ViewKind::top}}, {});
  CHECK(!r.auc);
  CHECK(!r.auc_error.empty());
  CHECK(r.accuracy >= 0);
  CHECK(r.predictions.size() == normals.size());
}

TEST_CASE("checkpoint round trip and architecture check") {
  const auto dir = std::filesystem::temp_directory_path() / "foamqc_test_ckpt";
  std::filesystem::remove_all(dir);
  Model m(BackboneSpec{1, 32}, 11);
  CheckpointInfo info;
  info.config = ModelConfig{ViewMode::one_view, {ViewKind::top}, false};
  info.epoch = 4;
  info.input_size = 32;
  info.norm = {0.4, 0.2};
  save_checkpoint(dir / "c.bin", m, info);
  auto loaded = load_checkpoint(dir / "c.bin");
  CHECK(loaded.info.config == info.config);
  CHECK(loaded.info.epoch == 4);
  CHECK(loaded.info.norm.mean == 0.4);
  auto pa = m.params(), pb = loaded.model->params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);

  auto archive = read_archive(dir / "c.bin");
  archive.header["spec_hash"] = "0000000000000000";
  write_archive(dir / "bad.bin", archive);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("pretrained adapter sums stem channels and names mismatched layers") {
  Model m(BackboneSpec{1, 32}, 1);
  TensorArchive ref;
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd;
  for (auto* p : m.params()) {
    ArchiveTensor t;
    if (p->name == "conv1.weight") {
      t.shape = {64, 3, 7, 7};
    } else if (p->name.ends_with(".weight") && p->value.cols() > 1 && p->name.find("bn") == std::string::npos &&
               p->name.find("downsample.1") == std::string::npos && !p->name.starts_with("head")) {
      const auto k = p->name.find("downsample") != std::string::npos ? 1 : 3;
      t.shape = {p->value.rows(), p->value.cols() / (k * k), k, k};
    } else {
      t.shape = {p->value.size()};
    }
    std::int64_t n = 1;
    for (auto d : t.shape) n *= d;
    t.data.resize(static_cast<std::size_t>(n));
    for (auto& v : t.data) v = nd(rng);
    ref.tensors[p->name] = t;
  }
  ref.tensors["layer3.0.conv1.weight"] = ArchiveTensor{{256, 128, 3, 3}, std::vector<float>(256 * 128 * 9)};
  ref.tensors["fc.weight"] = ArchiveTensor{{1000, 512}, std::vector<float>(512000)};
  const Eigen::MatrixXf head_before = m.head.weight.value;
  load_pretrained(m, ref);
  CHECK(m.head.weight.value == head_before);

  const auto& stem = ref.tensors["conv1.weight"].data;
  // out 5, ky 2, kx 3: sum over the three input channels
  float sum = 0;
  for (int c = 0; c < 3; ++c) sum += stem[static_cast<std::size_t>(((5 * 3 + c) * 7 + 2) * 7 + 3)];
  CHECK(m.backbone.conv1.weight.value(5, 2 * 7 + 3) == doctest::Approx(sum));

  // layer1.0.conv1 weight [o, c, y, x] -> column (y*3 + x)*64 + c
  const auto& l1 = ref.tensors["layer1.0.conv1.weight"].data;
  CHECK(m.backbone.layer1[0].conv1.weight.value(7, (1 * 3 + 2) * 64 + 10) ==
        l1[static_cast<std::size_t>(((7 * 64 + 10) * 3 + 1) * 3 + 2)]);
  CHECK(m.backbone.bn1.running_var.value(3) == ref.tensors["bn1.running_var"].data[3]);

  ref.tensors["layer2.1.conv2.weight"].shape = {128, 64, 3, 3};
  CHECK_THROWS_WITH(load_pretrained(m, ref), doctest::Contains("layer2.1.conv2.weight"));
}

TEST_CASE("grid: twelve cells, table layout, failed cells marked") {
  const auto groups = small_dataset(21, 32, 8);
  GridOptions opts;
  opts.seeds = {1};
  const auto grid = run_grid(groups, tiny_config(1), opts);
  REQUIRE(grid.cells.size() == 12);
  for (const auto& c : grid.cells) {
    CHECK_FALSE(c.failed);
    CHECK(c.runs.size() == 1);
  }
  CHECK(grid.cells[0].config.name() == "OV Top");
  CHECK(grid.cells[0].config.include_nd);
  CHECK(grid.cells[11].config.name() == "MV Full Group");
  CHECK_FALSE(grid.cells[11].config.include_nd);

  const std::string csv = grid_csv(grid);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 11);
  CHECK(lines[0] == "metric,views,One-view +ND,One-view -ND,Multi-view +ND,Multi-view -ND");
  CHECK(lines[1].starts_with("accuracy,Top,"));
  CHECK(lines[1].ends_with(",--,--"));
  CHECK(lines[4].starts_with("accuracy,Profiles,--,--,"));
  CHECK(lines[10].starts_with("auc,Full Group,--,--,"));
  int structural = 0;
  for (const auto& l : lines)
    for (std::size_t p = l.find("--"); p != std::string::npos; p = l.find("--", p + 2)) ++structural;
  CHECK(structural == 16);  // 8 per table

  // a dataset without ND groups fails the +ND cells but finishes the grid
  std::vector<ExampleGroup> no_nd;
  for (const auto& g : groups)
    if (g.raw_label != RawLabel::normal_defective) no_nd.push_back(g);
  const auto partial = run_grid(no_nd, tiny_config(1), opts);
  int failed = 0;
  for (const auto& c : partial.cells) failed += c.failed;
  CHECK(failed == 6);
  CHECK(grid_csv(partial).find("failed") != std::string::npos);
}

TEST_CASE("ablation: removed = 0 gives exactly zero deltas; too many removed is an error") {
  const auto groups = small_dataset(15, 32, 9);
  GridOptions opts;
  opts.seeds = {2};
  const auto r = ablate_data_size(groups, tiny_config(1), opts, 0);
  for (const auto& c : r.cells) {
    CHECK_FALSE(c.failed);
    CHECK(c.accuracy_delta() == 0.0);
  }
  CHECK(r.mean_accuracy_delta == 0.0);
  CHECK_THROWS_AS(ablate_data_size(groups, tiny_config(1), opts, 500), ValidationError);
}

TEST_CASE("report JSON round trip") {
  TrainReport r;
  r.epochs = {{0.5, 60, 0.6, 55, 70}, {0.4, 70, 0.5, 65, std::nan("")}};
  r.selected_epoch = 1;
  r.accuracy_at_min_loss = 65;
  r.auc = std::nan("");
  r.split.train = {"a", "b"};
  r.split.test = {"c"};
  r.config = ModelConfig{ViewMode::one_view, {ViewKind::bottom}, false};
  const auto back = train_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  CHECK(back.epochs.size() == 2);
  CHECK(std::isnan(back.epochs[1].test_auc));
  CHECK(back.config == r.config);
  CHECK(back.split.test == r.split.test);
}

TEST_CASE("removing ND groups leaves remaining groups untouched") {
  const auto groups = small_dataset(15, 32, 10);
  const auto with = stratified_split(groups, 0.7, true, 3);
  const auto without = stratified_split(groups, 0.7, false, 3);
  CHECK(without.train.size() + without.test.size() < with.train.size() + with.test.size());
  for (const auto& id : without.train) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const ExampleGroup& g) { return g.id == id; });
    REQUIRE(it != groups.end());
    CHECK(it->raw_label != RawLabel::normal_defective);
  }
}
