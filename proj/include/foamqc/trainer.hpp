#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "foamqc/augment.hpp"
#include "foamqc/checkpoint.hpp"
#include "foamqc/dataset.hpp"
#include "foamqc/model.hpp"

namespace foamqc {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;  // groups
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool class_weights = true;  // inverse class frequency
  bool augment = true;        // one random variant per group and epoch
  AugmentSpec augmentation;
  std::uint64_t seed = 0;
  int input_size = 224;
  // Unset: mean/std of the training images.
  std::optional<Normalization> normalization;

  void validate() const;
};

// Adam with L2 weight decay added to the gradient.
class Adam {
 public:
  Adam(std::vector<nn::Param<float>*> params, const TrainConfig& cfg);
  void step();

 private:
  std::vector<nn::Param<float>*> params_;
  std::vector<nn::Mat<float>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  long long t_ = 0;
};

struct EpochMetrics {
  double train_loss = 0;
  double train_acc = 0;  // percent
  double test_loss = 0;
  double test_acc = 0;   // percent
  double test_auc = 0;   // percent, NaN if undefined
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  int selected_epoch = 0;
  double accuracy_at_min_loss = 0;  // percent
  double auc = 0;                   // percent
  ModelConfig config;
  TrainConfig training;
  DatasetSplit split;
  Normalization norm;
  std::uint64_t seed = 0;
  double seconds = 0;
  // Defective probability per test group at the selected epoch.
  std::map<std::string, double> test_probabilities;
};

nlohmann::json to_json(const TrainReport& r);
TrainReport train_report_from_json(const nlohmann::json& j);

struct TrainOptions {
  std::filesystem::path checkpoint;  // written for the selected epoch when set
  std::function<void(int epoch, const EpochMetrics&)> on_epoch;
};

// Trains on the collapsed binary labels of split.train, evaluates on
// split.test after every epoch and leaves the model holding the weights of
// the epoch with the lowest test loss (first one on ties).
TrainReport train(Model& model, const std::vector<ExampleGroup>& groups, const DatasetSplit& split,
                  const ModelConfig& cfg, const TrainConfig& tcfg, const TrainOptions& opts = {});

// Mean/std of the 0..1 pixel values of the configuration's views.
Normalization compute_normalization(const std::vector<const ExampleGroup*>& groups, const ModelConfig& cfg);

// Probability that a random (positive, negative) pair is ordered correctly,
// ties counting one half; computed from average ranks. Throws
// ValidationError when either class is absent.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct GroupPrediction {
  std::string id;
  int label = 0;  // collapsed: 0 normal, 1 defective
  double p_defective = 0;
};

struct EvalResult {
  double accuracy = 0;  // percent
  double loss = 0;      // mean unweighted cross-entropy
  std::optional<double> auc;  // percent
  std::string auc_error;
  std::vector<GroupPrediction> predictions;
};

EvalResult evaluate(Model& model, const std::vector<const ExampleGroup*>& groups, const ModelConfig& cfg,
                    const Normalization& norm);
EvalResult evaluate(const std::filesystem::path& checkpoint, const std::vector<const ExampleGroup*>& groups,
                    const ModelConfig& cfg);

nlohmann::json to_json(const EvalResult& r);

// ---------------------------------------------------------------------------
// Experiment grid

struct GridOptions {
  std::vector<std::uint64_t> seeds{0};
  double train_ratio = 0.7;
  int jobs = 1;
  std::filesystem::path out_dir;  // per-run report.json (+ checkpoint.bin) when set
  bool save_checkpoints = true;
  const TensorArchive* pretrained = nullptr;
  std::function<void(const std::string&)> log;
};

struct GridCell {
  ModelConfig config;
  std::vector<TrainReport> runs;
  bool failed = false;
  std::string error;

  double accuracy() const;  // mean over runs
  double auc() const;
};

struct GridResult {
  std::vector<GridCell> cells;  // +ND configurations, then -ND, table order
  const GridCell* find(const std::string& name, bool include_nd) const;
};

// Run directory of one cell and seed, e.g. "mv_top_bottom_nd/seed0".
std::string run_directory(const ModelConfig& cfg, std::uint64_t seed);

// All six configurations with and without normal-defective groups. A failing
// cell is recorded and the grid carries on.
GridResult run_grid(const std::vector<ExampleGroup>& groups, const TrainConfig& tcfg, const GridOptions& opts);

// Accuracy and AUC tables, rows Top, Bottom, Top-Bottom, Profiles,
// Full Group; columns one-view/multi-view with and without ND; "--" where a
// configuration does not exist, "failed" for failed cells.
std::string grid_csv(const GridResult& grid);
nlohmann::json to_json(const GridResult& grid);

struct AblationCell {
  ModelConfig config;
  std::vector<double> accuracy_full, accuracy_reduced, auc_full, auc_reduced;
  bool failed = false;
  std::string error;

  double accuracy_delta() const;  // mean(full - reduced)
  double auc_delta() const;
};

struct AblationResult {
  int removed = 0;
  std::vector<AblationCell> cells;
  double mean_accuracy_delta = 0;  // over non-failed cells
  double mean_auc_delta = 0;
};

// Trains every grid cell on the full training split and on the split minus
// `removed` groups (stratified, same test set). removed = 0 reuses the full
// run, so every delta is exactly 0.
AblationResult ablate_data_size(const std::vector<ExampleGroup>& groups, const TrainConfig& tcfg,
                                const GridOptions& opts, int removed = 20);

nlohmann::json to_json(const AblationResult& r);

}  // namespace foamqc
