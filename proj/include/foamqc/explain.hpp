#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "foamqc/image.hpp"
#include "foamqc/model.hpp"

namespace foamqc {

// Segment 0 collects every zero (masked) pixel; segments 1..S-1 are the
// nonzero parts of the cell x cell tiles in raster order, empty tiles skipped.
struct SegmentMap {
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> labels;
  int segments = 1;
  static constexpr int background = 0;

  std::vector<long long> sizes() const;
};

SegmentMap segment(const GrayImage& img, int cell = 28);

struct ExplainParams {
  int n_samples = 1000;
  double kernel_width = 0.25;
  double ridge = 1e-3;
  int cell = 28;
  std::uint64_t seed = 0;
  int batch = 16;  // perturbed images per model call

  void validate() const;
};

struct Explanation {
  SegmentMap segments;
  std::vector<double> segment_weights;  // positive pushes toward "normal"
  double intercept = 0;
  double fidelity_r2 = 0;          // weighted R^2 of the surrogate, 0 when undefined
  double model_probability = 0;    // normal-class probability of the unperturbed image
  double surrogate_probability = 0;  // intercept + sum of weights
};

// Normal-class probability for each image of a batch.
using ProbabilityFn = std::function<std::vector<double>(const std::vector<GrayImage>&)>;

// Perturbation explanation: n_samples masks keep each segment with
// probability 1/2, dropped segments are filled with 0; a ridge-regularised
// linear surrogate is fitted with weights exp(-d^2 / width^2), d being the
// cosine distance between the mask and the all-ones mask.
Explanation explain(const ProbabilityFn& predict, const GrayImage& img, const ExplainParams& params = {});

// Single-view model prediction. cfg must be a one-view configuration with
// exactly one view.
Explanation explain(Model& model, const GrayImage& img, const ModelConfig& cfg, const Normalization& norm,
                    const ExplainParams& params = {});

ProbabilityFn model_probability_fn(Model& model, const Normalization& norm, int batch = 16);

// The top_k segments by |weight| (nonzero weights only) are tinted: green
// channel for positive weights, red for negative, alpha = |w| / max|w|.
// Everything else is the grayscale input.
RgbImage render_overlay(const GrayImage& img, const Explanation& expl, int top_k = 6);

// {"<segment id>": weight, ...} plus intercept and fidelity.
nlohmann::json weights_json(const Explanation& expl);

}  // namespace foamqc
