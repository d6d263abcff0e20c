#include "foamqc/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include <Eigen/Cholesky>

#include "foamqc/rng.hpp"

namespace foamqc {

std::vector<long long> SegmentMap::sizes() const {
  std::vector<long long> out(static_cast<std::size_t>(segments), 0);
  for (Eigen::Index i = 0; i < labels.size(); ++i) ++out[static_cast<std::size_t>(labels.data()[i])];
  return out;
}

SegmentMap segment(const GrayImage& img, int cell) {
  if (cell < 1) throw ParameterError("segment cell must be >= 1");
  if (cell > img.height() || cell > img.width())
    throw ParameterError("segment cell " + std::to_string(cell) + " exceeds the image size " +
                         std::to_string(img.height()) + "x" + std::to_string(img.width()));
  SegmentMap map;
  map.labels.setZero(img.height(), img.width());
  const int rows = (img.height() + cell - 1) / cell, cols = (img.width() + cell - 1) / cell;
  int next = 1;
  for (int ty = 0; ty < rows; ++ty)
    for (int tx = 0; tx < cols; ++tx) {
      bool used = false;
      for (int y = ty * cell; y < std::min(img.height(), (ty + 1) * cell); ++y)
        for (int x = tx * cell; x < std::min(img.width(), (tx + 1) * cell); ++x)
          if (img(y, x) != 0) map.labels(y, x) = next, used = true;
      if (used) ++next;
    }
  map.segments = next;
  return map;
}

void ExplainParams::validate() const {
  if (n_samples < 1) throw ParameterError("n_samples must be >= 1");
  if (!(kernel_width > 0)) throw ParameterError("kernel_width must be > 0");
  if (ridge < 0) throw ParameterError("ridge must be >= 0");
  if (cell < 1) throw ParameterError("cell must be >= 1");
  if (batch < 1) throw ParameterError("batch must be >= 1");
}

Explanation explain(const ProbabilityFn& predict, const GrayImage& img, const ExplainParams& params) {
  params.validate();
  Explanation out;
  out.segments = segment(img, params.cell);
  const int S = out.segments.segments;
  const int n = params.n_samples;
  if (n < S + 1)
    throw ValidationError("n_samples = " + std::to_string(n) + " is too small for " + std::to_string(S) +
                          " segments (need at least " + std::to_string(S + 1) + ")");

  Rng rng(mix_seed(params.seed, 0x11fe));
  std::bernoulli_distribution keep(0.5);
  Eigen::MatrixXd Z(n, S);
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < S; ++s) Z(i, s) = keep(rng) ? 1.0 : 0.0;

  Eigen::VectorXd y(n);
  const auto& labels = out.segments.labels;
  for (int b0 = 0; b0 < n; b0 += params.batch) {
    const int b1 = std::min(n, b0 + params.batch);
    std::vector<GrayImage> batch;
    for (int i = b0; i < b1; ++i) {
      GrayImage p = img;
      for (int yy = 0; yy < img.height(); ++yy)
        for (int xx = 0; xx < img.width(); ++xx)
          if (Z(i, labels(yy, xx)) == 0.0) p(yy, xx) = 0;
      batch.push_back(std::move(p));
    }
    const auto probs = predict(batch);
    if (static_cast<int>(probs.size()) != b1 - b0) throw Error("explain: predictor returned the wrong batch size");
    for (int i = b0; i < b1; ++i) y(i) = probs[static_cast<std::size_t>(i - b0)];
  }
  out.model_probability = predict({img}).at(0);

  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) {
    const double k = Z.row(i).sum();
    const double d = 1.0 - std::sqrt(k / S);
    w(i) = std::exp(-d * d / (params.kernel_width * params.kernel_width));
  }

  Eigen::MatrixXd X(n, S + 1);
  X.col(0).setOnes();
  X.rightCols(S) = Z;
  Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  A.diagonal().tail(S).array() += params.ridge;
  const Eigen::VectorXd beta = A.ldlt().solve(X.transpose() * (w.array() * y.array()).matrix());

  out.intercept = beta(0);
  out.segment_weights.assign(beta.data() + 1, beta.data() + 1 + S);
  out.surrogate_probability = beta.sum();

  const double wsum = w.sum();
  const double ybar = w.dot(y) / wsum;
  const Eigen::VectorXd resid = y - X * beta;
  const double ss_res = (w.array() * resid.array().square()).sum();
  const double ss_tot = (w.array() * (y.array() - ybar).square()).sum();
  out.fidelity_r2 = ss_tot <= 1e-12 * wsum ? 0.0 : 1.0 - ss_res / ss_tot;
  return out;
}

ProbabilityFn model_probability_fn(Model& model, const Normalization& norm, int batch) {
  return [&model, norm, batch](const std::vector<GrayImage>& images) {
    std::vector<double> out;
    const int size = model.backbone.spec().input_size;
    for (std::size_t b0 = 0; b0 < images.size(); b0 += static_cast<std::size_t>(batch)) {
      const std::size_t b1 = std::min(images.size(), b0 + static_cast<std::size_t>(batch));
      std::vector<const GrayImage*> ptrs;
      for (std::size_t i = b0; i < b1; ++i) ptrs.push_back(&images[i]);
      const nn::Mat<float> logits = model.forward(make_input<float>(ptrs, size, norm), 1, nn::Mode::eval);
      for (Eigen::Index i = 0; i < logits.cols(); ++i) out.push_back(softmax(logits.col(i))(0));
    }
    return out;
  };
}

Explanation explain(Model& model, const GrayImage& img, const ModelConfig& cfg, const Normalization& norm,
                    const ExplainParams& params) {
  if (cfg.mode != ViewMode::one_view || cfg.views.size() != 1)
    throw ValidationError("explanations need a one-view configuration with a single view, got " + cfg.name());
  return explain(model_probability_fn(model, norm, params.batch), img, params);
}

RgbImage render_overlay(const GrayImage& img, const Explanation& expl, int top_k) {
  RgbImage out = gray_to_rgb(img);
  const auto& w = expl.segment_weights;
  std::vector<int> order;
  for (int s = 0; s < static_cast<int>(w.size()); ++s)
    if (w[static_cast<std::size_t>(s)] != 0.0) order.push_back(s);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return std::abs(w[static_cast<std::size_t>(a)]) > std::abs(w[static_cast<std::size_t>(b)]); });
  if (static_cast<int>(order.size()) > std::max(0, top_k)) order.resize(static_cast<std::size_t>(std::max(0, top_k)));
  if (order.empty()) return out;
  double max_abs = 0;
  for (double v : w) max_abs = std::max(max_abs, std::abs(v));
  std::vector<double> alpha(w.size(), 0.0);
  for (int s : order) alpha[static_cast<std::size_t>(s)] = w[static_cast<std::size_t>(s)] / max_abs;
  const auto& labels = expl.segments.labels;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double a = alpha[static_cast<std::size_t>(labels(y, x))];
      if (a == 0.0) continue;
      auto& channel = a > 0 ? out.g : out.r;
      const double v = channel(y, x);
      channel(y, x) = round_u8(v + std::abs(a) * (255.0 - v));
    }
  return out;
}

nlohmann::json weights_json(const Explanation& expl) {
  nlohmann::json weights = nlohmann::json::object();
  for (std::size_t s = 0; s < expl.segment_weights.size(); ++s) weights[std::to_string(s)] = expl.segment_weights[s];
  return {{"weights", weights},
          {"intercept", expl.intercept},
          {"fidelity_r2", expl.fidelity_r2},
          {"model_probability", expl.model_probability},
          {"surrogate_probability", expl.surrogate_probability},
          {"segments", expl.segments.segments}};
}

}  // namespace foamqc
