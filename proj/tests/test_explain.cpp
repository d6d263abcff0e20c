#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "foamqc/explain.hpp"
#include "foamqc/synthgen.hpp"
#include "test_util.hpp"

using namespace foamqc;

namespace {

// Fraction of each segment's pixels that are still nonzero.
std::vector<double> kept_fraction(const SegmentMap& seg, const GrayImage& original, const GrayImage& img) {
  std::vector<double> kept(static_cast<std::size_t>(seg.segments), 0.0), total(kept.size(), 0.0);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      if (original(y, x) == 0) continue;
      const auto s = static_cast<std::size_t>(seg.labels(y, x));
      total[s] += 1;
      kept[s] += img(y, x) != 0;
    }
  for (std::size_t s = 0; s < kept.size(); ++s) kept[s] = total[s] > 0 ? kept[s] / total[s] : 0;
  return kept;
}

GrayImage synthetic_top(int size, std::uint64_t seed) {
  SynthParams p;
  p.n_groups = 3;
  p.image_size = 96;
  p.seed = seed;
  auto s = generate(p);
  return preprocess_group(s.front().group, {}, Size2{size, size}).view(ViewKind::top);
}

}  // namespace

TEST_CASE("segment: grid arithmetic and background") {
  const auto disc = testing::disc_image(224, 112, 112, 100, 30, 0);
  const auto seg = segment(disc, 28);
  CHECK(seg.segments <= 65);
  CHECK(seg.segments > 1);
  int misplaced = 0;
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x) misplaced += (disc(y, x) == 0) != (seg.labels(y, x) == SegmentMap::background);
  CHECK(misplaced == 0);
  // every foreground segment stays inside one tile
  std::vector<std::set<int>> tiles(static_cast<std::size_t>(seg.segments));
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x)
      if (seg.labels(y, x) != 0) tiles[static_cast<std::size_t>(seg.labels(y, x))].insert((y / 28) * 8 + x / 28);
  for (int s = 1; s < seg.segments; ++s) CHECK(tiles[static_cast<std::size_t>(s)].size() == 1);

  const GrayImage zero(PixelMatrix::Zero(224, 224), ViewKind::top);
  CHECK(segment(zero, 28).segments == 1);
  CHECK(segment(disc, 28).labels == seg.labels);
  CHECK_THROWS_AS(segment(disc, 225), ParameterError);
  CHECK_THROWS_AS(segment(disc, 0), ParameterError);
}

TEST_CASE("segment: full image gives one segment per tile") {
  const GrayImage full(PixelMatrix::Constant(224, 224, 40), ViewKind::top);
  const auto seg = segment(full, 28);
  CHECK(seg.segments == 65);
  CHECK(seg.labels(0, 0) == 1);
  CHECK(seg.labels(0, 28) == 2);
  CHECK(seg.labels(28, 0) == 9);
  CHECK(seg.labels(223, 223) == 64);
  CHECK(seg.sizes()[0] == 0);
}

TEST_CASE("explain: constant predictor has zero weights and zero R^2") {
  const auto img = testing::disc_image(64, 32, 32, 28, 30, 0);
  const ProbabilityFn constant = [](const std::vector<GrayImage>& b) { return std::vector<double>(b.size(), 0.7); };
  ExplainParams p;
  p.cell = 8;
  const auto e = explain(constant, img, p);
  for (double w : e.segment_weights) CHECK(std::abs(w) <= 1e-6);
  CHECK(e.fidelity_r2 == 0.0);
  CHECK(e.intercept == doctest::Approx(0.7));
}

TEST_CASE("explain: linear predictor coefficients are recovered") {
  const auto img = testing::disc_image(64, 32, 32, 28, 30, 0);
  ExplainParams p;
  p.cell = 16;
  const auto seg = segment(img, p.cell);
  std::mt19937_64 rng(5);
  std::vector<double> coef(static_cast<std::size_t>(seg.segments));
  for (std::size_t s = 1; s < coef.size(); ++s) coef[s] = std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
  const ProbabilityFn linear = [&](const std::vector<GrayImage>& batch) {
    std::vector<double> out;
    for (const auto& b : batch) {
      const auto k = kept_fraction(seg, img, b);
      double v = 0.2;
      for (std::size_t s = 0; s < k.size(); ++s) v += coef[s] * k[s];
      out.push_back(v);
    }
    return out;
  };
  const auto e = explain(linear, img, p);
  for (std::size_t s = 1; s < coef.size(); ++s) CHECK(std::abs(e.segment_weights[s] - coef[s]) < 1e-3);
  CHECK(e.fidelity_r2 > 0.999);
  CHECK(e.surrogate_probability == doctest::Approx(e.intercept + std::accumulate(e.segment_weights.begin(),
                                                                                  e.segment_weights.end(), 0.0)));
  CHECK(std::abs(e.surrogate_probability - e.model_probability) < 1e-3);
}

TEST_CASE("explain: deterministic, sample-count check, config check") {
  const auto img = synthetic_top(32, 3);
  Model model(BackboneSpec{1, 32}, 4);
  ExplainParams p;
  p.cell = 8;
  p.n_samples = 200;
  const ModelConfig top{ViewMode::one_view, {ViewKind::top}};
  const auto a = explain(model, img, top, {}, p);
  const auto b = explain(model, img, top, {}, p);
  CHECK(a.segment_weights == b.segment_weights);
  CHECK(a.fidelity_r2 <= 1.0);

  p.n_samples = a.segments.segments;  // S < S + 1
  CHECK_THROWS_AS(explain(model, img, top, {}, p), ValidationError);
  p.n_samples = 200;
  CHECK_THROWS_AS(explain(model, img, ModelConfig{ViewMode::multi_view, {ViewKind::top, ViewKind::bottom}}, {}, p),
                  ValidationError);
}

TEST_CASE("explain: dropping the background never moves the output more than a foreground segment") {
  Model model(BackboneSpec{1, 32}, 8);
  const auto predict = model_probability_fn(model, {});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto img = synthetic_top(32, 100 + seed);
    const auto seg = segment(img, 8);
    const double base = predict({img})[0];
    std::vector<double> change(static_cast<std::size_t>(seg.segments));
    for (int s = 0; s < seg.segments; ++s) {
      GrayImage dropped = img;
      for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
          if (seg.labels(y, x) == s) dropped(y, x) = 0;
      change[static_cast<std::size_t>(s)] = std::abs(predict({dropped})[0] - base);
    }
    for (int s = 1; s < seg.segments; ++s) CHECK(change[0] <= change[static_cast<std::size_t>(s)]);
  }
}

TEST_CASE("render_overlay") {
  const auto img = testing::disc_image(64, 32, 32, 28, 60, 0);
  Explanation e;
  e.segments = segment(img, 8);
  e.segment_weights.assign(static_cast<std::size_t>(e.segments.segments), 0.0);
  const auto plain = render_overlay(img, e);
  CHECK(plain.r == img.pixels);
  CHECK(plain.g == img.pixels);
  CHECK(plain.b == img.pixels);

  std::mt19937_64 rng(2);
  for (std::size_t s = 0; s < e.segment_weights.size(); ++s)
    e.segment_weights[s] = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (int top_k : {1, 6, 10}) {
    const auto o = render_overlay(img, e, top_k);
    std::set<int> tinted;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const bool r = o.r(y, x) != img(y, x), g = o.g(y, x) != img(y, x);
        CHECK_FALSE((r && g));
        CHECK(o.b(y, x) == img(y, x));
        if (r || g) {
          const int s = e.segments.labels(y, x);
          tinted.insert(s);
          CHECK((e.segment_weights[static_cast<std::size_t>(s)] > 0) == g);
        }
      }
    CHECK(static_cast<int>(tinted.size()) == top_k);
  }
}

TEST_CASE("weights_json keys are segment ids") {
  Explanation e;
  e.segment_weights = {0.5, -0.25};
  const auto j = weights_json(e);
  CHECK(j["weights"]["0"] == 0.5);
  CHECK(j["weights"]["1"] == -0.25);
}
