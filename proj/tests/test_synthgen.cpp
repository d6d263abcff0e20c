#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "foamqc/synthgen.hpp"

using namespace foamqc;
namespace fs = std::filesystem;

namespace {

SynthParams small(int n, int size, std::uint64_t seed) {
  SynthParams p;
  p.n_groups = n;
  p.image_size = size;
  p.seed = seed;
  return p;
}

long long mask_area(const PixelMatrix& m) { return (m.array() != 0).count(); }

double median(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  return v.empty() ? 0.0 : v[v.size() / 2];
}

}  // namespace

TEST_CASE("class counts and labels") {
  auto p = small(200, 32, 7);
  const auto counts = synth_class_counts(p);
  CHECK(counts[0] + counts[1] + counts[2] == 200);
  for (int c : counts) CHECK((c >= 65 && c <= 68));
  const auto samples = generate(p);
  REQUIRE(samples.size() == 200);
  std::array<int, 3> seen{};
  for (const auto& s : samples) {
    CHECK(s.group.raw_label == s.truth.raw_label);
    ++seen[static_cast<std::size_t>(*s.group.raw_label)];
  }
  CHECK(seen == counts);

  p.class_mix = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(p.validate(), ParameterError);
  p.class_mix = {1, 0, 0};
  p.n_groups = 0;
  CHECK_THROWS_AS(p.validate(), ParameterError);
}

TEST_CASE("truth masks follow the label rule") {
  auto p = small(30, 64, 3);
  p.class_mix = {1, 0, 0};
  for (const auto& s : generate(p))
    for (const auto& [v, m] : s.truth.defect_masks) CHECK(mask_area(m) == 0);

  p.class_mix = {0, 0.5, 0.5};
  for (const auto& s : generate(p)) {
    long long plan = 0, total = 0;
    int plan_views = 0;
    for (const auto& [v, m] : s.truth.defect_masks) {
      total += mask_area(m);
      if (is_plan_view(v)) {
        plan += mask_area(m);
        plan_views += mask_area(m) > 0;
      }
    }
    CHECK(total > 0);
    if (s.truth.raw_label == RawLabel::normal_defective) {
      CHECK(plan_views == 1);
      CHECK(total == plan);
      for (auto v : {ViewKind::top, ViewKind::bottom}) {
        const auto& c = s.truth.circles.at(v);
        const double disc = 3.14159265358979 * c.r * c.r;
        CHECK(mask_area(s.truth.defect_masks.at(v)) < kNdAreaThreshold * disc);
      }
    }
  }
}

TEST_CASE("defects contrast with their surroundings by at least 40 gray levels") {
  auto p = small(40, 96, 12);
  p.class_mix = {0, 0.3, 0.7};
  int defect_pixels = 0;
  for (const auto& s : generate(p))
    for (const auto& [v, m] : s.truth.defect_masks) {
      if (mask_area(m) == 0) continue;
      const auto& img = s.group.view(v).pixels;
      double background;
      if (is_plan_view(v)) {
        background = s.truth.disc_level.at(v);
      } else {
        std::vector<int> slab;
        for (int y = 0; y < img.rows(); ++y)
          for (int x = 0; x < img.cols(); ++x)
            if (!m(y, x) && img(y, x) > 100) slab.push_back(img(y, x));
        background = median(slab);
      }
      for (int y = 0; y < img.rows(); ++y)
        for (int x = 0; x < img.cols(); ++x)
          if (m(y, x)) {
            CHECK(std::abs(img(y, x) - background) >= 40);
            ++defect_pixels;
          }
    }
  CHECK(defect_pixels > 0);
}

TEST_CASE("determinism and seeds") {
  const auto a = generate(small(6, 48, 9));
  const auto b = generate(small(6, 48, 9));
  const auto c = generate(small(6, 48, 10));
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (auto v : kAllViews) {
      CHECK(a[i].group.view(v) == b[i].group.view(v));
      differs |= !(a[i].group.view(v) == c[i].group.view(v));
    }
  CHECK(differs);
}

TEST_CASE("plan views: geometry and circle recovery") {
  const auto samples = generate(small(20, 224, 1));
  int recovered = 0, total = 0;
  for (const auto& s : samples)
    for (auto v : {ViewKind::top, ViewKind::bottom}) {
      const auto& t = s.truth.circles.at(v);
      CHECK(t.r >= 0.30 * 224 - 1);
      CHECK(t.r <= 0.45 * 224 + 1);
      CHECK(std::abs(t.cx - 112) <= 11);
      CHECK(std::abs(t.cy - 112) <= 11);
      const auto& img = s.group.view(v);
      CHECK(img(0, 0) >= 180);
      CHECK(img(t.cy, t.cx) <= 60);
      const auto c = find_circle(quantize(img)).circle;
      recovered += std::abs(c.cx - t.cx) <= 2 && std::abs(c.cy - t.cy) <= 2 && std::abs(c.r - t.r) <= 2;
      ++total;
    }
  CHECK(recovered >= 0.95 * total);
}

TEST_CASE("raw upscale") {
  auto p = small(2, 40, 4);
  p.raw_scale = 3;
  const auto up = generate(p);
  p.raw_scale = 1;
  const auto base = generate(p);
  const auto& img = up[0].group.view(ViewKind::top);
  CHECK(img.height() == 120);
  CHECK(img(4, 7) == base[0].group.view(ViewKind::top)(1, 2));
  CHECK(up[0].truth.circles.at(ViewKind::top).r == 3 * base[0].truth.circles.at(ViewKind::top).r);
}

TEST_CASE("RLE and truth files round-trip; datasets load back") {
  PixelMatrix m = PixelMatrix::Zero(5, 7);
  m(0, 0) = 1;
  m(0, 1) = 1;
  m(2, 6) = 1;
  m(3, 0) = 1;
  m(4, 6) = 1;
  const auto runs = encode_rle(m);
  CHECK(runs == std::vector<long long>{0, 2, 20, 2, 34, 1});
  CHECK(decode_rle(runs, 5, 7) == m);
  CHECK_THROWS_AS(decode_rle({30, 10}, 5, 7), ValidationError);

  const fs::path dir = fs::temp_directory_path() / "foamqc_synth_io";
  fs::remove_all(dir);
  auto p = small(95, 32, 2);
  auto samples = generate(p);
  write_synth_dataset(dir, samples);
  const auto groups = load_manifest(dir / "manifest.json");
  REQUIRE(groups.size() == 95);
  std::size_t refs = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    refs += groups[i].source_paths.size();
    CHECK(groups[i].complete());
    CHECK(groups[i].raw_label == samples[i].group.raw_label);
    for (auto v : kAllViews) CHECK(groups[i].view(v).pixels == samples[i].group.view(v).pixels);
    const auto truth = read_truth(dir / groups[i].id / "truth.json");
    CHECK(truth.raw_label == samples[i].truth.raw_label);
    CHECK(truth.circles == samples[i].truth.circles);
    CHECK(truth.defect_masks == samples[i].truth.defect_masks);
  }
  CHECK(refs == 475);
  fs::remove_all(dir);
}
