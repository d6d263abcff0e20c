#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "foamqc/dataset.hpp"
#include "foamqc/preprocess.hpp"

namespace foamqc {

struct DefectIntensity {
  int stain_min = 1, stain_max = 3;
  double stain_area_lo = 0.01, stain_area_hi = 0.03;  // fraction of disc area
  int scratch_min = 0, scratch_max = 2;
  double scratch_length_lo = 0.3, scratch_length_hi = 0.7;  // fraction of disc radius
  int scratch_width_max = 3;
  double dark_hole_prob = 0.5;
};

struct SynthParams {
  int n_groups = 200;
  int image_size = 224;
  int raw_scale = 1;  // integer nearest-neighbour upscale applied after drawing
  std::array<double, 3> class_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // normal, normal_defective, defective
  DefectIntensity defects;
  std::uint64_t seed = 0;

  void validate() const;
};

// Area of the single defect a normal_defective group receives, as a fraction
// of the disc area, stays strictly below this.
inline constexpr double kNdAreaThreshold = 0.005;

struct SynthTruth {
  std::map<ViewKind, Circle> circles;            // plan views
  std::map<ViewKind, PixelMatrix> defect_masks;  // every view, 0/1
  std::map<ViewKind, int> disc_level;            // plan views: disc gray level before noise
  RawLabel raw_label = RawLabel::normal;

  bool has_defect(ViewKind v) const;
};

struct SynthSample {
  ExampleGroup group;
  SynthTruth truth;
};

// Per-class counts by largest-remainder apportionment of n_groups over
// class_mix; labels are then shuffled over group indices.
std::array<int, 3> synth_class_counts(const SynthParams& params);

std::vector<SynthSample> generate(const SynthParams& params);

// out_dir/manifest.json, out_dir/<id>/<view>.png, out_dir/<id>/truth.json.
void write_synth_dataset(const std::filesystem::path& out_dir, std::vector<SynthSample>& samples);

SynthTruth read_truth(const std::filesystem::path& path);
void write_truth(const std::filesystem::path& path, const SynthTruth& truth);

// Run-length encoding of nonzero pixels in row-major order: [start, length, ...].
std::vector<long long> encode_rle(const PixelMatrix& mask);
PixelMatrix decode_rle(const std::vector<long long>& runs, int height, int width);
}  // namespace foamqc
