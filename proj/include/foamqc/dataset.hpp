#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "foamqc/core.hpp"
#include "foamqc/image.hpp"

namespace foamqc {

// Manual crop rectangle (rows/cols in source pixels) that overrides the
// automatic profile bounding box.
struct CropRect {
  int y = 0, x = 0, height = 0, width = 0;
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

// One foam: five views plus the expert label.
struct ExampleGroup {
  std::string id;
  std::map<ViewKind, GrayImage> images;
  std::optional<RawLabel> raw_label;
  std::map<ViewKind, std::filesystem::path> source_paths;
  std::map<ViewKind, CropRect> manual_crops;
  // Per-group problems found while loading (missing or unreadable images).
  std::vector<std::string> errors;

  bool has_view(ViewKind v) const { return images.count(v) != 0; }
  const GrayImage& view(ViewKind v) const;
  // All five views present without load errors. A group read with
  // LoadOptions::load_images = false counts its source paths instead.
  bool complete() const {
    if (!errors.empty()) return false;
    if (images.empty()) return source_paths.size() == kAllViews.size();
    return images.size() == kAllViews.size();
  }
};

struct LoadOptions {
  bool load_images = true;
};

// Reads a JSON manifest. Syntax errors throw ParseError carrying the line;
// duplicate ids throw ValidationError; missing/unreadable images are recorded
// in ExampleGroup::errors and the group is kept.
std::vector<ExampleGroup> load_manifest(const std::filesystem::path& path, LoadOptions opts = {});

// Writes a manifest whose paths are relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const std::vector<ExampleGroup>& groups);

// Complete and labeled groups, in input order.
std::vector<const ExampleGroup*> eligible_groups(const std::vector<ExampleGroup>& groups);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
  bool include_nd = true;
};

// Per-class (RawLabel) stratified split. The overall test size is
// round(N * (1 - ratio)); test seats are apportioned across classes by
// largest remainder with ties going to the lower class ordinal, so every
// class lands within one group of its ideal share. Deterministic in seed.
DatasetSplit stratified_split(const std::vector<ExampleGroup>& groups, double ratio, bool include_nd,
                              std::uint64_t seed);

// Removes `removed` groups from the train side, stratified by RawLabel in the
// same way, keeping at least one group per class. The test side is untouched.
DatasetSplit reduce_train(const DatasetSplit& split, const std::vector<ExampleGroup>& groups, int removed,
                          std::uint64_t seed);

std::map<RawLabel, int> count_by_label(const std::vector<ExampleGroup>& groups, const std::vector<std::string>& ids);

}  // namespace foamqc
