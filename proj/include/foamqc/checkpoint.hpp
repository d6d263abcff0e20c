#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "foamqc/model.hpp"

namespace foamqc {

// Named float tensors with shapes plus a JSON header, in one binary file:
//   "FQCARCH1" | u64 header bytes | header JSON | u32 tensor count |
//   per tensor: u32 name bytes | name | u32 rank | i64 dims[rank] | f32 data
// All integers little-endian; data row-major in the given dims.
struct ArchiveTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, ArchiveTensor> tensors;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct CheckpointInfo {
  ModelConfig config;
  int epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
  std::string spec_hash;
  int input_size = 224;
  Normalization norm;
};

// Model parameters are stored under their layer paths as rows x cols
// tensors; the header carries {config, epoch, metrics, spec_hash,
// input_size, normalization}.
void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointInfo& info);

struct LoadedCheckpoint {
  CheckpointInfo info;
  std::unique_ptr<Model> model;
};

// Rebuilds the model and refuses archives whose spec_hash differs from the
// architecture it would load into.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Copies stem, layer1 and layer2 weights from a reference 34-layer network
// archive in PyTorch layout (conv weights [out, in, kh, kw]); the 3-channel
// stem kernel is summed over input channels; layer3, layer4 and fc are
// ignored; the head keeps its fresh initialisation. Shape mismatches throw an
// Error naming the layer.
void load_pretrained(Model& model, const TensorArchive& reference);

}  // namespace foamqc
