#include "foamqc/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace foamqc {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'Q', 'C', 'A', 'R', 'C', 'H', '1'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ValidationError("truncated archive: " + path.string());
  return value;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write archive: " + path.string());
    out.write(kMagic, sizeof kMagic);
    const std::string header = archive.header.dump();
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
    for (const auto& [name, t] : archive.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) put<std::int64_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw Error("cannot write archive: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read archive: " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw ValidationError("not a tensor archive: " + path.string());
  TensorArchive archive;
  const auto header_size = get<std::uint64_t>(in, path);
  if (header_size > (1ULL << 30)) throw ValidationError("corrupt archive header: " + path.string());
  std::string header(header_size, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_size))) throw ValidationError("truncated archive: " + path.string());
  try {
    archive.header = json::parse(header);
  } catch (const json::parse_error& e) {
    throw ValidationError("corrupt archive header: " + std::string(e.what()));
  }
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_size = get<std::uint32_t>(in, path);
    std::string name(name_size, '\0');
    if (!in.read(name.data(), name_size)) throw ValidationError("truncated archive: " + path.string());
    ArchiveTensor t;
    const auto rank = get<std::uint32_t>(in, path);
    std::int64_t elements = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(get<std::int64_t>(in, path));
      if (t.shape.back() < 0) throw ValidationError("corrupt tensor shape in " + path.string());
      elements *= t.shape.back();
    }
    t.data.resize(static_cast<std::size_t>(elements));
    if (!in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(elements * sizeof(float))))
      throw ValidationError("truncated archive: " + path.string());
    archive.tensors.emplace(std::move(name), std::move(t));
  }
  return archive;
}

json to_json(const ModelConfig& cfg) {
  json views = json::array();
  for (auto v : cfg.views) views.push_back(std::string(to_string(v)));
  return {{"mode", std::string(to_string(cfg.mode))}, {"views", views}, {"include_nd", cfg.include_nd},
          {"pretrained", cfg.pretrained}, {"name", cfg.name()}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "one_view")
    cfg.mode = ViewMode::one_view;
  else if (mode == "multi_view")
    cfg.mode = ViewMode::multi_view;
  else
    throw ValidationError("unknown view mode: " + mode);
  cfg.views.clear();
  for (const auto& v : j.at("views")) {
    auto kind = parse_view(v.get<std::string>());
    if (!kind) throw ValidationError("unknown view: " + v.dump());
    cfg.views.push_back(*kind);
  }
  cfg.include_nd = j.value("include_nd", true);
  cfg.pretrained = j.value("pretrained", false);
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointInfo& info) {
  TensorArchive archive;
  archive.header = {{"format", "foamqc-checkpoint"},
                    {"config", to_json(info.config)},
                    {"epoch", info.epoch},
                    {"metrics", info.metrics},
                    {"spec_hash", architecture_hash(model)},
                    {"input_size", model.backbone.spec().input_size},
                    {"normalization", {{"mean", info.norm.mean}, {"std", info.norm.std}}}};
  for (auto* p : model.params()) {
    ArchiveTensor t;
    t.shape = {p->value.rows(), p->value.cols()};
    t.data.resize(static_cast<std::size_t>(p->value.size()));
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), p->value.rows(),
                                                                                     p->value.cols()) = p->value;
    archive.tensors.emplace(p->name, std::move(t));
  }
  write_archive(path, archive);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  const json& h = archive.header;
  if (h.value("format", "") != "foamqc-checkpoint") throw ValidationError("not a model checkpoint: " + path.string());
  LoadedCheckpoint out;
  out.info.config = model_config_from_json(h.at("config"));
  out.info.epoch = h.value("epoch", 0);
  out.info.metrics = h.value("metrics", json::object());
  out.info.spec_hash = h.at("spec_hash").get<std::string>();
  out.info.input_size = h.value("input_size", 224);
  if (h.contains("normalization"))
    out.info.norm = Normalization{h["normalization"].at("mean").get<double>(), h["normalization"].at("std").get<double>()};
  out.model = std::make_unique<Model>(BackboneSpec{1, out.info.input_size}, 0);
  if (architecture_hash(*out.model) != out.info.spec_hash)
    throw ValidationError("checkpoint architecture hash " + out.info.spec_hash + " does not match this build (" +
                          architecture_hash(*out.model) + ")");
  for (auto* p : out.model->params()) {
    auto it = archive.tensors.find(p->name);
    if (it == archive.tensors.end()) throw ValidationError("checkpoint is missing " + p->name);
    const auto& t = it->second;
    if (t.shape.size() != 2 || t.shape[0] != p->value.rows() || t.shape[1] != p->value.cols())
      throw ValidationError("checkpoint tensor " + p->name + " has the wrong shape");
    p->value = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data.data(), p->value.rows(), p->value.cols());
  }
  return out;
}

namespace {

// PyTorch conv weight [out, in, kh, kw] -> our (out x kh*kw*in) layout,
// column (ky * k + kx) * in + c.
Eigen::MatrixXf conv_from_torch(const ArchiveTensor& t, const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                bool sum_input_channels) {
  if (t.shape.size() != 4) throw Error("pretrained layer " + name + ": expected a 4-d conv weight");
  const auto out = t.shape[0], in = t.shape[1], kh = t.shape[2], kw = t.shape[3];
  const auto in_eff = sum_input_channels ? 1 : in;
  if (kh != kw || out != rows || kh * kw * in_eff != cols)
    throw Error("pretrained layer " + name + ": shape mismatch");
  Eigen::MatrixXf w = Eigen::MatrixXf::Zero(rows, cols);
  for (std::int64_t o = 0; o < out; ++o)
    for (std::int64_t c = 0; c < in; ++c)
      for (std::int64_t y = 0; y < kh; ++y)
        for (std::int64_t x = 0; x < kw; ++x) {
          const float v = t.data[static_cast<std::size_t>(((o * in + c) * kh + y) * kw + x)];
          const auto cc = sum_input_channels ? 0 : c;
          w(o, (y * kw + x) * in_eff + cc) += v;
        }
  return w;
}

}  // namespace

void load_pretrained(Model& model, const TensorArchive& reference) {
  for (auto* p : model.params()) {
    if (p->name.starts_with("head.")) continue;
    auto it = reference.tensors.find(p->name);
    if (it == reference.tensors.end()) throw Error("pretrained weights are missing layer " + p->name);
    const ArchiveTensor& t = it->second;
    if (p->name.ends_with(".weight") && t.shape.size() == 4) {
      p->value = conv_from_torch(t, p->name, p->value.rows(), p->value.cols(), p->name == "conv1.weight");
    } else {
      if (t.shape.size() != 1 || t.shape[0] != p->value.size())
        throw Error("pretrained layer " + p->name + ": shape mismatch");
      p->value = Eigen::Map<const Eigen::VectorXf>(t.data.data(), p->value.size());
    }
  }
}

}  // namespace foamqc
