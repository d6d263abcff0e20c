#include "foamqc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "foamqc/rng.hpp"

namespace foamqc {

using nlohmann::json;

const GrayImage& ExampleGroup::view(ViewKind v) const {
  auto it = images.find(v);
  if (it == images.end())
    throw ValidationError("group " + id + " is missing view " + std::string(to_string(v)));
  return it->second;
}

namespace {

int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

std::string record_tag(std::size_t index, const std::string& id) {
  return "manifest record " + std::to_string(index) + (id.empty() ? "" : " (id " + id + ")");
}

}  // namespace

std::vector<ExampleGroup> load_manifest(const std::filesystem::path& path, LoadOptions opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read manifest: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();

  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed manifest " + path.string() + ": " + e.what(), line_of_offset(text, e.byte));
  }
  if (!doc.is_array()) throw ParseError("manifest must be a JSON array", 1);

  const auto base = path.parent_path();
  std::vector<ExampleGroup> groups;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& rec = doc[i];
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string())
      throw ValidationError(record_tag(i, "") + ": missing string field \"id\"");
    ExampleGroup g;
    g.id = rec["id"].get<std::string>();
    if (g.id.empty()) throw ValidationError(record_tag(i, "") + ": empty id");
    if (!seen.insert(g.id).second) throw ValidationError("duplicate group id: " + g.id);

    if (rec.contains("label") && !rec["label"].is_null()) {
      if (!rec["label"].is_string()) throw ValidationError(record_tag(i, g.id) + ": label must be a string");
      auto label = parse_raw_label(rec["label"].get<std::string>());
      if (!label) throw ValidationError(record_tag(i, g.id) + ": unknown label " + rec["label"].dump());
      g.raw_label = *label;
    }
    if (!rec.contains("views") || !rec["views"].is_object())
      throw ValidationError(record_tag(i, g.id) + ": missing object field \"views\"");
    for (const auto& [key, value] : rec["views"].items()) {
      auto view = parse_view(key);
      if (!view) throw ValidationError(record_tag(i, g.id) + ": unknown view " + key);
      if (!value.is_string()) throw ValidationError(record_tag(i, g.id) + ": view path must be a string");
      g.source_paths[*view] = base / value.get<std::string>();
    }
    if (rec.contains("crops")) {
      for (const auto& [key, value] : rec["crops"].items()) {
        auto view = parse_view(key);
        if (!view || !value.is_array() || value.size() != 4)
          throw ValidationError(record_tag(i, g.id) + ": crop must be view -> [y, x, height, width]");
        g.manual_crops[*view] = CropRect{value[0].get<int>(), value[1].get<int>(), value[2].get<int>(),
                                         value[3].get<int>()};
      }
    }

    for (auto v : kAllViews) {
      auto it = g.source_paths.find(v);
      if (it == g.source_paths.end()) {
        g.errors.push_back("missing view " + std::string(to_string(v)));
        continue;
      }
      if (!std::filesystem::exists(it->second)) {
        g.errors.push_back("missing image file for " + std::string(to_string(v)) + ": " + it->second.string());
        continue;
      }
      if (opts.load_images) {
        try {
          g.images[v] = read_png_gray(it->second, v);
        } catch (const std::exception& e) {
          g.errors.push_back("unreadable image for " + std::string(to_string(v)) + ": " + e.what());
        }
      }
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ExampleGroup>& groups) {
  const auto base = path.parent_path();
  json doc = json::array();
  for (const auto& g : groups) {
    json rec;
    rec["id"] = g.id;
    rec["label"] = g.raw_label ? json(std::string(to_string(*g.raw_label))) : json(nullptr);
    json views = json::object();
    for (const auto& [v, p] : g.source_paths)
      views[std::string(to_string(v))] = std::filesystem::relative(p, base.empty() ? "." : base).generic_string();
    rec["views"] = views;
    if (!g.manual_crops.empty()) {
      json crops = json::object();
      for (const auto& [v, c] : g.manual_crops)
        crops[std::string(to_string(v))] = {c.y, c.x, c.height, c.width};
      rec["crops"] = crops;
    }
    doc.push_back(rec);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << doc.dump(2) << '\n';
  if (!out) throw Error("cannot write manifest: " + path.string());
}

std::vector<const ExampleGroup*> eligible_groups(const std::vector<ExampleGroup>& groups) {
  std::vector<const ExampleGroup*> out;
  for (const auto& g : groups)
    if (g.raw_label && g.complete()) out.push_back(&g);
  return out;
}

namespace {

// Largest-remainder apportionment of `seats` over classes with ideal shares
// sizes[c] * fraction, never exceeding caps[c]. Ties go to the lower class
// index.
std::vector<int> apportion(const std::vector<int>& sizes, double fraction, int seats, const std::vector<int>& caps) {
  std::vector<int> out(sizes.size());
  std::vector<std::pair<double, int>> remainders;
  int used = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    const double ideal = sizes[c] * fraction;
    out[c] = std::min(caps[c], static_cast<int>(std::floor(ideal + 1e-9)));
    used += out[c];
    remainders.emplace_back(ideal - out[c], static_cast<int>(c));
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (std::abs(a.first - b.first) > 1e-9) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t k = 0; used < seats && k < remainders.size(); ++k) {
    const int c = remainders[k].second;
    if (out[c] < caps[c]) {
      ++out[c];
      ++used;
    }
  }
  for (std::size_t c = 0; used < seats && c < out.size(); ++c)
    while (used < seats && out[c] < caps[c]) ++out[c], ++used;
  return out;
}

void shuffle_ids(std::vector<std::string>& ids, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(ids[i - 1], ids[pick(rng)]);
  }
}

std::vector<std::string> in_input_order(const std::vector<std::string>& order, const std::set<std::string>& chosen) {
  std::vector<std::string> out;
  for (const auto& id : order)
    if (chosen.count(id)) out.push_back(id);
  return out;
}

}  // namespace

DatasetSplit stratified_split(const std::vector<ExampleGroup>& groups, double ratio, bool include_nd,
                              std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("split ratio must lie in (0, 1)");
  const std::vector<RawLabel> classes = include_nd
                                            ? std::vector{RawLabel::normal, RawLabel::normal_defective,
                                                          RawLabel::defective}
                                            : std::vector{RawLabel::normal, RawLabel::defective};
  std::vector<std::vector<std::string>> members(classes.size());
  std::vector<std::string> order;
  for (const auto& g : groups) {
    if (!g.raw_label) throw ValidationError("group " + g.id + " is unlabeled");
    if (!g.complete())
      throw ValidationError("group " + g.id + " is incomplete");
    auto it = std::find(classes.begin(), classes.end(), *g.raw_label);
    if (it == classes.end()) continue;  // normal_defective excluded
    members[static_cast<std::size_t>(it - classes.begin())].push_back(g.id);
    order.push_back(g.id);
  }
  if (include_nd && members[1].empty())
    throw ValidationError("include_nd requested but the dataset has no normal_defective groups");

  std::vector<int> sizes;
  for (const auto& m : members) sizes.push_back(static_cast<int>(m.size()));
  const int total = std::accumulate(sizes.begin(), sizes.end(), 0);
  const int test_total = static_cast<int>(std::floor(total * (1.0 - ratio) + 0.5));
  const auto test_counts = apportion(sizes, 1.0 - ratio, test_total, sizes);

  std::set<std::string> train_ids, test_ids;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto ids = members[c];
    shuffle_ids(ids, mix_seed(seed, static_cast<std::uint64_t>(classes[c])));
    for (std::size_t k = 0; k < ids.size(); ++k)
      (static_cast<int>(k) < test_counts[c] ? test_ids : train_ids).insert(ids[k]);
  }
  DatasetSplit split;
  split.train = in_input_order(order, train_ids);
  split.test = in_input_order(order, test_ids);
  split.seed = seed;
  split.include_nd = include_nd;
  return split;
}

DatasetSplit reduce_train(const DatasetSplit& split, const std::vector<ExampleGroup>& groups, int removed,
                          std::uint64_t seed) {
  if (removed < 0) throw ParameterError("removed must be non-negative");
  if (removed == 0) return split;
  if (removed >= static_cast<int>(split.train.size()))
    throw ParameterError("cannot remove " + std::to_string(removed) + " of " + std::to_string(split.train.size()) +
                         " training groups");
  std::map<std::string, RawLabel> label;
  for (const auto& g : groups)
    if (g.raw_label) label[g.id] = *g.raw_label;
  std::map<RawLabel, std::vector<std::string>> by_class;
  for (const auto& id : split.train) by_class[label.at(id)].push_back(id);

  std::vector<RawLabel> classes;
  std::vector<int> sizes, removable;
  for (const auto& [l, ids] : by_class) {
    classes.push_back(l);
    sizes.push_back(static_cast<int>(ids.size()));
    removable.push_back(static_cast<int>(ids.size()) - 1);
  }
  if (std::accumulate(removable.begin(), removable.end(), 0) < removed)
    throw ParameterError("not enough training groups to remove while keeping every class");
  const double fraction = static_cast<double>(removed) / static_cast<double>(split.train.size());
  const auto counts = apportion(sizes, fraction, removed, removable);

  std::set<std::string> dropped;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto ids = by_class[classes[c]];
    shuffle_ids(ids, mix_seed(seed, 0xab1a7eULL, static_cast<std::uint64_t>(classes[c])));
    for (int k = 0; k < counts[c]; ++k) dropped.insert(ids[static_cast<std::size_t>(k)]);
  }
  DatasetSplit out = split;
  out.train.clear();
  for (const auto& id : split.train)
    if (!dropped.count(id)) out.train.push_back(id);
  return out;
}

std::map<RawLabel, int> count_by_label(const std::vector<ExampleGroup>& groups, const std::vector<std::string>& ids) {
  std::map<std::string, RawLabel> label;
  for (const auto& g : groups)
    if (g.raw_label) label[g.id] = *g.raw_label;
  std::map<RawLabel, int> out;
  for (const auto& id : ids) ++out[label.at(id)];
  return out;
}

}  // namespace foamqc
