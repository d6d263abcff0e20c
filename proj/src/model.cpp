#include "foamqc/model.hpp"

#include <cstdio>
#include <sstream>

#include "foamqc/rng.hpp"

namespace foamqc {

template class Backbone<float>;
template class Backbone<double>;
template class Classifier<float>;
template class Classifier<double>;

std::string_view to_string(ViewMode m) { return m == ViewMode::one_view ? "one_view" : "multi_view"; }

namespace {

bool same_views(const std::vector<ViewKind>& a, std::vector<ViewKind> b) {
  auto sa = a;
  std::sort(sa.begin(), sa.end());
  std::sort(b.begin(), b.end());
  return sa == b;
}

const std::vector<ViewKind> kTopBottom{ViewKind::top, ViewKind::bottom};
const std::vector<ViewKind> kProfiles{ViewKind::profile_1, ViewKind::profile_2, ViewKind::profile_3};
const std::vector<ViewKind> kFull{kAllViews.begin(), kAllViews.end()};

}  // namespace

std::vector<ModelConfig> standard_configs(bool include_nd) {
  return {
      ModelConfig{ViewMode::one_view, {ViewKind::top}, include_nd, false},
      ModelConfig{ViewMode::one_view, {ViewKind::bottom}, include_nd, false},
      ModelConfig{ViewMode::one_view, kTopBottom, include_nd, false},
      ModelConfig{ViewMode::multi_view, kTopBottom, include_nd, false},
      ModelConfig{ViewMode::multi_view, kProfiles, include_nd, false},
      ModelConfig{ViewMode::multi_view, kFull, include_nd, false},
  };
}

bool ModelConfig::is_standard() const {
  for (const auto& c : standard_configs(include_nd))
    if (c.mode == mode && same_views(c.views, views)) return true;
  return false;
}

std::string ModelConfig::name() const {
  std::string views_name;
  if (same_views(views, {ViewKind::top}))
    views_name = "Top";
  else if (same_views(views, {ViewKind::bottom}))
    views_name = "Bottom";
  else if (same_views(views, kTopBottom))
    views_name = "Top-Bottom";
  else if (same_views(views, kProfiles))
    views_name = "Profiles";
  else if (same_views(views, kFull))
    views_name = "Full Group";
  else
    for (auto v : views) views_name += (views_name.empty() ? "" : "+") + std::string(to_string(v));
  return std::string(mode == ViewMode::one_view ? "OV " : "MV ") + views_name;
}

template <typename Scalar>
std::string architecture_string(Classifier<Scalar>& model) {
  std::ostringstream out;
  for (auto* p : model.params()) out << p->name << ':' << p->value.rows() << 'x' << p->value.cols() << ';';
  return out.str();
}

template <typename Scalar>
std::string architecture_hash(Classifier<Scalar>& model) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(architecture_string(model))));
  return buf;
}

template std::string architecture_string(Classifier<float>&);
template std::string architecture_string(Classifier<double>&);
template std::string architecture_hash(Classifier<float>&);
template std::string architecture_hash(Classifier<double>&);

nn::Vec<float> embed_view(Model& model, const GrayImage& img, const Normalization& norm) {
  const int size = model.backbone.spec().input_size;
  const auto input = make_input<float>({&img}, size, norm);
  return model.backbone.forward(input, nn::Mode::eval).col(0);
}

Eigen::Vector2f softmax(const Eigen::Vector2f& logits) {
  const float m = logits.maxCoeff();
  Eigen::Vector2f e = (logits.array() - m).exp();
  return e / e.sum();
}

Eigen::Vector2f classify_views(Model& model, const std::vector<const GrayImage*>& views, const Normalization& norm) {
  if (views.empty()) throw ValidationError("classify_views needs at least one view");
  nn::Mat<float> emb(kEmbeddingSize, static_cast<Eigen::Index>(views.size()));
  for (std::size_t v = 0; v < views.size(); ++v) emb.col(static_cast<Eigen::Index>(v)) = embed_view(model, *views[v], norm);
  const nn::Mat<float> pooled = view_pool<float>(emb, static_cast<int>(views.size()));
  return model.head.forward(pooled, nn::Mode::eval).col(0);
}

Eigen::Vector2f classify_group(Model& model, const ExampleGroup& g, const ModelConfig& cfg, const Normalization& norm) {
  if (cfg.views.empty()) throw ValidationError("configuration has no views");
  for (auto v : cfg.views)
    if (!g.has_view(v)) throw ValidationError("group " + g.id + " is missing view " + std::string(to_string(v)));
  if (cfg.mode == ViewMode::multi_view) {
    std::vector<const GrayImage*> views;
    for (auto v : cfg.views) views.push_back(&g.view(v));
    return classify_views(model, views, norm);
  }
  Eigen::Vector2f best;
  float best_p = -1.0f;
  for (auto v : cfg.views) {
    const Eigen::Vector2f logits = classify_views(model, {&g.view(v)}, norm);
    const float p = softmax(logits)(1);
    if (p > best_p) best = logits, best_p = p;
  }
  return best;
}

}  // namespace foamqc
