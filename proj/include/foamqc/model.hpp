#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "foamqc/dataset.hpp"
#include "foamqc/nn.hpp"

namespace foamqc {

// ---------------------------------------------------------------------------
// Architecture arithmetic

// Learnable parameters of a basic-block residual network: 7x7 stem with
// batch norm, then stages of two-conv basic blocks; the first block of every
// stage after the first downsamples with a 1x1 projection + batch norm.
constexpr long long residual_parameter_count(int in_channels, const int* blocks, const int* widths, int stages) {
  long long total = 7LL * 7 * in_channels * widths[0] + 2LL * widths[0];
  int prev = widths[0];
  for (int s = 0; s < stages; ++s) {
    const long long w = widths[s];
    for (int b = 0; b < blocks[s]; ++b) {
      const long long cin = b == 0 ? prev : w;
      total += 9 * cin * w + 2 * w + 9 * w * w + 2 * w;
      if (b == 0 && cin != w) total += cin * w + 2 * w;
    }
    prev = widths[s];
  }
  return total;
}

constexpr long long linear_parameter_count(long long in, long long out) { return in * out + out; }

inline constexpr int kStageBlocks[] = {3, 4, 6, 3};
inline constexpr int kStageWidths[] = {64, 128, 256, 512};
inline constexpr int kEmbeddingSize = 128;

// Stem + first two stages of the 34-layer network with a 1-channel stem.
inline constexpr long long kBackboneParameters = residual_parameter_count(1, kStageBlocks, kStageWidths, 2);
inline constexpr long long kModelParameters = kBackboneParameters + linear_parameter_count(kEmbeddingSize, 2);
// Untruncated 3-channel network with its 1000-way classifier, followed by a
// 1000 -> 2 binary head.
inline constexpr long long kReferenceParameters = residual_parameter_count(3, kStageBlocks, kStageWidths, 4) +
                                                  linear_parameter_count(512, 1000) + linear_parameter_count(1000, 2);

static_assert(kBackboneParameters == 1'341'632);
static_assert(kModelParameters == 1'341'890);
static_assert(kReferenceParameters == 21'799'674);

// ---------------------------------------------------------------------------
// Configurations

enum class ViewMode { one_view, multi_view };

struct ModelConfig {
  ViewMode mode = ViewMode::multi_view;
  std::vector<ViewKind> views{ViewKind::top, ViewKind::bottom};
  bool include_nd = true;
  bool pretrained = false;

  // Short name as used in the result tables, e.g. "MV Top-Bottom".
  std::string name() const;
  // One of the six learning configurations.
  bool is_standard() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The six (mode, views) pairs in table order: OV Top, OV Bottom,
// OV Top-Bottom, MV Top-Bottom, MV Profiles, MV Full Group.
std::vector<ModelConfig> standard_configs(bool include_nd);

std::string_view to_string(ViewMode m);

// Per-image input normalisation: x = (v / 255 - mean) / std.
struct Normalization {
  double mean = 0.3;
  double std = 0.25;
};

struct BackboneSpec {
  int input_channels = 1;
  int input_size = 224;  // square side; the layout is size independent
};

// ---------------------------------------------------------------------------
// Network

template <typename Scalar>
class BasicBlock {
 public:
  BasicBlock(const std::string& name, int in, int out, int stride)
      : conv1(name + ".conv1", in, out, 3, stride, 1), bn1(name + ".bn1", out), conv2(name + ".conv2", out, out, 3, 1, 1),
        bn2(name + ".bn2", out) {
    if (stride != 1 || in != out) {
      down_conv.emplace(name + ".downsample.0", in, out, 1, stride, 0);
      down_bn.emplace(name + ".downsample.1", out);
    }
  }

  void init(std::mt19937_64& rng) {
    conv1.init(rng);
    conv2.init(rng);
    if (down_conv) down_conv->init(rng);
  }

  nn::Tensor<Scalar> forward(const nn::Tensor<Scalar>& x, nn::Mode mode) {
    auto y = relu1.forward(bn1.forward(conv1.forward(x, mode), mode), mode);
    y = bn2.forward(conv2.forward(y, mode), mode);
    if (down_conv)
      y.data += down_bn->forward(down_conv->forward(x, mode), mode).data;
    else
      y.data += x.data;
    return relu2.forward(y, mode);
  }

  nn::Tensor<Scalar> backward(const nn::Tensor<Scalar>& dy) {
    const auto d_sum = relu2.backward(dy);
    auto dx = conv1.backward(bn1.backward(relu1.backward(conv2.backward(bn2.backward(d_sum)))));
    if (down_conv)
      dx.data += down_conv->backward(down_bn->backward(d_sum)).data;
    else
      dx.data += d_sum.data;
    return dx;
  }

  void release() {
    conv1.release(), conv2.release(), bn1.release(), bn2.release(), relu1.release(), relu2.release();
    if (down_conv) down_conv->release(), down_bn->release();
  }

  void collect(std::vector<nn::Param<Scalar>*>& out) {
    out.insert(out.end(), {&conv1.weight, &bn1.gamma, &bn1.beta, &bn1.running_mean, &bn1.running_var, &conv2.weight,
                           &bn2.gamma, &bn2.beta, &bn2.running_mean, &bn2.running_var});
    if (down_conv)
      out.insert(out.end(), {&down_conv->weight, &down_bn->gamma, &down_bn->beta, &down_bn->running_mean,
                             &down_bn->running_var});
  }

  nn::Conv2d<Scalar> conv1;
  nn::BatchNorm2d<Scalar> bn1;
  nn::ReLU<Scalar> relu1;
  nn::Conv2d<Scalar> conv2;
  nn::BatchNorm2d<Scalar> bn2;
  nn::ReLU<Scalar> relu2;
  std::optional<nn::Conv2d<Scalar>> down_conv;
  std::optional<nn::BatchNorm2d<Scalar>> down_bn;
};

// Truncated residual backbone: 1-channel 7x7 stem, max pool, 3 blocks at 64
// channels, 4 blocks at 128 channels, global average pool -> 128-d embedding.
template <typename Scalar>
class Backbone {
 public:
  explicit Backbone(BackboneSpec spec = {}) : spec_(spec), conv1("conv1", spec.input_channels, 64, 7, 2, 3), bn1("bn1", 64) {
    for (int b = 0; b < kStageBlocks[0]; ++b) layer1.emplace_back("layer1." + std::to_string(b), 64, 64, 1);
    for (int b = 0; b < kStageBlocks[1]; ++b)
      layer2.emplace_back("layer2." + std::to_string(b), b == 0 ? 64 : 128, 128, b == 0 ? 2 : 1);
  }

  void init(std::mt19937_64& rng) {
    conv1.init(rng);
    for (auto& b : layer1) b.init(rng);
    for (auto& b : layer2) b.init(rng);
  }

  const BackboneSpec& spec() const { return spec_; }

  // x: 1 x (N*S*S) with S = input_size. Returns 128 x N embeddings.
  nn::Mat<Scalar> forward(const nn::Tensor<Scalar>& x, nn::Mode mode) {
    if (x.channels() != spec_.input_channels || x.h != spec_.input_size || x.w != spec_.input_size)
      throw ShapeError("backbone expects " + std::to_string(spec_.input_channels) + "x" +
                       std::to_string(spec_.input_size) + "x" + std::to_string(spec_.input_size) + " inputs, got " +
                       std::to_string(x.channels()) + "x" + std::to_string(x.h) + "x" + std::to_string(x.w));
    auto y = pool.forward(relu1.forward(bn1.forward(conv1.forward(x, mode), mode), mode), mode);
    for (auto& b : layer1) y = b.forward(y, mode);
    for (auto& b : layer2) y = b.forward(y, mode);
    last_n_ = y.n, last_h_ = y.h, last_w_ = y.w;
    return nn::global_average_pool(y);
  }

  void backward(const nn::Mat<Scalar>& d_embedding) {
    auto d = nn::global_average_pool_backward(d_embedding, last_n_, last_h_, last_w_);
    for (auto it = layer2.rbegin(); it != layer2.rend(); ++it) d = it->backward(d);
    for (auto it = layer1.rbegin(); it != layer1.rend(); ++it) d = it->backward(d);
    conv1.backward(bn1.backward(relu1.backward(pool.backward(d))), false);
  }

  void release() {
    conv1.release(), bn1.release(), relu1.release(), pool.release();
    for (auto& b : layer1) b.release();
    for (auto& b : layer2) b.release();
  }

  void collect(std::vector<nn::Param<Scalar>*>& out) {
    out.insert(out.end(), {&conv1.weight, &bn1.gamma, &bn1.beta, &bn1.running_mean, &bn1.running_var});
    for (auto& b : layer1) b.collect(out);
    for (auto& b : layer2) b.collect(out);
  }

 private:
  BackboneSpec spec_;

 public:
  nn::Conv2d<Scalar> conv1;
  nn::BatchNorm2d<Scalar> bn1;
  nn::ReLU<Scalar> relu1;
  nn::MaxPool<Scalar> pool;
  std::vector<BasicBlock<Scalar>> layer1, layer2;

 private:
  int last_n_ = 0, last_h_ = 0, last_w_ = 0;
};

// Element-wise maximum over views. `embeddings` holds samples * views
// columns, sample-major (column s * views + v). Ties go to the lowest view
// index. argmax (optional) receives the winning view per coordinate.
template <typename Scalar>
nn::Mat<Scalar> view_pool(const nn::Mat<Scalar>& embeddings, int views,
                          Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>* argmax = nullptr) {
  if (views < 1 || embeddings.cols() % views != 0) throw ValidationError("view_pool needs at least one view per sample");
  const Eigen::Index samples = embeddings.cols() / views;
  nn::Mat<Scalar> out = embeddings(Eigen::all, Eigen::seqN(0, samples, views));
  if (argmax) argmax->setZero(embeddings.rows(), samples);
  for (Eigen::Index s = 0; s < samples; ++s)
    for (int v = 1; v < views; ++v) {
      const auto col = embeddings.col(s * views + v);
      for (Eigen::Index c = 0; c < embeddings.rows(); ++c)
        if (col(c) > out(c, s)) {
          out(c, s) = col(c);
          if (argmax) (*argmax)(c, s) = v;
        }
    }
  return out;
}

// Shared backbone + view pooling + 128 -> 2 linear head (normal, defective).
template <typename Scalar>
class Classifier {
 public:
  explicit Classifier(BackboneSpec spec = {}, std::uint64_t seed = 0) : backbone(spec), head("head", kEmbeddingSize, 2) {
    std::mt19937_64 rng(seed);
    backbone.init(rng);
    head.init(rng);
    if (parameter_count() != kModelParameters) throw Error("model parameter count does not match the architecture");
  }

  // input holds samples * views images, sample-major. Returns 2 x samples logits.
  nn::Mat<Scalar> forward(const nn::Tensor<Scalar>& input, int views, nn::Mode mode) {
    const nn::Mat<Scalar> emb = backbone.forward(input, mode);
    views_ = views;
    const nn::Mat<Scalar> pooled = view_pool<Scalar>(emb, views, mode == nn::Mode::train ? &argmax_ : nullptr);
    return head.forward(pooled, mode);
  }

  // Gradient flows to the arg-max view of every embedding coordinate.
  void backward(const nn::Mat<Scalar>& d_logits) {
    const nn::Mat<Scalar> d_pooled = head.backward(d_logits);
    nn::Mat<Scalar> d_emb = nn::Mat<Scalar>::Zero(d_pooled.rows(), d_pooled.cols() * views_);
    for (Eigen::Index s = 0; s < d_pooled.cols(); ++s)
      for (Eigen::Index c = 0; c < d_pooled.rows(); ++c) d_emb(c, s * views_ + argmax_(c, s)) = d_pooled(c, s);
    last_d_embedding_ = d_emb;
    backbone.backward(d_emb);
  }

  void release() { backbone.release(); }

  // Gradient w.r.t. the per-view embeddings from the last backward call.
  const nn::Mat<Scalar>& last_embedding_grad() const { return last_d_embedding_; }

  std::vector<nn::Param<Scalar>*> params() {
    std::vector<nn::Param<Scalar>*> out;
    backbone.collect(out);
    out.insert(out.end(), {&head.weight, &head.bias});
    return out;
  }

  long long parameter_count() {
    long long n = 0;
    for (auto* p : params())
      if (p->trainable) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.setZero();
  }

  Backbone<Scalar> backbone;
  nn::Linear<Scalar> head;

 private:
  int views_ = 1;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> argmax_;
  nn::Mat<Scalar> last_d_embedding_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class Classifier<float>;
extern template class Classifier<double>;

using Model = Classifier<float>;

// Canonical "name:rows x cols;" description of every parameter and buffer.
template <typename Scalar>
std::string architecture_string(Classifier<Scalar>& model);
// FNV-1a of architecture_string, hex.
template <typename Scalar>
std::string architecture_hash(Classifier<Scalar>& model);

// ---------------------------------------------------------------------------
// Inputs

// Scales 0..255 to [0, 1] and standardises.
template <typename Scalar>
void write_image(nn::Tensor<Scalar>& t, int index, const GrayImage& img, const Normalization& norm) {
  if (img.height() != t.h || img.width() != t.w)
    throw ShapeError("image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) + ", model input is " +
                     std::to_string(t.h) + "x" + std::to_string(t.w));
  const Scalar scale = static_cast<Scalar>(1.0 / (255.0 * norm.std));
  const Scalar shift = static_cast<Scalar>(norm.mean / norm.std);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x) t.data(0, t.column(index, y, x)) = static_cast<Scalar>(img(y, x)) * scale - shift;
}

template <typename Scalar>
nn::Tensor<Scalar> make_input(const std::vector<const GrayImage*>& images, int size, const Normalization& norm) {
  nn::Tensor<Scalar> t(1, static_cast<int>(images.size()), size, size);
  for (std::size_t i = 0; i < images.size(); ++i) write_image(t, static_cast<int>(i), *images[i], norm);
  return t;
}

// Eval-mode embedding of one image.
nn::Vec<float> embed_view(Model& model, const GrayImage& img, const Normalization& norm);

// Group logits (normal, defective) under a configuration; every view of a
// multi-view group is embedded separately so results do not depend on view
// order. One-view with several views returns the per-image logits with the
// highest defective probability.
Eigen::Vector2f classify_group(Model& model, const ExampleGroup& g, const ModelConfig& cfg, const Normalization& norm);

// Logits for an explicit ordered list of views (multi-view pooling).
Eigen::Vector2f classify_views(Model& model, const std::vector<const GrayImage*>& views, const Normalization& norm);

Eigen::Vector2f softmax(const Eigen::Vector2f& logits);

}  // namespace foamqc
