#pragma once

// Dense building blocks for the truncated residual backbone.
//
// Activations are stored as a (channels x N*H*W) column-major matrix: column
// n*H*W + y*W + x holds the channel vector of pixel (y, x) of image n. A
// convolution is then one im2col + one GEMM, batch norm is row-wise, and
// global average pooling is a block mean. Everything is templated on the
// scalar so the same code trains in float and is gradient-checked in double.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "foamqc/core.hpp"

namespace foamqc::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Mode { train, eval };

template <typename Scalar>
struct Tensor {
  Mat<Scalar> data;  // channels x (n * h * w)
  int n = 0, h = 0, w = 0;

  Tensor() = default;
  Tensor(int channels, int n_, int h_, int w_) : data(channels, n_ * h_ * w_), n(n_), h(h_), w(w_) {}
  int channels() const { return static_cast<int>(data.rows()); }
  int plane() const { return h * w; }
  Eigen::Index column(int image, int y, int x) const { return static_cast<Eigen::Index>(image) * h * w + y * w + x; }
};

// A learnable tensor or a buffer (batch-norm running statistics).
template <typename Scalar>
struct Param {
  std::string name;
  Mat<Scalar> value;
  Mat<Scalar> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols, bool learnable = true)
      : name(std::move(n)), value(Mat<Scalar>::Zero(rows, cols)), grad(Mat<Scalar>::Zero(rows, cols)),
        trainable(learnable) {}
};

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad)
      : weight(name + ".weight", out_channels, static_cast<Eigen::Index>(kernel) * kernel * in_channels),
        in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad) {}

  // Kaiming normal, fan_out mode, for ReLU networks.
  void init(std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(out_) * k_ * k_));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<Scalar>(dist(rng));
  }

  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    if (x.channels() != in_) throw ShapeError(weight.name + ": expected " + std::to_string(in_) + " input channels");
    if (mode == Mode::train) input_ = x;
    Tensor<Scalar> y(out_, x.n, out_size(x.h), out_size(x.w));
    const Mat<Scalar> cols = im2col(x, y.h, y.w);
    y.data.noalias() = weight.value * cols;
    return y;
  }

  // Accumulates the weight gradient; returns the input gradient unless
  // need_input_grad is false (first layer).
  Tensor<Scalar> backward(const Tensor<Scalar>& dy, bool need_input_grad = true) {
    const Mat<Scalar> cols = im2col(input_, dy.h, dy.w);
    weight.grad.noalias() += dy.data * cols.transpose();
    Tensor<Scalar> dx;
    if (need_input_grad) {
      const Mat<Scalar> dcols = weight.value.transpose() * dy.data;
      dx = col2im(dcols, dy.h, dy.w);
    }
    return dx;
  }

  void release() { input_ = Tensor<Scalar>(); }

  Param<Scalar> weight;

 private:
  Mat<Scalar> im2col(const Tensor<Scalar>& x, int ho, int wo) const {
    Mat<Scalar> cols(weight.value.cols(), static_cast<Eigen::Index>(x.n) * ho * wo);
    for (int n = 0; n < x.n; ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index col = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              auto seg = cols.col(col).segment(static_cast<Eigen::Index>(ky * k_ + kx) * in_, in_);
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w)
                seg.setZero();
              else
                seg = x.data.col(x.column(n, iy, ix));
            }
          }
        }
    return cols;
  }

  Tensor<Scalar> col2im(const Mat<Scalar>& dcols, int ho, int wo) const {
    Tensor<Scalar> dx(in_, input_.n, input_.h, input_.w);
    dx.data.setZero();
    for (int n = 0; n < dx.n; ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index col = (static_cast<Eigen::Index>(n) * ho + oy) * wo + ox;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= dx.h) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= dx.w) continue;
              dx.data.col(dx.column(n, iy, ix)) +=
                  dcols.col(col).segment(static_cast<Eigen::Index>(ky * k_ + kx) * in_, in_);
            }
          }
        }
    return dx;
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Tensor<Scalar> input_;
};

template <typename Scalar>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels)
      : gamma(name + ".weight", channels, 1), beta(name + ".bias", channels, 1),
        running_mean(name + ".running_mean", channels, 1, false), running_var(name + ".running_var", channels, 1, false) {
    gamma.value.setOnes();
    running_var.value.setOnes();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    Tensor<Scalar> y = x;
    const auto m = x.data.cols();
    if (mode == Mode::train) {
      const Vec<Scalar> mean = x.data.rowwise().mean();
      y.data.colwise() -= mean;
      const Vec<Scalar> var = y.data.array().square().rowwise().mean();
      inv_std_ = (var.array() + eps_).rsqrt();
      y.data.array().colwise() *= inv_std_.array();
      xhat_ = y.data;
      const Scalar unbias = m > 1 ? static_cast<Scalar>(m) / static_cast<Scalar>(m - 1) : Scalar(1);
      running_mean.value = (1 - momentum_) * running_mean.value + momentum_ * mean;
      running_var.value = (1 - momentum_) * running_var.value + momentum_ * (unbias * var);
      train_mode_ = true;
    } else {
      inv_std_ = (running_var.value.array() + eps_).rsqrt();
      y.data.colwise() -= Vec<Scalar>(running_mean.value);
      y.data.array().colwise() *= inv_std_.array();
      train_mode_ = false;
    }
    y.data.array().colwise() *= gamma.value.col(0).array();
    y.data.colwise() += Vec<Scalar>(beta.value);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx = dy;
    if (!train_mode_) {
      dx.data.array().colwise() *= (gamma.value.col(0).array() * inv_std_.array());
      return dx;
    }
    const Scalar m = static_cast<Scalar>(dy.data.cols());
    const Vec<Scalar> dbeta = dy.data.rowwise().sum();
    const Vec<Scalar> dgamma = (dy.data.array() * xhat_.array()).rowwise().sum();
    beta.grad.col(0) += dbeta;
    gamma.grad.col(0) += dgamma;
    // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
    dx.data *= m;
    dx.data.colwise() -= dbeta;
    dx.data.array() -= xhat_.array().colwise() * dgamma.array();
    dx.data.array().colwise() *= (gamma.value.col(0).array() * inv_std_.array() / m);
    return dx;
  }

  void release() { xhat_.resize(0, 0); }

  Param<Scalar> gamma, beta, running_mean, running_var;

 private:
  Scalar eps_ = Scalar(1e-5);
  Scalar momentum_ = Scalar(0.1);
  Vec<Scalar> inv_std_;
  Mat<Scalar> xhat_;
  bool train_mode_ = true;
};

template <typename Scalar>
class ReLU {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    Tensor<Scalar> y = x;
    y.data = x.data.cwiseMax(Scalar(0));
    if (mode == Mode::train) output_ = y.data;
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx = dy;
    dx.data = (output_.array() > Scalar(0)).select(dy.data, Scalar(0));
    return dx;
  }
  void release() { output_.resize(0, 0); }

 private:
  Mat<Scalar> output_;
};

// 3x3 max pooling, stride 2, padding 1; padded cells never win.
template <typename Scalar>
class MaxPool {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    const int ho = (x.h + 2 - 3) / 2 + 1, wo = (x.w + 2 - 3) / 2 + 1;
    Tensor<Scalar> y(x.channels(), x.n, ho, wo);
    Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> arg(x.channels(), y.data.cols());
    for (int n = 0; n < x.n; ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index oc = y.column(n, oy, ox);
          bool first = true;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * 2 - 1 + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * 2 - 1 + kx;
              if (ix < 0 || ix >= x.w) continue;
              const Eigen::Index ic = x.column(n, iy, ix);
              if (first) {
                y.data.col(oc) = x.data.col(ic);
                arg.col(oc).setConstant(ic);
                first = false;
                continue;
              }
              for (Eigen::Index c = 0; c < x.data.rows(); ++c)
                if (x.data(c, ic) > y.data(c, oc)) {
                  y.data(c, oc) = x.data(c, ic);
                  arg(c, oc) = ic;
                }
            }
          }
        }
    if (mode == Mode::train) {
      argmax_ = std::move(arg);
      in_n_ = x.n, in_h_ = x.h, in_w_ = x.w;
    }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(dy.channels(), in_n_, in_h_, in_w_);
    dx.data.setZero();
    for (Eigen::Index col = 0; col < dy.data.cols(); ++col)
      for (Eigen::Index c = 0; c < dy.data.rows(); ++c) dx.data(c, argmax_(c, col)) += dy.data(c, col);
    return dx;
  }
  void release() { argmax_.resize(0, 0); }

 private:
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> argmax_;
  int in_n_ = 0, in_h_ = 0, in_w_ = 0;
};

// Global average pooling: (C x N*H*W) -> (C x N).
template <typename Scalar>
Mat<Scalar> global_average_pool(const Tensor<Scalar>& x) {
  Mat<Scalar> out(x.channels(), x.n);
  for (int n = 0; n < x.n; ++n)
    out.col(n) = x.data.middleCols(static_cast<Eigen::Index>(n) * x.plane(), x.plane()).rowwise().mean();
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_average_pool_backward(const Mat<Scalar>& d_out, int n, int h, int w) {
  Tensor<Scalar> dx(static_cast<int>(d_out.rows()), n, h, w);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(h * w);
  for (int i = 0; i < n; ++i)
    dx.data.middleCols(static_cast<Eigen::Index>(i) * h * w, h * w).colwise() = d_out.col(i) * scale;
  return dx;
}

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out) : weight(name + ".weight", out, in), bias(name + ".bias", out, 1) {}

  // Uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  void init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weight.value.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<Scalar>(dist(rng));
    for (Eigen::Index i = 0; i < bias.value.size(); ++i) bias.value.data()[i] = static_cast<Scalar>(dist(rng));
  }

  Mat<Scalar> forward(const Mat<Scalar>& x, Mode mode) {
    if (mode == Mode::train) input_ = x;
    Mat<Scalar> y = weight.value * x;
    y.colwise() += Vec<Scalar>(bias.value);
    return y;
  }

  Mat<Scalar> backward(const Mat<Scalar>& dy) {
    weight.grad.noalias() += dy * input_.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    return weight.value.transpose() * dy;
  }

  Param<Scalar> weight, bias;

 private:
  Mat<Scalar> input_;
};

}  // namespace foamqc::nn
