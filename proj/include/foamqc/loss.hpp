#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "foamqc/nn.hpp"

namespace foamqc {

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;
  nn::Mat<Scalar> d_logits;  // 2 x samples
};

// Weighted 2-class cross-entropy, normalised by the total sample weight:
// L = sum_i w[y_i] * (-log softmax(z_i)[y_i]) / sum_i w[y_i].
template <typename Scalar>
LossResult<Scalar> cross_entropy(const nn::Mat<Scalar>& logits, const std::vector<int>& labels,
                                 const std::array<double, 2>& class_weights = {1.0, 1.0}) {
  LossResult<Scalar> out;
  out.d_logits = nn::Mat<Scalar>::Zero(logits.rows(), logits.cols());
  Scalar total_weight = 0;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) total_weight += static_cast<Scalar>(class_weights[labels[i]]);
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const auto z = logits.col(i);
    const Scalar m = z.maxCoeff();
    const nn::Vec<Scalar> e = (z.array() - m).exp();
    const Scalar sum = e.sum();
    const Scalar w = static_cast<Scalar>(class_weights[labels[i]]) / total_weight;
    const int y = labels[i];
    out.loss += w * (std::log(sum) + m - z(y));
    out.d_logits.col(i) = w * e / sum;
    out.d_logits(y, i) -= w;
  }
  return out;
}

}  // namespace foamqc
