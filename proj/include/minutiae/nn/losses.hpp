#ifndef MINUTIAE_NN_LOSSES_HPP_
#define MINUTIAE_NN_LOSSES_HPP_

#include "minutiae/nn/tensor.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace minutiae::nn {

template <typename Scalar>
struct LossGrad {
  double loss = 0.0;
  Tensor<Scalar> grad;
};

/// Mean softmax cross-entropy over a batch of (N, K, 1, 1) logits.
/// The gradient of the mean is (softmax - onehot) / N.
template <typename Scalar>
LossGrad<Scalar> softmax_xent(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const int n = logits.n();
  const int k = logits.c() * logits.h() * logits.w();
  require(static_cast<int>(labels.size()) == n, "softmax_xent: label count mismatch");
  require(logits.all_finite(), "softmax_xent: non-finite logits");
  LossGrad<Scalar> out{0.0, Tensor<Scalar>::zeros_like(logits)};
  for (int i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < k, "softmax_xent: label out of range");
    const auto z = logits.flat().row(i).template cast<double>();
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    out.loss += lse - z(labels[i]);
    auto g = out.grad.flat().row(i);
    for (int j = 0; j < k; ++j) {
      g(j) = static_cast<Scalar>((std::exp(z(j) - lse) - (j == labels[i] ? 1.0 : 0.0)) / n);
    }
  }
  out.loss /= n;
  return out;
}

/// Weighted binary cross-entropy on logits: sum(w * bce) / sum(w).
template <typename Scalar>
LossGrad<Scalar> sigmoid_bce(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets, const Tensor<Scalar>& weights) {
  require(logits.same_shape(targets) && logits.same_shape(weights), "sigmoid_bce: shape mismatch");
  LossGrad<Scalar> out{0.0, Tensor<Scalar>::zeros_like(logits)};
  const double total = static_cast<double>(weights.values().template cast<double>().sum());
  if (total <= 0.0) return out;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double z = logits.data()[i];
    const double t = targets.data()[i];
    const double w = weights.data()[i];
    // log(1 + exp(-|z|)) + max(z, 0) - z t
    out.loss += w * (std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * t);
    const double p = 1.0 / (1.0 + std::exp(-z));
    out.grad.data()[i] = static_cast<Scalar>(w * (p - t) / total);
  }
  out.loss /= total;
  return out;
}

/// Masked squared error: sum over samples with mask > 0 of ||pred - target||^2
/// (summed over channels), divided by the mask total. Pred/target are
/// (N, C, H, W); mask is (N, 1, H, W).
template <typename Scalar>
LossGrad<Scalar> masked_l2(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>& mask) {
  require(pred.same_shape(target), "masked_l2: shape mismatch");
  require(mask.n() == pred.n() && mask.c() == 1 && mask.h() == pred.h() && mask.w() == pred.w(),
          "masked_l2: mask shape mismatch");
  LossGrad<Scalar> out{0.0, Tensor<Scalar>::zeros_like(pred)};
  const double total = static_cast<double>(mask.values().template cast<double>().sum());
  if (total <= 0.0) return out;
  for (int n = 0; n < pred.n(); ++n) {
    for (int y = 0; y < pred.h(); ++y) {
      for (int x = 0; x < pred.w(); ++x) {
        const double m = mask(n, 0, y, x);
        if (m <= 0.0) continue;
        for (int c = 0; c < pred.c(); ++c) {
          const double d = static_cast<double>(pred(n, c, y, x)) - target(n, c, y, x);
          out.loss += m * d * d;
          out.grad(n, c, y, x) = static_cast<Scalar>(2.0 * m * d / total);
        }
      }
    }
  }
  out.loss /= total;
  return out;
}

/// Direction regression loss on (N, 2, 1, 1) predictions ordered (sin, cos)
/// against directions in degrees. Samples with mask 0 do not contribute.
template <typename Scalar>
LossGrad<Scalar> orientation_loss(const Tensor<Scalar>& pred, std::span<const double> gt_degrees,
                                  std::span<const Scalar> mask) {
  require(pred.c() * pred.h() * pred.w() == 2, "orientation_loss: expects (sin, cos) pairs");
  require(static_cast<int>(gt_degrees.size()) == pred.n() && static_cast<int>(mask.size()) == pred.n(),
          "orientation_loss: batch size mismatch");
  Tensor<Scalar> target(pred.n(), 2, 1, 1);
  Tensor<Scalar> m(pred.n(), 1, 1, 1);
  for (int i = 0; i < pred.n(); ++i) {
    const double r = gt_degrees[i] * std::numbers::pi / 180.0;
    target.data()[2 * i] = static_cast<Scalar>(std::sin(r));
    target.data()[2 * i + 1] = static_cast<Scalar>(std::cos(r));
    m.data()[i] = mask[i];
  }
  Tensor<Scalar> p(pred.n(), 2, 1, 1);
  p.values() = pred.values();
  LossGrad<Scalar> out = masked_l2(p, target, m);
  Tensor<Scalar> g = Tensor<Scalar>::zeros_like(pred);
  g.values() = out.grad.values();
  out.grad = std::move(g);
  return out;
}

/// Per-class feature centroids for the center loss.
template <typename Scalar>
class CenterBank {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  CenterBank() = default;
  CenterBank(int classes, int dim, double rate) : centers_(Matrix::Zero(classes, dim)), rate_(rate) {
    require(classes > 0 && dim > 0, "CenterBank: invalid geometry");
  }

  int classes() const { return static_cast<int>(centers_.rows()); }
  int dim() const { return static_cast<int>(centers_.cols()); }
  double rate() const { return rate_; }
  const Matrix& centers() const { return centers_; }
  Matrix& centers() { return centers_; }

  /// c_j <- c_j - rate * delta_j
  void apply(const Matrix& delta) { centers_ -= static_cast<Scalar>(rate_) * delta; }

 private:
  Matrix centers_;
  double rate_ = 0.5;
};

template <typename Scalar>
struct CenterLossResult {
  double loss = 0.0;
  Tensor<Scalar> grad;
  /// delta_j = sum_{i: y_i = j} (c_j - f_i) / n_j, zero for absent classes.
  typename CenterBank<Scalar>::Matrix center_delta;
};

/// loss = 1/2 * mean_i ||f_i - c_{y_i}||^2 over (N, D, 1, 1) features.
template <typename Scalar>
CenterLossResult<Scalar> center_loss(const Tensor<Scalar>& features, std::span<const int> labels,
                                     const CenterBank<Scalar>& bank) {
  const int n = features.n();
  const int d = features.c() * features.h() * features.w();
  require(d == bank.dim(), "center_loss: feature dimension mismatch");
  require(static_cast<int>(labels.size()) == n, "center_loss: label count mismatch");
  CenterLossResult<Scalar> out{0.0, Tensor<Scalar>::zeros_like(features),
                               CenterBank<Scalar>::Matrix::Zero(bank.classes(), d)};
  std::vector<int> counts(static_cast<size_t>(bank.classes()), 0);
  for (int i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < bank.classes(), "center_loss: label out of range");
    const auto diff = (features.flat().row(i) - bank.centers().row(labels[i])).eval();
    out.loss += 0.5 * static_cast<double>(diff.squaredNorm());
    out.grad.flat().row(i) = diff / static_cast<Scalar>(n);
    out.center_delta.row(labels[i]) -= diff;
    ++counts[static_cast<size_t>(labels[i])];
  }
  for (int j = 0; j < bank.classes(); ++j) {
    if (counts[static_cast<size_t>(j)] > 0) out.center_delta.row(j) /= static_cast<Scalar>(counts[static_cast<size_t>(j)]);
  }
  if (n > 0) out.loss /= n;
  return out;
}

/// L = alpha * Lc + (1 - alpha) * Ls + beta * Lo
inline double total_loss(double center, double softmax, double orientation, double alpha = 0.5, double beta = 2.0) {
  require(std::isfinite(center) && std::isfinite(softmax) && std::isfinite(orientation),
          "total_loss: non-finite term");
  require(center >= 0.0 && softmax >= 0.0 && orientation >= 0.0, "total_loss: negative term");
  return alpha * center + (1.0 - alpha) * softmax + beta * orientation;
}

}  // namespace minutiae::nn

#endif  // MINUTIAE_NN_LOSSES_HPP_
