#ifndef MINUTIAE_NN_TENSOR_HPP_
#define MINUTIAE_NN_TENSOR_HPP_

#include "minutiae/error.hpp"

#include <Eigen/Dense>

#include <array>
#include <random>

namespace minutiae::nn {

enum class Mode { train, infer };

/// Dense NCHW array. Storage is a flat Eigen vector in row-major NCHW order.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, Scalar fill = Scalar(0)) : shape_{n, c, h, w} {
    require(n >= 0 && c >= 0 && h >= 0 && w >= 0, "Tensor: negative dimension");
    data_ = Vector::Constant(static_cast<Eigen::Index>(n) * c * h * w, fill);
  }
  explicit Tensor(std::array<int, 4> shape, Scalar fill = Scalar(0))
      : Tensor(shape[0], shape[1], shape[2], shape[3], fill) {}

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const std::array<int, 4>& shape() const { return shape_; }
  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  Eigen::Index size() const { return data_.size(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Scalar& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  Scalar operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector& values() { return data_; }
  const Vector& values() const { return data_; }

  /// Sample `n` viewed as a (C, H*W) matrix.
  MatrixMap sample(int n) {
    return MatrixMap(data_.data() + sample_offset(n), shape_[1], shape_[2] * shape_[3]);
  }
  ConstMatrixMap sample(int n) const {
    return ConstMatrixMap(data_.data() + sample_offset(n), shape_[1], shape_[2] * shape_[3]);
  }
  /// One (H, W) plane.
  MatrixMap plane(int n, int c) {
    return MatrixMap(data_.data() + index(n, c, 0, 0), shape_[2], shape_[3]);
  }
  ConstMatrixMap plane(int n, int c) const {
    return ConstMatrixMap(data_.data() + index(n, c, 0, 0), shape_[2], shape_[3]);
  }
  /// Whole tensor as (N, C*H*W).
  ConstMatrixMap flat() const { return ConstMatrixMap(data_.data(), shape_[0], shape_[1] * shape_[2] * shape_[3]); }
  MatrixMap flat() { return MatrixMap(data_.data(), shape_[0], shape_[1] * shape_[2] * shape_[3]); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.values() = data_.template cast<Other>();
    return out;
  }

  void fill_normal(std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < data_.size(); ++i) data_[i] = static_cast<Scalar>(dist(rng));
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Eigen::Index sample_offset(int n) const { return static_cast<Eigen::Index>(n) * shape_[1] * shape_[2] * shape_[3]; }
  Eigen::Index index(int n, int c, int y, int x) const {
    return ((static_cast<Eigen::Index>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  std::array<int, 4> shape_{0, 0, 0, 0};
  Vector data_;
};

/// Trainable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool decay = true;  // weight decay applies

  Parameter() = default;
  explicit Parameter(std::array<int, 4> shape, bool decays = true)
      : value(shape), grad(shape), decay(decays) {}
  void zero_grad() { grad.values().setZero(); }
};

}  // namespace minutiae::nn

#endif  // MINUTIAE_NN_TENSOR_HPP_
