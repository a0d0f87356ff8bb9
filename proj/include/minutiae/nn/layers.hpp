#ifndef MINUTIAE_NN_LAYERS_HPP_
#define MINUTIAE_NN_LAYERS_HPP_

#include "minutiae/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace minutiae::nn {

/// Persisted layer kinds; the numeric values are part of the checkpoint format.
enum class LayerKind : std::uint8_t { none = 0, conv = 1, batchnorm = 2, dense = 3 };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::dense: return "dense";
    default: return "none";
  }
}

template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) = 0;
  /// Gradient w.r.t. the input of the most recent forward call. Parameter
  /// gradients are accumulated into their Parameter::grad.
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) = 0;

  virtual LayerKind kind() const { return LayerKind::none; }
  virtual std::vector<Parameter<Scalar>*> parameters() { return {}; }
  /// Every tensor that a checkpoint must persist, in a fixed order.
  virtual std::vector<Tensor<Scalar>*> state() { return {}; }
  /// Visits this layer, or its children for composite layers.
  virtual void visit(const std::function<void(Layer&)>& fn) { fn(*this); }
};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  int pad = 0;

  int output_size(int input) const { return (input + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1; }
  /// Padding that keeps spatial size at stride 1.
  static int same_pad(int kernel, int dilation) { return dilation * (kernel - 1) / 2; }
};

/// 2-D cross-correlation via im2col + GEMM.
template <typename Scalar>
class Conv2d final : public Layer<Scalar> {
 public:
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;

  /// `with_bias = false` for convolutions feeding a batchnorm, whose shift
  /// makes a bias redundant.
  explicit Conv2d(ConvGeometry g, bool with_bias = true)
      : geom_(g),
        with_bias_(with_bias),
        weight_({g.out_channels, g.in_channels, g.kernel, g.kernel}),
        bias_({1, g.out_channels, 1, 1}, false) {
    require(g.in_channels > 0 && g.out_channels > 0 && g.kernel > 0 && g.stride > 0 && g.dilation > 0 && g.pad >= 0,
            "Conv2d: invalid geometry");
  }

  void init(std::mt19937_64& rng, double stddev) {
    weight_.value.fill_normal(rng, stddev);
    bias_.value.values().setZero();
  }

  const ConvGeometry& geometry() const { return geom_; }
  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    require(x.c() == geom_.in_channels, "Conv2d: channel mismatch");
    const int ho = geom_.output_size(x.h());
    const int wo = geom_.output_size(x.w());
    require(ho > 0 && wo > 0, "Conv2d: input smaller than kernel footprint");
    input_ = x;
    Tensor<Scalar> out(x.n(), geom_.out_channels, ho, wo);
    const auto w = weight_matrix();
    const auto b = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias_.value.data(), geom_.out_channels);
    for (int n = 0; n < x.n(); ++n) {
      im2col(x, n, ho, wo);
      auto o = out.sample(n);
      o.noalias() = w * cols_;
      if (with_bias_) o.colwise() += b;
    }
    return out;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    const Tensor<Scalar>& x = input_;
    const int ho = grad_out.h();
    const int wo = grad_out.w();
    Tensor<Scalar> grad_in = Tensor<Scalar>::zeros_like(x);
    const auto w = weight_matrix();
    auto dw = typename Tensor<Scalar>::MatrixMap(weight_.grad.data(), geom_.out_channels,
                                                 geom_.in_channels * geom_.kernel * geom_.kernel);
    auto db = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias_.grad.data(), geom_.out_channels);
    RowMatrix dcols;
    for (int n = 0; n < x.n(); ++n) {
      im2col(x, n, ho, wo);
      const auto g = grad_out.sample(n);
      dw.noalias() += g * cols_.transpose();
      if (with_bias_) db += g.rowwise().sum();
      dcols.noalias() = w.transpose() * g;
      col2im(dcols, grad_in, n, ho, wo);
    }
    return grad_in;
  }

  LayerKind kind() const override { return LayerKind::conv; }
  std::vector<Parameter<Scalar>*> parameters() override {
    if (!with_bias_) return {&weight_};
    return {&weight_, &bias_};
  }
  std::vector<Tensor<Scalar>*> state() override {
    if (!with_bias_) return {&weight_.value};
    return {&weight_.value, &bias_.value};
  }

 private:
  typename Tensor<Scalar>::ConstMatrixMap weight_matrix() const {
    return typename Tensor<Scalar>::ConstMatrixMap(weight_.value.data(), geom_.out_channels,
                                                   geom_.in_channels * geom_.kernel * geom_.kernel);
  }

  void im2col(const Tensor<Scalar>& x, int n, int ho, int wo) {
    const int k = geom_.kernel, s = geom_.stride, d = geom_.dilation, p = geom_.pad;
    const int h = x.h(), wd = x.w();
    cols_.resize(static_cast<Eigen::Index>(x.c()) * k * k, static_cast<Eigen::Index>(ho) * wo);
    for (int c = 0; c < x.c(); ++c) {
      const Scalar* src = x.data() + (static_cast<Eigen::Index>(n) * x.c() + c) * h * wd;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          Scalar* dst = cols_.row((c * k + ky) * k + kx).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s - p + ky * d;
            Scalar* row = dst + static_cast<Eigen::Index>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + wo, Scalar(0));
              continue;
            }
            const Scalar* line = src + static_cast<Eigen::Index>(iy) * wd;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s - p + kx * d;
              row[ox] = (ix >= 0 && ix < wd) ? line[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMatrix& dcols, Tensor<Scalar>& grad_in, int n, int ho, int wo) const {
    const int k = geom_.kernel, s = geom_.stride, d = geom_.dilation, p = geom_.pad;
    const int h = grad_in.h(), wd = grad_in.w();
    for (int c = 0; c < grad_in.c(); ++c) {
      Scalar* dst = grad_in.data() + (static_cast<Eigen::Index>(n) * grad_in.c() + c) * h * wd;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const Scalar* src = dcols.row((c * k + ky) * k + kx).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s - p + ky * d;
            if (iy < 0 || iy >= h) continue;
            Scalar* line = dst + static_cast<Eigen::Index>(iy) * wd;
            const Scalar* row = src + static_cast<Eigen::Index>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s - p + kx * d;
              if (ix >= 0 && ix < wd) line[ix] += row[ox];
            }
          }
        }
      }
    }
  }

  ConvGeometry geom_;
  bool with_bias_;
  Parameter<Scalar> weight_;
  Parameter<Scalar> bias_;
  Tensor<Scalar> input_;
  RowMatrix cols_;
};

// ---------------------------------------------------------------------------
// Batch normalisation
// ---------------------------------------------------------------------------

template <typename Scalar>
class BatchNorm final : public Layer<Scalar> {
 public:
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.9;

  explicit BatchNorm(int channels)
      : gamma_({1, channels, 1, 1}, false),
        beta_({1, channels, 1, 1}, false),
        running_mean_(1, channels, 1, 1),
        running_var_(1, channels, 1, 1, Scalar(1)) {
    gamma_.value.values().setOnes();
  }

  Parameter<Scalar>& gamma() { return gamma_; }
  Parameter<Scalar>& beta() { return beta_; }
  Tensor<Scalar>& running_mean() { return running_mean_; }
  Tensor<Scalar>& running_var() { return running_var_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    const int channels = gamma_.value.c();
    require(x.c() == channels, "BatchNorm: channel mismatch");
    mode_ = mode;
    const Eigen::Index plane = static_cast<Eigen::Index>(x.h()) * x.w();
    const double count = static_cast<double>(x.n()) * plane;
    inv_std_.assign(channels, 0.0);
    Tensor<Scalar> out = Tensor<Scalar>::zeros_like(x);
    xhat_ = Tensor<Scalar>::zeros_like(x);
    if (mode == Mode::train) {
      require(x.n() >= 2, "BatchNorm: training mode needs a batch of at least 2");
    }
    for (int c = 0; c < channels; ++c) {
      double mean, var;
      if (mode == Mode::train) {
        double sum = 0.0;
        for (int n = 0; n < x.n(); ++n) sum += static_cast<double>(x.sample(n).row(c).sum());
        mean = sum / count;
        double acc = 0.0;
        for (int n = 0; n < x.n(); ++n) {
          acc += (x.sample(n).row(c).array().template cast<double>() - mean).square().sum();
        }
        var = acc / count;
        running_mean_.data()[c] = static_cast<Scalar>(kMomentum * running_mean_.data()[c] + (1 - kMomentum) * mean);
        running_var_.data()[c] = static_cast<Scalar>(kMomentum * running_var_.data()[c] + (1 - kMomentum) * var);
      } else {
        mean = running_mean_.data()[c];
        var = running_var_.data()[c];
      }
      const double inv_std = 1.0 / std::sqrt(var + kEpsilon);
      inv_std_[c] = inv_std;
      const Scalar g = gamma_.value.data()[c];
      const Scalar b = beta_.value.data()[c];
      for (int n = 0; n < x.n(); ++n) {
        auto xh = xhat_.sample(n).row(c);
        xh = ((x.sample(n).row(c).array() - static_cast<Scalar>(mean)) * static_cast<Scalar>(inv_std)).matrix();
        out.sample(n).row(c) = (xh.array() * g + b).matrix();
      }
    }
    return out;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    const int channels = gamma_.value.c();
    Tensor<Scalar> grad_in = Tensor<Scalar>::zeros_like(grad_out);
    const double count = static_cast<double>(grad_out.n()) * grad_out.h() * grad_out.w();
    for (int c = 0; c < channels; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < grad_out.n(); ++n) {
        const auto dy = grad_out.sample(n).row(c);
        sum_dy += static_cast<double>(dy.sum());
        sum_dy_xhat += static_cast<double>(dy.dot(xhat_.sample(n).row(c)));
      }
      gamma_.grad.data()[c] += static_cast<Scalar>(sum_dy_xhat);
      beta_.grad.data()[c] += static_cast<Scalar>(sum_dy);
      const double scale = gamma_.value.data()[c] * inv_std_[c];
      for (int n = 0; n < grad_out.n(); ++n) {
        const auto dy = grad_out.sample(n).row(c).array();
        auto dx = grad_in.sample(n).row(c);
        if (mode_ == Mode::train) {
          const auto xh = xhat_.sample(n).row(c).array();
          dx = (static_cast<Scalar>(scale) *
                (dy - static_cast<Scalar>(sum_dy / count) - xh * static_cast<Scalar>(sum_dy_xhat / count)))
                   .matrix();
        } else {
          dx = (dy * static_cast<Scalar>(scale)).matrix();
        }
      }
    }
    return grad_in;
  }

  LayerKind kind() const override { return LayerKind::batchnorm; }
  std::vector<Parameter<Scalar>*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<Tensor<Scalar>*> state() override {
    return {&gamma_.value, &beta_.value, &running_mean_, &running_var_};
  }

 private:
  Parameter<Scalar> gamma_;
  Parameter<Scalar> beta_;
  Tensor<Scalar> running_mean_;
  Tensor<Scalar> running_var_;
  Tensor<Scalar> xhat_;
  std::vector<double> inv_std_;
  Mode mode_ = Mode::infer;
};

// ---------------------------------------------------------------------------
// Elementwise, pooling, resampling
// ---------------------------------------------------------------------------

template <typename Scalar>
class ReLU final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    mask_ = Tensor<Scalar>::zeros_like(x);
    mask_.values() = (x.values().array() > Scalar(0)).template cast<Scalar>().matrix();
    Tensor<Scalar> out = x;
    out.values() = x.values().cwiseMax(Scalar(0));
    return out;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    Tensor<Scalar> g = grad_out;
    g.values().array() *= mask_.values().array();
    return g;
  }

 private:
  Tensor<Scalar> mask_;
};

/// 2x2 max pooling with stride 2. Odd sizes are padded on the right/bottom
/// by replicating the last row/column.
template <typename Scalar>
class MaxPool2 final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    in_shape_ = x.shape();
    const int ho = (x.h() + 1) / 2;
    const int wo = (x.w() + 1) / 2;
    Tensor<Scalar> out(x.n(), x.c(), ho, wo);
    argmax_.assign(static_cast<size_t>(out.size()), 0);
    Eigen::Index o = 0;
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < x.c(); ++c) {
        const Eigen::Index base = (static_cast<Eigen::Index>(n) * x.c() + c) * x.h() * x.w();
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox, ++o) {
            Eigen::Index best = -1;
            Scalar best_v = Scalar(0);
            for (int dy = 0; dy < 2; ++dy) {
              const int iy = std::min(2 * oy + dy, x.h() - 1);
              for (int dx = 0; dx < 2; ++dx) {
                const int ix = std::min(2 * ox + dx, x.w() - 1);
                const Eigen::Index idx = base + static_cast<Eigen::Index>(iy) * x.w() + ix;
                if (best < 0 || x.data()[idx] > best_v) {
                  best = idx;
                  best_v = x.data()[idx];
                }
              }
            }
            out.data()[o] = best_v;
            argmax_[static_cast<size_t>(o)] = best;
          }
        }
      }
    }
    return out;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    Tensor<Scalar> g(in_shape_);
    for (Eigen::Index o = 0; o < grad_out.size(); ++o) g.data()[argmax_[static_cast<size_t>(o)]] += grad_out.data()[o];
    return g;
  }

 private:
  std::array<int, 4> in_shape_{};
  std::vector<Eigen::Index> argmax_;
};

/// Bilinear upsampling by an integer factor with half-pixel alignment and
/// edge clamping, so constant maps stay constant.
template <typename Scalar>
class UpsampleBilinear final : public Layer<Scalar> {
 public:
  explicit UpsampleBilinear(int factor) : factor_(factor) {
    require(factor == 2 || factor == 4 || factor == 8 || factor == 16, "UpsampleBilinear: factor must be 2, 4, 8 or 16");
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    in_shape_ = x.shape();
    ys_ = taps(x.h());
    xs_ = taps(x.w());
    Tensor<Scalar> out(x.n(), x.c(), x.h() * factor_, x.w() * factor_);
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < x.c(); ++c) {
        const auto in = x.plane(n, c);
        auto o = out.plane(n, c);
        for (int y = 0; y < out.h(); ++y) {
          const Tap& ty = ys_[y];
          for (int xo = 0; xo < out.w(); ++xo) {
            const Tap& tx = xs_[xo];
            const Scalar top = (1 - tx.w) * in(ty.i0, tx.i0) + tx.w * in(ty.i0, tx.i1);
            const Scalar bottom = (1 - tx.w) * in(ty.i1, tx.i0) + tx.w * in(ty.i1, tx.i1);
            o(y, xo) = (1 - ty.w) * top + ty.w * bottom;
          }
        }
      }
    }
    return out;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    Tensor<Scalar> g(in_shape_);
    for (int n = 0; n < grad_out.n(); ++n) {
      for (int c = 0; c < grad_out.c(); ++c) {
        const auto go = grad_out.plane(n, c);
        auto gi = g.plane(n, c);
        for (int y = 0; y < grad_out.h(); ++y) {
          const Tap& ty = ys_[y];
          for (int xo = 0; xo < grad_out.w(); ++xo) {
            const Tap& tx = xs_[xo];
            const Scalar v = go(y, xo);
            gi(ty.i0, tx.i0) += (1 - ty.w) * (1 - tx.w) * v;
            gi(ty.i0, tx.i1) += (1 - ty.w) * tx.w * v;
            gi(ty.i1, tx.i0) += ty.w * (1 - tx.w) * v;
            gi(ty.i1, tx.i1) += ty.w * tx.w * v;
          }
        }
      }
    }
    return g;
  }

 private:
  struct Tap {
    int i0, i1;
    Scalar w;
  };

  std::vector<Tap> taps(int n) const {
    std::vector<Tap> out(static_cast<size_t>(n) * factor_);
    for (int i = 0; i < n * factor_; ++i) {
      double src = (i + 0.5) / factor_ - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, n - 1);
      out[i] = Tap{i0, i1, static_cast<Scalar>(src - i0)};
    }
    return out;
  }

  int factor_;
  std::array<int, 4> in_shape_{};
  std::vector<Tap> ys_, xs_;
};

/// Fully connected layer over the flattened C*H*W features of each sample.
template <typename Scalar>
class Dense final : public Layer<Scalar> {
 public:
  Dense(int in_features, int out_features)
      : weight_({out_features, in_features, 1, 1}), bias_({1, out_features, 1, 1}, false) {
    require(in_features > 0 && out_features > 0, "Dense: invalid geometry");
  }

  void init(std::mt19937_64& rng, double stddev) {
    weight_.value.fill_normal(rng, stddev);
    bias_.value.values().setZero();
  }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode) override {
    require(x.c() * x.h() * x.w() == weight_.value.c(), "Dense: feature size mismatch");
    input_ = x;
    Tensor<Scalar> out(x.n(), weight_.value.n(), 1, 1);
    out.flat().noalias() = x.flat() * weights().transpose();
    out.flat().rowwise() += bias_row();
    return out;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    typename Tensor<Scalar>::MatrixMap dw(weight_.grad.data(), weight_.value.n(), weight_.value.c());
    dw.noalias() += grad_out.flat().transpose() * input_.flat();
    Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> db(bias_.grad.data(), weight_.value.n());
    db += grad_out.flat().colwise().sum();
    Tensor<Scalar> g = Tensor<Scalar>::zeros_like(input_);
    g.flat().noalias() = grad_out.flat() * weights();
    return g;
  }

  LayerKind kind() const override { return LayerKind::dense; }
  std::vector<Parameter<Scalar>*> parameters() override { return {&weight_, &bias_}; }
  std::vector<Tensor<Scalar>*> state() override { return {&weight_.value, &bias_.value}; }

 private:
  typename Tensor<Scalar>::ConstMatrixMap weights() const {
    return typename Tensor<Scalar>::ConstMatrixMap(weight_.value.data(), weight_.value.n(), weight_.value.c());
  }
  Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bias_row() const {
    return Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias_.value.data(), weight_.value.n());
  }

  Parameter<Scalar> weight_;
  Parameter<Scalar> bias_;
  Tensor<Scalar> input_;
};

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

template <typename Scalar>
class Sequential final : public Layer<Scalar> {
 public:
  Sequential() = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    Tensor<Scalar> h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    Tensor<Scalar> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  std::vector<Parameter<Scalar>*> parameters() override {
    std::vector<Parameter<Scalar>*> out;
    for (auto& l : layers_) {
      auto p = l->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  void visit(const std::function<void(Layer<Scalar>&)>& fn) override {
    for (auto& l : layers_) l->visit(fn);
  }
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<std::unique_ptr<Layer<Scalar>>> layers_;
};

/// Pre-activation residual block: x + conv(relu(bn(conv(relu(bn(x)))))).
/// With the second convolution zeroed the block is exactly the identity.
template <typename Scalar>
class ResidualBlock final : public Layer<Scalar> {
 public:
  ResidualBlock(int channels, int dilation = 1)
      : bn1_(channels),
        conv1_(ConvGeometry{channels, channels, 3, 1, dilation, ConvGeometry::same_pad(3, dilation)}, false),
        bn2_(channels),
        conv2_(ConvGeometry{channels, channels, 3, 1, dilation, ConvGeometry::same_pad(3, dilation)}) {}

  void init(std::mt19937_64& rng, double stddev) {
    conv1_.init(rng, stddev);
    conv2_.init(rng, stddev);
  }
  Conv2d<Scalar>& first_conv() { return conv1_; }
  Conv2d<Scalar>& second_conv() { return conv2_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) override {
    Tensor<Scalar> h = bn1_.forward(x, mode);
    h = relu1_.forward(h, mode);
    h = conv1_.forward(h, mode);
    h = bn2_.forward(h, mode);
    h = relu2_.forward(h, mode);
    h = conv2_.forward(h, mode);
    h.values() += x.values();
    return h;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) override {
    Tensor<Scalar> g = conv2_.backward(grad_out);
    g = relu2_.backward(g);
    g = bn2_.backward(g);
    g = conv1_.backward(g);
    g = relu1_.backward(g);
    g = bn1_.backward(g);
    g.values() += grad_out.values();
    return g;
  }

  std::vector<Parameter<Scalar>*> parameters() override {
    std::vector<Parameter<Scalar>*> out;
    for (Layer<Scalar>* l : std::initializer_list<Layer<Scalar>*>{&bn1_, &conv1_, &bn2_, &conv2_}) {
      auto p = l->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  void visit(const std::function<void(Layer<Scalar>&)>& fn) override {
    fn(bn1_);
    fn(conv1_);
    fn(bn2_);
    fn(conv2_);
  }

 private:
  BatchNorm<Scalar> bn1_;
  ReLU<Scalar> relu1_;
  Conv2d<Scalar> conv1_;
  BatchNorm<Scalar> bn2_;
  ReLU<Scalar> relu2_;
  Conv2d<Scalar> conv2_;
};

/// Collects the persistable layers of a model in visit order.
template <typename Scalar>
std::vector<Layer<Scalar>*> stateful_layers(Layer<Scalar>& root) {
  std::vector<Layer<Scalar>*> out;
  root.visit([&](Layer<Scalar>& l) {
    if (l.kind() != LayerKind::none) out.push_back(&l);
  });
  return out;
}

}  // namespace minutiae::nn

#endif  // MINUTIAE_NN_LAYERS_HPP_
