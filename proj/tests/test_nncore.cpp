#include "doctest.h"

#include "minutiae/nn/checkpoint.hpp"
#include "minutiae/nn/gradcheck.hpp"
#include "minutiae/nn/layers.hpp"
#include "minutiae/nn/losses.hpp"
#include "minutiae/nn/optim.hpp"

#include <cmath>
#include <random>

using namespace minutiae;
using namespace minutiae::nn;

namespace {

Tensor<double> random_tensor(std::array<int, 4> shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor<double> t(shape);
  t.fill_normal(rng, stddev);
  return t;
}

constexpr int kSeeds = 10;
constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("conv2d examples") {
  SUBCASE("1x1 identity kernel") {
    Conv2d<double> conv(ConvGeometry{3, 3, 1});
    conv.weight().value.values().setZero();
    for (int c = 0; c < 3; ++c) conv.weight().value(c, c, 0, 0) = 1.0;
    std::mt19937_64 rng(1);
    const auto x = random_tensor({2, 3, 5, 4}, rng);
    CHECK(conv.forward(x, Mode::infer).values() == x.values());
  }
  SUBCASE("3x3 averaging of a constant interior") {
    Conv2d<double> conv(ConvGeometry{1, 1, 3, 1, 1, 1});
    conv.weight().value.values().setConstant(1.0 / 9.0);
    const Tensor<double> x(1, 1, 6, 6, 0.7);
    const auto y = conv.forward(x, Mode::infer);
    for (int r = 1; r < 5; ++r)
      for (int c = 1; c < 5; ++c) CHECK(y(0, 0, r, c) == doctest::Approx(0.7));
  }
  SUBCASE("2x2 input, 2x2 kernel is one dot product") {
    Conv2d<double> conv(ConvGeometry{1, 1, 2});
    conv.weight().value.values() << 5, 6, 7, 8;
    Tensor<double> x(1, 1, 2, 2);
    x.values() << 1, 2, 3, 4;
    const auto y = conv.forward(x, Mode::infer);
    CHECK(y.h() == 1);
    CHECK(y.w() == 1);
    CHECK(y(0, 0, 0, 0) == 70.0);
  }
  SUBCASE("channel mismatch") {
    Conv2d<double> conv(ConvGeometry{2, 1, 3});
    CHECK_THROWS_AS(conv.forward(Tensor<double>(1, 3, 5, 5), Mode::infer), ContractViolation);
  }
}

TEST_CASE("maxpool2 examples") {
  MaxPool2<double> pool;
  const auto c = pool.forward(Tensor<double>(1, 2, 4, 6, 0.25), Mode::infer);
  CHECK(c.h() == 2);
  CHECK(c.w() == 3);
  CHECK((c.values().array() == 0.25).all());

  Tensor<double> ramp(1, 1, 4, 4);
  for (int i = 0; i < 16; ++i) ramp.data()[i] = i;
  const auto r = pool.forward(ramp, Mode::infer);
  CHECK(r(0, 0, 0, 0) == 5);
  CHECK(r(0, 0, 0, 1) == 7);
  CHECK(r(0, 0, 1, 0) == 13);
  CHECK(r(0, 0, 1, 1) == 15);

  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const auto x = random_tensor({2, 3, 4, 4}, rng);
    const auto y = pool.forward(x, Mode::infer);
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < 3; ++ch)
        for (int oy = 0; oy < 2; ++oy)
          for (int ox = 0; ox < 2; ++ox) {
            double best = -1e300;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) best = std::max(best, x(n, ch, 2 * oy + dy, 2 * ox + dx));
            CHECK(y(n, ch, oy, ox) == best);
          }
  }

  const auto odd = pool.forward(Tensor<double>(1, 1, 5, 3, 1.0), Mode::infer);
  CHECK(odd.h() == 3);
  CHECK(odd.w() == 2);
}

TEST_CASE("batchnorm examples") {
  std::mt19937_64 rng(4);
  SUBCASE("standardised channel passes through") {
    Tensor<double> x(4, 1, 1, 1);
    x.values() << -1, 1, -1, 1;
    BatchNorm<double> bn(1);
    const auto y = bn.forward(x, Mode::train);
    const double scale = 1.0 / std::sqrt(1.0 + BatchNorm<double>::kEpsilon);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i] * scale));
  }
  SUBCASE("shift sets the output mean") {
    BatchNorm<double> bn(2);
    bn.beta().value.values().setConstant(5.0);
    const auto y = bn.forward(random_tensor({3, 2, 4, 4}, rng, 3.0), Mode::train);
    CHECK(y.values().mean() == doctest::Approx(5.0));
  }
  SUBCASE("direct formula oracle") {
    BatchNorm<double> bn(3);
    bn.gamma().value.values() << 0.5, 2.0, -1.0;
    bn.beta().value.values() << 0.1, -0.2, 0.3;
    const auto x = random_tensor({4, 3, 3, 2}, rng, 2.0);
    const auto y = bn.forward(x, Mode::train);
    for (int c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 6; ++i) mean += x.sample(n)(c, i);
      mean /= 24;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 6; ++i) var += std::pow(x.sample(n)(c, i) - mean, 2);
      var /= 24;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 6; ++i) {
          const double expect = bn.gamma().value.data()[c] * (x.sample(n)(c, i) - mean) /
                                    std::sqrt(var + BatchNorm<double>::kEpsilon) +
                                bn.beta().value.data()[c];
          CHECK(std::abs(y.sample(n)(c, i) - expect) < 1e-6);
        }
      CHECK(bn.running_mean().data()[c] == doctest::Approx(0.1 * mean));
      CHECK(bn.running_var().data()[c] == doctest::Approx(0.9 + 0.1 * var));
    }
  }
  SUBCASE("train mode rejects a single sample") {
    BatchNorm<double> bn(1);
    CHECK_THROWS_AS(bn.forward(Tensor<double>(1, 1, 4, 4), Mode::train), ContractViolation);
    CHECK_NOTHROW(bn.forward(Tensor<double>(1, 1, 4, 4), Mode::infer));
  }
}

TEST_CASE("upsample_bilinear examples") {
  UpsampleBilinear<double> up2(2);
  const auto c = up2.forward(Tensor<double>(1, 1, 3, 2, 0.4), Mode::infer);
  CHECK(c.h() == 6);
  CHECK((c.values().array() - 0.4).abs().maxCoeff() < 1e-12);

  Tensor<double> pair(1, 1, 1, 2);
  pair.values() << 0, 1;
  const auto ramp = up2.forward(pair, Mode::infer);
  CHECK(ramp(0, 0, 0, 0) == doctest::Approx(0.0));
  CHECK(ramp(0, 0, 0, 1) == doctest::Approx(0.25));
  CHECK(ramp(0, 0, 0, 2) == doctest::Approx(0.75));
  CHECK(ramp(0, 0, 0, 3) == doctest::Approx(1.0));

  // smooth field: upsample then block-average recovers the field
  UpsampleBilinear<double> up4(4);
  Tensor<double> smooth(1, 1, 16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) smooth(0, 0, y, x) = std::sin(0.2 * x) * std::cos(0.15 * y);
  const auto big = up4.forward(smooth, Mode::infer);
  double worst = 0;
  for (int y = 1; y < 15; ++y)
    for (int x = 1; x < 15; ++x) {
      double acc = 0;
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx) acc += big(0, 0, 4 * y + dy, 4 * x + dx);
      worst = std::max(worst, std::abs(acc / 16 - smooth(0, 0, y, x)));
    }
  CHECK(worst < 0.01);
  CHECK_THROWS_AS(UpsampleBilinear<double>(3), ContractViolation);
}

TEST_CASE("softmax_xent examples") {
  const std::vector<int> label{2};
  Tensor<double> uniform(1, 5, 1, 1, 0.3);
  const std::vector<int> l0{0};
  CHECK(softmax_xent(uniform, std::span<const int>(l0)).loss == doctest::Approx(std::log(5.0)));

  double previous = 1e9;
  for (double boost : {0.0, 2.0, 5.0, 10.0, 30.0}) {
    Tensor<double> z(1, 3, 1, 1);
    z.values() << 0, 0, boost;
    const double loss = softmax_xent(z, std::span<const int>(label)).loss;
    CHECK(loss < previous);
    previous = loss;
  }
  CHECK(previous < 1e-12);

  Tensor<double> z(1, 3, 1, 1);
  z.values() << 1, 2, 3;
  const auto r = softmax_xent(z, std::span<const int>(label));
  CHECK(r.loss == doctest::Approx(0.40760596444438013).epsilon(1e-12));
  CHECK(r.grad.values().sum() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.grad.data()[2] < 0.0);
}

TEST_CASE("softmax_xent is invariant to a constant logit shift") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int t = 0; t < 100; ++t) {
    auto z = random_tensor({4, 3, 1, 1}, rng, 3.0);
    const std::vector<int> labels{0, 1, 2, 1};
    const double base = softmax_xent(z, std::span<const int>(labels)).loss;
    z.values().array() += shift(rng);
    CHECK(std::abs(softmax_xent(z, std::span<const int>(labels)).loss - base) < 1e-9);
  }
}

TEST_CASE("center_loss examples") {
  CenterBank<double> bank(2, 2, 0.5);
  bank.centers() << 1, 1, -1, 0;
  Tensor<double> f(2, 2, 1, 1);
  f.values() << 1, 1, -1, 0;
  const std::vector<int> labels{0, 1};
  CHECK(center_loss(f, std::span<const int>(labels), bank).loss == 0.0);

  Tensor<double> one(1, 2, 1, 1);
  one.values() << 3, 1;  // distance 2 from center 0
  const std::vector<int> l0{0};
  const auto r = center_loss(one, std::span<const int>(l0), bank);
  CHECK(r.loss == doctest::Approx(2.0));
  CHECK(r.grad.data()[0] == doctest::Approx(2.0));

  CenterBank<double> snap(2, 2, 1.0);
  snap.apply(center_loss(one, std::span<const int>(l0), snap).center_delta);
  CHECK(snap.centers()(0, 0) == 3.0);
  CHECK(snap.centers()(0, 1) == 1.0);
  CHECK(snap.centers()(1, 0) == 0.0);
}

TEST_CASE("orientation_loss examples") {
  const std::vector<double> gt{37.0};
  const std::vector<double> on{1.0};
  const double r = 37.0 * std::numbers::pi / 180.0;
  Tensor<double> exact(1, 2, 1, 1);
  exact.values() << std::sin(r), std::cos(r);
  CHECK(orientation_loss(exact, std::span<const double>(gt), std::span<const double>(on)).loss ==
        doctest::Approx(0.0));
  Tensor<double> anti(1, 2, 1, 1);
  anti.values() << -std::sin(r), -std::cos(r);
  CHECK(orientation_loss(anti, std::span<const double>(gt), std::span<const double>(on)).loss ==
        doctest::Approx(4.0));
  for (double g : {0.0, 91.0, 200.0, 359.0}) {
    const std::vector<double> d{g};
    CHECK(orientation_loss(Tensor<double>(1, 2, 1, 1), std::span<const double>(d), std::span<const double>(on)).loss ==
          doctest::Approx(1.0));
  }
}

TEST_CASE("total_loss examples and monotonicity") {
  CHECK(total_loss(1, 1, 0) == doctest::Approx(1.0));
  CHECK(total_loss(0, 0, 1) == doctest::Approx(2.0));
  CHECK(total_loss(2, 4, 1) == doctest::Approx(5.0));
  CHECK(total_loss(3, 7, 2, 1.0, 2.0) == doctest::Approx(3 + 2 * 2));
  CHECK_THROWS_AS(total_loss(-1, 0, 0), ContractViolation);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 5);
  for (int i = 0; i < 500; ++i) {
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    const double base = total_loss(a, b, c);
    CHECK(total_loss(a + d, b, c) >= base);
    CHECK(total_loss(a, b + d, c) >= base);
    CHECK(total_loss(a, b, c + d) >= base);
  }
}

TEST_CASE("sgd_step examples") {
  Parameter<double> p({1, 1, 1, 1});
  p.value.data()[0] = 2.0;
  std::vector<Parameter<double>*> params{&p};

  OptimState<double> idle;
  idle.weight_decay = 0.0;
  sgd_step<double>(params, idle);
  CHECK(p.value.data()[0] == 2.0);

  OptimState<double> plain;
  plain.schedule.initial_lr = 0.1;
  plain.momentum = 0.0;
  plain.weight_decay = 0.0;
  p.grad.data()[0] = 1.0;
  sgd_step<double>(params, plain);
  CHECK(p.value.data()[0] == doctest::Approx(1.9));

  OptimState<double> mom;
  mom.schedule.initial_lr = 0.1;
  mom.momentum = 0.9;
  mom.weight_decay = 0.0;
  p.value.data()[0] = 0.0;
  p.grad.data()[0] = 1.0;
  sgd_step<double>(params, mom);
  p.grad.data()[0] = 3.0;
  sgd_step<double>(params, mom);
  CHECK(mom.velocity[0].data()[0] == doctest::Approx(-0.1 * (0.9 * 1.0 + 3.0)));
  CHECK(p.value.data()[0] == doctest::Approx(-0.1 - 0.1 * 3.9));

  OptimState<double> tiny;
  tiny.schedule.initial_lr = 1e-300;
  p.value.data()[0] = 4.0;
  sgd_step<double>(params, tiny);
  CHECK(p.value.data()[0] == 4.0);
}

TEST_CASE("learning rate schedule decays once at a quarter of training") {
  LearningRateSchedule s;
  s.total_steps = 2000;
  CHECK(s.decay_step() == 500);
  CHECK(s.at(499) == 0.01);
  CHECK(s.at(500) == doctest::Approx(0.001));
  s.total_steps = 200000;
  CHECK(s.decay_step() == 50000);
}

TEST_CASE("every layer passes finite-difference checks over 10 seeds") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    CAPTURE(seed);
    {
      Conv2d<double> conv(ConvGeometry{2, 3, 3, 1, 1, 1});
      conv.init(rng, 0.5);
      CHECK(grad_check_layer(conv, random_tensor({1, 2, 5, 5}, rng), Mode::train, rng) < kTol);
    }
    {
      Conv2d<double> strided(ConvGeometry{2, 2, 3, 2, 1, 1});
      strided.init(rng, 0.5);
      CHECK(grad_check_layer(strided, random_tensor({2, 2, 7, 6}, rng), Mode::train, rng) < kTol);
    }
    {
      Conv2d<double> dilated(ConvGeometry{2, 2, 3, 1, 2, 2});
      dilated.init(rng, 0.5);
      CHECK(grad_check_layer(dilated, random_tensor({1, 2, 6, 6}, rng), Mode::train, rng) < kTol);
    }
    {
      MaxPool2<double> pool;
      CHECK(grad_check_layer(pool, random_tensor({2, 2, 5, 6}, rng), Mode::train, rng) < kTol);
    }
    {
      BatchNorm<double> bn(3);
      bn.gamma().value.fill_normal(rng, 1.0);
      bn.beta().value.fill_normal(rng, 1.0);
      CHECK(grad_check_layer(bn, random_tensor({3, 3, 3, 3}, rng, 2.0), Mode::train, rng) < 1e-3);
      CHECK(grad_check_layer(bn, random_tensor({3, 3, 3, 3}, rng, 2.0), Mode::infer, rng) < kTol);
    }
    {
      Dense<double> dense(12, 4);
      dense.init(rng, 0.5);
      CHECK(grad_check_layer(dense, random_tensor({3, 3, 2, 2}, rng), Mode::train, rng) < kTol);
    }
    {
      ReLU<double> relu;
      CHECK(grad_check_layer(relu, random_tensor({2, 2, 4, 4}, rng), Mode::train, rng) < kTol);
    }
    {
      UpsampleBilinear<double> up(2);
      CHECK(grad_check_layer(up, random_tensor({1, 2, 3, 4}, rng), Mode::train, rng) < kTol);
    }
    {
      ResidualBlock<double> block(2);
      block.init(rng, 0.5);
      CHECK(grad_check_layer(block, random_tensor({2, 2, 4, 4}, rng), Mode::train, rng) < 1e-3);
    }
  }
}

TEST_CASE("loss gradients pass finite-difference checks over 10 seeds") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(2000 + seed);
    CAPTURE(seed);
    {
      auto z = random_tensor({4, 3, 1, 1}, rng, 2.0);
      const std::vector<int> labels{2, 0, 1, 2};
      const auto g = softmax_xent(z, std::span<const int>(labels)).grad;
      const std::vector<GradCheckTarget> t{{&z, &g}};
      CHECK(grad_check([&] { return softmax_xent(z, std::span<const int>(labels)).loss; }, t) < kTol);
    }
    {
      auto z = random_tensor({2, 1, 3, 3}, rng, 2.0);
      Tensor<double> target(2, 1, 3, 3), weight(2, 1, 3, 3);
      std::uniform_real_distribution<double> u(0, 1);
      for (Eigen::Index i = 0; i < target.size(); ++i) {
        target.data()[i] = u(rng) < 0.3 ? 1.0 : 0.0;
        weight.data()[i] = 0.5 + u(rng);
      }
      const auto g = sigmoid_bce(z, target, weight).grad;
      const std::vector<GradCheckTarget> t{{&z, &g}};
      CHECK(grad_check([&] { return sigmoid_bce(z, target, weight).loss; }, t) < kTol);
    }
    {
      auto pred = random_tensor({5, 2, 1, 1}, rng);
      const std::vector<double> gt{10, 100, 200, 300, 45};
      const std::vector<double> mask{1, 0, 1, 1, 0};
      const auto g = orientation_loss(pred, std::span<const double>(gt), std::span<const double>(mask)).grad;
      const std::vector<GradCheckTarget> t{{&pred, &g}};
      CHECK(grad_check([&] { return orientation_loss(pred, std::span<const double>(gt), std::span<const double>(mask)).loss; },
                       t) < kTol);
    }
    {
      CenterBank<double> bank(2, 4, 0.5);
      bank.centers() = CenterBank<double>::Matrix::Random(2, 4);
      auto f = random_tensor({5, 4, 1, 1}, rng);
      const std::vector<int> labels{0, 1, 1, 0, 1};
      const auto g = center_loss(f, std::span<const int>(labels), bank).grad;
      const std::vector<GradCheckTarget> t{{&f, &g}};
      CHECK(grad_check([&] { return center_loss(f, std::span<const int>(labels), bank).loss; }, t) < kTol);
    }
  }
}

TEST_CASE("composite total loss passes a finite-difference check") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(3000 + seed);
    CAPTURE(seed);
    const int n = 6, dim = 5;
    auto features = random_tensor({n, dim, 1, 1}, rng);
    Dense<double> cls(dim, 2), dir(dim, 2);
    cls.init(rng, 0.5);
    dir.init(rng, 0.5);
    CenterBank<double> bank(2, dim, 0.5);
    bank.centers() = CenterBank<double>::Matrix::Random(2, dim);
    const std::vector<int> labels{1, 0, 1, 1, 0, 0};
    const std::vector<double> dirs{30, 0, 250, 90, 0, 0};
    const std::vector<double> positive{1, 0, 1, 1, 0, 0};
    const double alpha = 0.5, beta = 2.0;

    auto loss = [&] {
      const double lc = center_loss(features, std::span<const int>(labels), bank).loss;
      const double ls = softmax_xent(cls.forward(features, Mode::train), std::span<const int>(labels)).loss;
      const double lo = orientation_loss(dir.forward(features, Mode::train), std::span<const double>(dirs),
                                         std::span<const double>(positive))
                            .loss;
      return total_loss(lc, ls, lo, alpha, beta);
    };

    for (auto* p : cls.parameters()) p->zero_grad();
    for (auto* p : dir.parameters()) p->zero_grad();
    auto c = center_loss(features, std::span<const int>(labels), bank);
    auto s = softmax_xent(cls.forward(features, Mode::train), std::span<const int>(labels));
    auto o = orientation_loss(dir.forward(features, Mode::train), std::span<const double>(dirs),
                              std::span<const double>(positive));
    s.grad.values() *= (1 - alpha);
    o.grad.values() *= beta;
    Tensor<double> gf = cls.backward(s.grad);
    gf.values() += dir.backward(o.grad).values() + alpha * c.grad.values();
    const Tensor<double> gcw = cls.weight().grad, gdw = dir.weight().grad;
    const std::vector<GradCheckTarget> t{{&features, &gf}, {&cls.weight().value, &gcw}, {&dir.weight().value, &gdw}};
    CHECK(grad_check(loss, t) < kTol);
  }
}

TEST_CASE("residual block with zeroed final conv is the identity") {
  std::mt19937_64 rng(77);
  ResidualBlock<double> block(3);
  block.init(rng, 0.3);
  block.second_conv().weight().value.values().setZero();
  const auto x = random_tensor({2, 3, 5, 5}, rng);
  CHECK(block.forward(x, Mode::train).values() == x.values());
  CHECK(block.forward(x, Mode::infer).values() == x.values());
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(5);
  Sequential<float> model;
  model.add<Conv2d<float>>(ConvGeometry{1, 4, 3, 1, 1, 1}).init(rng, 0.01);
  model.add<BatchNorm<float>>(4);
  model.add<ReLU<float>>();
  model.add<Dense<float>>(4 * 3 * 3, 2).init(rng, 0.01);
  Tensor<float> x(2, 1, 3, 3);
  x.fill_normal(rng, 1.0);
  model.forward(x, Mode::train);  // move running stats off their defaults

  Checkpoint ckpt;
  ckpt.model = "test";
  ckpt.meta["width"] = "4";
  capture_layers(model, ckpt);
  CHECK(ckpt.manifest.size() == 3);
  const std::string bytes = encode_checkpoint(ckpt);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back == ckpt);
  CHECK(encode_checkpoint(back) == bytes);

  Sequential<float> other;
  other.add<Conv2d<float>>(ConvGeometry{1, 4, 3, 1, 1, 1});
  other.add<BatchNorm<float>>(4);
  other.add<ReLU<float>>();
  other.add<Dense<float>>(4 * 3 * 3, 2);
  restore_layers(other, back);
  CHECK(other.forward(x, Mode::infer).values() == model.forward(x, Mode::infer).values());

  Sequential<float> wrong;
  wrong.add<Conv2d<float>>(ConvGeometry{1, 5, 3, 1, 1, 1});
  CHECK_THROWS(restore_layers(wrong, back));
  CHECK_THROWS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)));
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS(decode_checkpoint(bad));
}

TEST_CASE("optimizer state survives a checkpoint") {
  Parameter<float> p({1, 2, 1, 1});
  p.grad.values() << 1.0f, -2.0f;
  std::vector<Parameter<float>*> params{&p};
  OptimState<float> state;
  state.schedule.total_steps = 40;
  sgd_step<float>(params, state);
  Checkpoint ckpt;
  capture_optimizer(state, ckpt);
  OptimState<float> back;
  restore_optimizer(decode_checkpoint(encode_checkpoint(ckpt)), back);
  CHECK(back.step == 1);
  CHECK(back.schedule.total_steps == 40);
  CHECK(back.momentum == state.momentum);
  CHECK(back.weight_decay == state.weight_decay);
  CHECK(back.velocity[0].values() == state.velocity[0].values());
}
