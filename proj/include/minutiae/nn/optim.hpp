#ifndef MINUTIAE_NN_OPTIM_HPP_
#define MINUTIAE_NN_OPTIM_HPP_

#include "minutiae/nn/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace minutiae::nn {

/// Step schedule: `initial_lr` until `decay_fraction * total_steps`, then
/// divided by `decay_factor`.
struct LearningRateSchedule {
  double initial_lr = 0.01;
  double decay_fraction = 0.25;  // 50K of 200K iterations
  double decay_factor = 10.0;
  std::int64_t total_steps = 200000;

  std::int64_t decay_step() const {
    return static_cast<std::int64_t>(std::llround(decay_fraction * static_cast<double>(total_steps)));
  }
  double at(std::int64_t step) const { return step < decay_step() ? initial_lr : initial_lr / decay_factor; }
};

template <typename Scalar>
struct OptimState {
  LearningRateSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 0.0004;
  std::int64_t step = 0;
  std::vector<Tensor<Scalar>> velocity;

  double learning_rate() const { return schedule.at(step); }
};

/// v <- mu v - lr (g + wd w);  w <- w + v.  Weight decay is skipped for
/// parameters flagged `decay = false` (biases, batchnorm affine terms).
template <typename Scalar>
void sgd_step(std::span<Parameter<Scalar>* const> params, OptimState<Scalar>& state) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Parameter<Scalar>* p : params) state.velocity.push_back(Tensor<Scalar>::zeros_like(p->value));
  }
  require(state.velocity.size() == params.size(), "sgd_step: parameter count changed");
  const double lr = state.learning_rate();
  require(lr > 0.0, "sgd_step: learning rate must be positive");
  const auto mu = static_cast<Scalar>(state.momentum);
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<Scalar>& p = *params[i];
    Tensor<Scalar>& v = state.velocity[i];
    require(v.same_shape(p.value) && p.grad.same_shape(p.value), "sgd_step: shape mismatch");
    const auto wd = static_cast<Scalar>(p.decay ? state.weight_decay : 0.0);
    v.values() = mu * v.values() - static_cast<Scalar>(lr) * (p.grad.values() + wd * p.value.values());
    p.value.values() += v.values();
  }
  ++state.step;
}

template <typename Scalar>
void zero_grads(std::span<Parameter<Scalar>* const> params) {
  for (Parameter<Scalar>* p : params) p->zero_grad();
}

}  // namespace minutiae::nn

#endif  // MINUTIAE_NN_OPTIM_HPP_
