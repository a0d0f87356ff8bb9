#ifndef MINUTIAE_NN_GRADCHECK_HPP_
#define MINUTIAE_NN_GRADCHECK_HPP_

#include "minutiae/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace minutiae::nn {

struct GradCheckTarget {
  Tensor<double>* values;          // perturbed in place, restored afterwards
  const Tensor<double>* analytic;  // gradient of `loss` w.r.t. values
};

/// Central finite differences against analytic gradients. Returns the max
/// over all checked entries of |a - n| / max(|a|, |n|, 1e-8).
inline double grad_check(const std::function<double()>& loss, std::span<const GradCheckTarget> targets,
                         double epsilon = 1e-6) {
  double worst = 0.0;
  for (const GradCheckTarget& t : targets) {
    require(t.values->same_shape(*t.analytic), "grad_check: gradient shape mismatch");
    for (Eigen::Index i = 0; i < t.values->size(); ++i) {
      double& v = t.values->data()[i];
      const double saved = v;
      v = saved + epsilon;
      const double up = loss();
      v = saved - epsilon;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = t.analytic->data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

/// Checks a layer's input and parameter gradients using the scalar probe
/// loss sum(R * layer(x)) for a random projection R.
inline double grad_check_layer(Layer<double>& layer, Tensor<double> input, Mode mode, std::mt19937_64& rng,
                               double epsilon = 1e-6) {
  Tensor<double> probe_shape = layer.forward(input, mode);
  Tensor<double> projection = Tensor<double>::zeros_like(probe_shape);
  projection.fill_normal(rng, 1.0);

  auto params = layer.parameters();
  for (auto* p : params) p->zero_grad();
  layer.forward(input, mode);
  const Tensor<double> input_grad = layer.backward(projection);
  std::vector<Tensor<double>> param_grads;
  param_grads.reserve(params.size());
  for (auto* p : params) param_grads.push_back(p->grad);

  auto loss = [&]() { return layer.forward(input, mode).values().dot(projection.values()); };
  std::vector<GradCheckTarget> targets{{&input, &input_grad}};
  for (size_t i = 0; i < params.size(); ++i) targets.push_back({&params[i]->value, &param_grads[i]});
  return grad_check(loss, targets, epsilon);
}

}  // namespace minutiae::nn

#endif  // MINUTIAE_NN_GRADCHECK_HPP_
