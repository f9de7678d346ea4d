#include "mmnet/optim.hpp"

#include <cmath>

#include "mmnet/errors.hpp"

namespace mmnet {

Optimizer::Optimizer(OptimizerOptions options) { state_.options = options; }

void Optimizer::step(const ParameterList& params) {
  if (state_.first_moment.empty()) {
    for (const auto& p : params) {
      state_.first_moment.emplace_back(p.tensor.numel(), 0.0);
      state_.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state_.first_moment.size() != params.size()) {
    throw ContractError("optimizer: parameter list changed between steps");
  }
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + p.name);
    }
  }

  ++state_.step;
  const auto& o = state_.options;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor w = params[i].tensor;
    auto values = w.mutable_values();
    auto grad = w.grad();
    if (state_.first_moment[i].size() != values.size()) {
      throw ContractError("optimizer: shape of " + params[i].name + " changed");
    }
    if (o.kind == OptimizerKind::sgd) {
      for (std::size_t j = 0; j < values.size(); ++j) values[j] -= o.lr * grad[j];
      continue;
    }
    auto& m = state_.first_moment[i];
    auto& v = state_.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * grad[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * grad[j] * grad[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      values[j] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

void zero_grads(const ParameterList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace mmnet
