#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmnet/tensor.hpp"

namespace mmnet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

enum class OptimizerKind { adam, sgd };

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  OptimizerOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerOptions options = {});

  // Applies one update using each parameter's accumulated gradient. Throws
  // TrainingError naming the parameter if a gradient is not finite; nothing
  // is updated in that case.
  void step(const ParameterList& params);

  void set_learning_rate(double lr) { state_.options.lr = lr; }
  const OptimizerState& state() const { return state_; }

 private:
  OptimizerState state_;
};

void zero_grads(const ParameterList& params);
std::size_t parameter_count(const ParameterList& params);

}  // namespace mmnet
