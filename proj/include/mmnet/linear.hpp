#pragma once

#include <random>
#include <string>

#include "mmnet/optim.hpp"

namespace mmnet {

// y = x W (+ b) for x of shape [rows, in].
class Linear {
 public:
  enum class Init { normal, zero };

  Linear() = default;
  // Normal init draws W from N(0, 1/in).
  Linear(std::size_t in, std::size_t out, bool bias, std::mt19937_64& rng, Init init = Init::normal);

  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  bool has_bias() const { return bias_.defined(); }

 private:
  Tensor weight_;  // [in, out]
  Tensor bias_;    // [out] or undefined
};

}  // namespace mmnet
