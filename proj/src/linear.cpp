#include "mmnet/linear.hpp"

#include <cmath>

namespace mmnet {

Linear::Linear(std::size_t in, std::size_t out, bool bias, std::mt19937_64& rng, Init init) {
  std::vector<double> w(in * out, 0.0);
  if (init == Init::normal) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    for (auto& v : w) v = dist(rng);
  }
  weight_ = Tensor({in, out}, std::move(w), true);
  if (bias) bias_ = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight_);
  return bias_.defined() ? add(y, bias_, Broadcast::rows) : y;
}

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_});
  if (bias_.defined()) out.push_back({prefix + ".bias", bias_});
}

}  // namespace mmnet
