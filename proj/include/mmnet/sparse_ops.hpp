#pragma once

#include <map>
#include <memory>
#include <random>
#include <string>
#include <tuple>

#include "mmnet/optim.hpp"
#include "mmnet/sparse_tensor.hpp"

namespace mmnet::sparse {

struct ConvWeights {
  Tensor kernel;  // [kernel_size^3, in_channels, out_channels]
  Tensor bias;    // [out_channels]

  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t out_channels() const { return kernel.dim(2); }
};

// out[r_out] = sum over triples (r_in, r_out, k) of feats[r_in] * kernel[k],
// plus bias; offsets are accumulated in ascending order for every row.
// Throws ContractError when `km` was built for other coordinates.
SparseTensor sparse_conv(const SparseTensor& x, const ConvWeights& w, const KernelMap& km);

// Per-batch-item mean of the feature rows, shape [batch_size, channels].
// Throws DomainError naming the first batch item with no coordinates.
Tensor global_avg_pool(const SparseTensor& x);

// Scales row r by w[batch(r)]; w has shape [batch_size, channels].
SparseTensor channel_scale(const SparseTensor& x, const Tensor& w);

// Element-wise sum of two tensors on the same coordinates.
SparseTensor sparse_add(const SparseTensor& a, const SparseTensor& b);
SparseTensor sparse_relu(const SparseTensor& x);

// Averages the rows of `fine` onto the coarser lattice given by
// `coarse_coords` (stride `coarse_stride`). Coarse rows receiving nothing are
// zero. Throws ContractError when no fine row lands on a coarse coordinate.
SparseTensor pool_to_coarse(const SparseTensor& fine, const std::vector<Coord>& coarse_coords,
                            int coarse_stride);

enum class NormMode {
  train,  // normalise with the statistics of the rows at hand and update the
          // running estimates
  eval,   // fixed affine map from the running estimates
};

// Per-channel standardisation over all active rows, then gamma * x + beta.
// Variances are biased (divide by N); eps guards constant channels.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode,
                  Tensor& running_mean, Tensor& running_var, double momentum, double eps);

// Kernel maps of one forward pass, shared by every layer that convolves the
// same coordinates.
class KernelMapCache {
 public:
  std::shared_ptr<const KernelMap> get(const SparseTensor& x, int kernel_size, int stride);
  std::size_t size() const { return maps_.size(); }

 private:
  std::map<std::tuple<std::uint64_t, int, int, int>, std::shared_ptr<const KernelMap>> maps_;
};

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = true);

class SparseConv {
 public:
  SparseConv() = default;
  // He-normal kernel, zero bias.
  SparseConv(std::size_t in_channels, std::size_t out_channels, int kernel_size, int stride,
             std::mt19937_64& rng);

  SparseTensor forward(const SparseTensor& x, KernelMapCache& cache) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  int kernel_size() const { return kernel_size_; }
  int stride() const { return stride_; }
  ConvWeights& weights() { return w_; }
  const ConvWeights& weights() const { return w_; }

 private:
  ConvWeights w_;
  int kernel_size_ = 1;
  int stride_ = 1;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  SparseTensor forward(const SparseTensor& x, NormMode mode);
  void collect(ParameterList& out, const std::string& prefix) const;
  void collect_buffers(ParameterList& out, const std::string& prefix) const;

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

}  // namespace mmnet::sparse
