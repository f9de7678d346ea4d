#pragma once

// Channel attention and the residual bottleneck blocks built around it.

#include <random>
#include <string>

#include "mmnet/linear.hpp"
#include "mmnet/sparse_ops.hpp"
#include "mmnet/ssm.hpp"

namespace mmnet {

// Squeeze-and-excitation: z = per-item mean, w = sigmoid(W2 relu(W1 z)),
// output = w * x per item. No biases.
class SeLayer {
 public:
  SeLayer() = default;
  SeLayer(std::size_t channels, std::size_t reduction, std::mt19937_64& rng);

  Tensor weights(const sparse::SparseTensor& x) const;  // [batch, channels]
  sparse::SparseTensor forward(const sparse::SparseTensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  Linear fc1_, fc2_;
};

enum class AttentionKind { se, mamba_se };

struct BottleneckConfig {
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t expansion = 4;
  int stride = 1;
  AttentionKind attention = AttentionKind::se;
  std::size_t reduction = 16;
  ssm::MambaOptions mamba;

  std::size_t out_channels() const { return mid_channels * expansion; }
};

// Throws ConfigError naming the violated constraint.
void validate(const BottleneckConfig& cfg);

// 1^3 conv -> norm -> ReLU -> 3^3 conv (stride) -> norm -> ReLU -> 1^3 conv ->
// norm -> attention -> + shortcut -> ReLU. The shortcut is a strided 1^3 conv
// with norm whenever the stride or channel count changes.
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(const BottleneckConfig& cfg, std::mt19937_64& rng);

  sparse::SparseTensor forward(const sparse::SparseTensor& x, sparse::NormMode mode,
                               sparse::KernelMapCache& cache);
  void collect(ParameterList& out, const std::string& prefix) const;
  void collect_buffers(ParameterList& out, const std::string& prefix) const;

  const BottleneckConfig& config() const { return cfg_; }
  bool has_projection() const { return has_projection_; }

  sparse::SparseConv& conv(int i);  // 1..3
  sparse::BatchNorm& norm(int i);   // 1..3
  SeLayer& se() { return se_; }
  ssm::MambaSeLayer& mamba_se() { return mamba_se_; }

 private:
  BottleneckConfig cfg_;
  sparse::SparseConv conv1_, conv2_, conv3_, proj_conv_;
  sparse::BatchNorm bn1_, bn2_, bn3_, proj_bn_;
  bool has_projection_ = false;
  SeLayer se_;
  ssm::MambaSeLayer mamba_se_;
};

}  // namespace mmnet
