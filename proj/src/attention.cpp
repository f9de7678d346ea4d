#include "mmnet/attention.hpp"

#include <string>

#include "mmnet/errors.hpp"

namespace mmnet {

using sparse::NormMode;
using sparse::SparseTensor;

SeLayer::SeLayer(std::size_t channels, std::size_t reduction, std::mt19937_64& rng) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("channel count " + std::to_string(channels) +
                      " is not divisible by reduction " + std::to_string(reduction));
  }
  fc1_ = Linear(channels, channels / reduction, false, rng);
  fc2_ = Linear(channels / reduction, channels, false, rng);
}

Tensor SeLayer::weights(const SparseTensor& x) const {
  return sigmoid(fc2_.forward(relu(fc1_.forward(sparse::global_avg_pool(x)))));
}

SparseTensor SeLayer::forward(const SparseTensor& x) const {
  return sparse::channel_scale(x, weights(x));
}

void SeLayer::collect(ParameterList& out, const std::string& prefix) const {
  fc1_.collect(out, prefix + ".fc1");
  fc2_.collect(out, prefix + ".fc2");
}

void validate(const BottleneckConfig& cfg) {
  if (cfg.in_channels == 0 || cfg.mid_channels == 0 || cfg.expansion == 0) {
    throw ConfigError("bottleneck channel counts and expansion must be positive");
  }
  if (cfg.stride != 1 && cfg.stride != 2) {
    throw ConfigError("bottleneck stride must be 1 or 2, got " + std::to_string(cfg.stride));
  }
  if (cfg.reduction == 0 || cfg.out_channels() % cfg.reduction != 0) {
    throw ConfigError("bottleneck output channels " + std::to_string(cfg.out_channels()) +
                      " not divisible by reduction " + std::to_string(cfg.reduction));
  }
}

Bottleneck::Bottleneck(const BottleneckConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  validate(cfg);
  const std::size_t mid = cfg.mid_channels, out = cfg.out_channels();
  conv1_ = sparse::SparseConv(cfg.in_channels, mid, 1, 1, rng);
  bn1_ = sparse::BatchNorm(mid);
  conv2_ = sparse::SparseConv(mid, mid, 3, cfg.stride, rng);
  bn2_ = sparse::BatchNorm(mid);
  conv3_ = sparse::SparseConv(mid, out, 1, 1, rng);
  bn3_ = sparse::BatchNorm(out);
  has_projection_ = cfg.stride != 1 || cfg.in_channels != out;
  if (has_projection_) {
    proj_conv_ = sparse::SparseConv(cfg.in_channels, out, 1, cfg.stride, rng);
    proj_bn_ = sparse::BatchNorm(out);
  }
  if (cfg.attention == AttentionKind::se) {
    se_ = SeLayer(out, cfg.reduction, rng);
  } else {
    mamba_se_ = ssm::MambaSeLayer(out, cfg.reduction, cfg.mamba, rng);
  }
}

SparseTensor Bottleneck::forward(const SparseTensor& x, NormMode mode,
                                 sparse::KernelMapCache& cache) {
  SparseTensor h = sparse::sparse_relu(bn1_.forward(conv1_.forward(x, cache), mode));
  h = sparse::sparse_relu(bn2_.forward(conv2_.forward(h, cache), mode));
  h = bn3_.forward(conv3_.forward(h, cache), mode);
  if (cfg_.attention == AttentionKind::se) {
    h = se_.forward(h);
  } else {
    h = sparse::channel_scale(h, mamba_se_.weights(h));
  }
  const SparseTensor shortcut =
      has_projection_ ? proj_bn_.forward(proj_conv_.forward(x, cache), mode) : x;
  return sparse::sparse_relu(sparse::sparse_add(h, shortcut));
}

void Bottleneck::collect(ParameterList& out, const std::string& prefix) const {
  conv1_.collect(out, prefix + ".conv1");
  bn1_.collect(out, prefix + ".bn1");
  conv2_.collect(out, prefix + ".conv2");
  bn2_.collect(out, prefix + ".bn2");
  conv3_.collect(out, prefix + ".conv3");
  bn3_.collect(out, prefix + ".bn3");
  if (cfg_.attention == AttentionKind::se) {
    se_.collect(out, prefix + ".se");
  } else {
    mamba_se_.collect(out, prefix + ".mamba_se");
  }
  if (has_projection_) {
    proj_conv_.collect(out, prefix + ".proj_conv");
    proj_bn_.collect(out, prefix + ".proj_bn");
  }
}

void Bottleneck::collect_buffers(ParameterList& out, const std::string& prefix) const {
  bn1_.collect_buffers(out, prefix + ".bn1");
  bn2_.collect_buffers(out, prefix + ".bn2");
  bn3_.collect_buffers(out, prefix + ".bn3");
  if (has_projection_) proj_bn_.collect_buffers(out, prefix + ".proj_bn");
}

sparse::SparseConv& Bottleneck::conv(int i) {
  switch (i) {
    case 1: return conv1_;
    case 2: return conv2_;
    case 3: return conv3_;
    default: throw ContractError("bottleneck has convolutions 1..3");
  }
}

sparse::BatchNorm& Bottleneck::norm(int i) {
  switch (i) {
    case 1: return bn1_;
    case 2: return bn2_;
    case 3: return bn3_;
    default: throw ContractError("bottleneck has norms 1..3");
  }
}

}  // namespace mmnet
