#pragma once

// Sparse residual backbone with Mamba channel attention, stage-3 to stage-4
// feature fusion, and a pooled regression head.

#include <cstdint>
#include <string>
#include <vector>

#include "mmnet/attention.hpp"
#include "mmnet/data.hpp"

namespace mmnet {

enum class Variant {
  full,      // Mamba attention at the last block of each stage, fusion on
  mmb_only,  // Mamba attention, no fusion
  ffm_only,  // SE attention everywhere, fusion on
  plain,     // SE attention everywhere, no fusion
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);  // ConfigError on unknown names

struct NetworkConfig {
  std::size_t stem_channels = 32;
  int stem_stride = 1;
  std::vector<std::size_t> widths{32, 64, 128, 256};  // bottleneck mid channels
  std::vector<std::size_t> depths{3, 4, 6, 3};
  std::size_t expansion = 4;
  std::size_t se_reduction = 16;
  ssm::MambaOptions mamba;
  Variant variant = Variant::full;
  std::size_t head_hidden = 64;
  std::size_t n_outputs = 1;

  // Voxel input features: occupancy, mean height / height_scale, points in the
  // voxel relative to the sample's mean count, and optionally mean intensity.
  double voxel_size = 0.5;
  double height_scale = 10.0;
  bool use_intensity = false;

  std::size_t in_channels() const { return use_intensity ? 4 : 3; }
  bool uses_mamba() const { return variant == Variant::full || variant == Variant::mmb_only; }
  bool uses_fusion() const { return variant == Variant::full || variant == Variant::ffm_only; }
};

// Throws ConfigError listing every violated constraint.
void validate(const NetworkConfig& cfg);

// Sample points (already preprocessed) to a batch-0 sparse tensor.
sparse::SparseTensor voxelize(const data::PlotSample& sample, const NetworkConfig& cfg);

// Concatenates single-item tensors into one batch, item i getting index i.
sparse::SparseTensor collate(const std::vector<sparse::SparseTensor>& items);

struct BlockInfo {
  std::size_t position = 0;  // 1-based over all stages
  std::size_t stage = 0;     // 1-based
  AttentionKind attention = AttentionKind::se;
  int stride = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
};

struct Audit {
  std::vector<BlockInfo> blocks;
  std::vector<std::size_t> mamba_positions;
  std::size_t stride_transitions = 0;
  int deepest_stride = 1;
  bool fusion = false;
  std::size_t parameter_count = 0;

  // "blocks=16 mamba_se=4 at [3,7,13,16]"
  std::string summary() const;
};

class Network {
 public:
  Network(const NetworkConfig& cfg, std::uint64_t seed);

  // [batch, n_outputs]
  Tensor forward(const sparse::SparseTensor& x, sparse::NormMode mode);

  ParameterList parameters() const;
  ParameterList buffers() const;
  // Parameters followed by buffers; what a checkpoint stores.
  ParameterList state() const;

  Audit audit() const;
  const NetworkConfig& config() const { return cfg_; }

  std::vector<Bottleneck>& blocks() { return blocks_; }
  sparse::SparseConv& fusion_conv() { return fuse_conv_; }

 private:
  NetworkConfig cfg_;
  sparse::SparseConv stem1_, stem2_;
  sparse::BatchNorm stem_bn1_, stem_bn2_;
  std::vector<Bottleneck> blocks_;
  std::vector<std::size_t> stage_end_;  // index one past the last block of each stage
  sparse::SparseConv fuse_conv_;
  sparse::BatchNorm fuse_bn_;
  Linear head1_, head2_;
};

}  // namespace mmnet
