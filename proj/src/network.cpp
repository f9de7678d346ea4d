#include "mmnet/network.hpp"

#include <numeric>
#include <random>
#include <sstream>

#include "mmnet/errors.hpp"

namespace mmnet {

using sparse::NormMode;
using sparse::SparseTensor;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::mmb_only: return "mmb_only";
    case Variant::ffm_only: return "ffm_only";
    case Variant::plain: return "plain";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "mmb_only") return Variant::mmb_only;
  if (s == "ffm_only") return Variant::ffm_only;
  if (s == "plain") return Variant::plain;
  throw ConfigError("unknown variant '" + s + "' (expected full, mmb_only, ffm_only or plain)");
}

void validate(const NetworkConfig& cfg) {
  std::vector<std::string> problems;
  if (cfg.depths.size() != 4) {
    problems.push_back("depths must list 4 stages, got " + std::to_string(cfg.depths.size()));
  } else {
    const std::size_t total = std::accumulate(cfg.depths.begin(), cfg.depths.end(), std::size_t{0});
    if (total != 16) problems.push_back("depths must sum to 16 blocks, got " + std::to_string(total));
    for (auto d : cfg.depths) {
      if (d == 0) problems.push_back("every stage needs at least one block");
    }
  }
  if (cfg.widths.size() != 4) {
    problems.push_back("widths must list 4 stages, got " + std::to_string(cfg.widths.size()));
  }
  for (auto w : cfg.widths) {
    if (w == 0) {
      problems.push_back("stage widths must be positive");
    } else if (cfg.se_reduction == 0 || (w * cfg.expansion) % cfg.se_reduction != 0) {
      problems.push_back("stage output channels " + std::to_string(w * cfg.expansion) +
                         " not divisible by se_reduction " + std::to_string(cfg.se_reduction));
    }
  }
  if (cfg.stem_channels == 0) problems.push_back("stem_channels must be positive");
  if (cfg.stem_stride != 1 && cfg.stem_stride != 2) problems.push_back("stem_stride must be 1 or 2");
  if (cfg.expansion == 0) problems.push_back("expansion must be positive");
  if (cfg.head_hidden == 0) problems.push_back("head_hidden must be positive");
  if (cfg.n_outputs == 0) problems.push_back("n_outputs must be positive");
  if (!(cfg.voxel_size > 0.0)) problems.push_back("voxel_size must be positive");
  if (!(cfg.height_scale > 0.0)) problems.push_back("height_scale must be positive");
  if (cfg.mamba.state_dim == 0 || cfg.mamba.expand == 0 || cfg.mamba.conv_width == 0) {
    problems.push_back("mamba sizes must be positive");
  }
  if (!problems.empty()) {
    std::string msg = "invalid network config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

SparseTensor voxelize(const data::PlotSample& sample, const NetworkConfig& cfg) {
  const bool with_i = cfg.use_intensity;
  if (with_i && sample.intensity.size() != sample.xyz.size()) {
    throw IngestionError("plot " + sample.plot_id + " has no intensity values");
  }
  sparse::PointCloud cloud;
  cloud.channels = with_i ? 3 : 2;
  std::vector<double> row(cloud.channels);
  for (std::size_t i = 0; i < sample.xyz.size(); ++i) {
    row[0] = 1.0;
    row[1] = sample.xyz[i][2] / cfg.height_scale;
    if (with_i) row[2] = sample.intensity[i];
    cloud.add(0, sample.xyz[i], row);
  }
  auto q = sparse::quantize_counted(cloud, cfg.voxel_size);
  const std::size_t n = q.tensor.size(), in_ch = cfg.in_channels();
  const double mean_count =
      n ? static_cast<double>(sample.xyz.size()) / static_cast<double>(n) : 1.0;
  auto src = q.tensor.feats.values();
  std::vector<double> feats(n * in_ch);
  for (std::size_t r = 0; r < n; ++r) {
    feats[r * in_ch + 0] = src[r * cloud.channels + 0];
    feats[r * in_ch + 1] = src[r * cloud.channels + 1];
    feats[r * in_ch + 2] = static_cast<double>(q.counts[r]) / mean_count;
    if (with_i) feats[r * in_ch + 3] = src[r * cloud.channels + 2];
  }
  SparseTensor t = std::move(q.tensor);
  t.feats = Tensor({n, in_ch}, std::move(feats));
  t.batch_size = 1;
  return t;
}

SparseTensor collate(const std::vector<SparseTensor>& items) {
  if (items.empty()) throw ContractError("collate: no items");
  SparseTensor out;
  out.stride = items.front().stride;
  out.voxel_size = items.front().voxel_size;
  out.batch_size = items.size();
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.stride != out.stride || it.voxel_size != out.voxel_size) {
      throw ContractError("collate: items live on different lattices");
    }
    if (it.channels() != items.front().channels()) {
      throw ShapeError("collate: items have different channel counts");
    }
    for (auto c : it.coords) {
      if (c.batch != 0) throw ContractError("collate: expected single-item tensors");
      c.batch = static_cast<std::int32_t>(i);
      out.coords.push_back(c);
    }
    parts.push_back(it.feats);
  }
  out.feats = concat_rows(parts);
  return out;
}

std::string Audit::summary() const {
  std::ostringstream s;
  s << "blocks=" << blocks.size() << " mamba_se=" << mamba_positions.size() << " at [";
  for (std::size_t i = 0; i < mamba_positions.size(); ++i) s << (i ? "," : "") << mamba_positions[i];
  s << "]";
  return s.str();
}

Network::Network(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  stem1_ = sparse::SparseConv(cfg.in_channels(), cfg.stem_channels, 3, cfg.stem_stride, rng);
  stem_bn1_ = sparse::BatchNorm(cfg.stem_channels);
  stem2_ = sparse::SparseConv(cfg.stem_channels, cfg.stem_channels, 3, 1, rng);
  stem_bn2_ = sparse::BatchNorm(cfg.stem_channels);

  std::size_t in = cfg.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      BottleneckConfig bc;
      bc.in_channels = in;
      bc.mid_channels = cfg.widths[s];
      bc.expansion = cfg.expansion;
      bc.stride = (s > 0 && b == 0) ? 2 : 1;
      const bool last = b + 1 == cfg.depths[s];
      bc.attention = (last && cfg.uses_mamba()) ? AttentionKind::mamba_se : AttentionKind::se;
      bc.reduction = cfg.se_reduction;
      bc.mamba = cfg.mamba;
      blocks_.emplace_back(bc, rng);
      in = bc.out_channels();
    }
    stage_end_.push_back(blocks_.size());
  }
  if (cfg.uses_fusion()) {
    fuse_conv_ = sparse::SparseConv(cfg.widths[2] * cfg.expansion, cfg.widths[3] * cfg.expansion,
                                    1, 1, rng);
    fuse_bn_ = sparse::BatchNorm(cfg.widths[3] * cfg.expansion);
  }
  head1_ = Linear(in, cfg.head_hidden, true, rng);
  head2_ = Linear(cfg.head_hidden, cfg.n_outputs, true, rng);
}

Tensor Network::forward(const SparseTensor& x, NormMode mode) {
  if (x.channels() != cfg_.in_channels()) {
    throw ShapeError("network expects " + std::to_string(cfg_.in_channels()) +
                     " input channels, got " + std::to_string(x.channels()));
  }
  sparse::KernelMapCache cache;
  SparseTensor h = sparse::sparse_relu(stem_bn1_.forward(stem1_.forward(x, cache), mode));
  h = sparse::sparse_relu(stem_bn2_.forward(stem2_.forward(h, cache), mode));
  SparseTensor skip;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i].forward(h, mode, cache);
    if (i + 1 == stage_end_[2]) skip = h;
  }
  if (cfg_.uses_fusion()) {
    const SparseTensor aligned = fuse_bn_.forward(fuse_conv_.forward(skip, cache), mode);
    h = sparse::sparse_add(h, sparse::pool_to_coarse(aligned, h.coords, h.stride));
  }
  return head2_.forward(relu(head1_.forward(sparse::global_avg_pool(h))));
}

ParameterList Network::parameters() const {
  ParameterList out;
  stem1_.collect(out, "stem.conv1");
  stem_bn1_.collect(out, "stem.bn1");
  stem2_.collect(out, "stem.conv2");
  stem_bn2_.collect(out, "stem.bn2");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, "block" + std::to_string(i + 1));
  }
  if (cfg_.uses_fusion()) {
    fuse_conv_.collect(out, "fusion.conv");
    fuse_bn_.collect(out, "fusion.bn");
  }
  head1_.collect(out, "head.fc1");
  head2_.collect(out, "head.fc2");
  return out;
}

ParameterList Network::buffers() const {
  ParameterList out;
  stem_bn1_.collect_buffers(out, "stem.bn1");
  stem_bn2_.collect_buffers(out, "stem.bn2");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect_buffers(out, "block" + std::to_string(i + 1));
  }
  if (cfg_.uses_fusion()) fuse_bn_.collect_buffers(out, "fusion.bn");
  return out;
}

ParameterList Network::state() const {
  ParameterList out = parameters();
  for (auto& b : buffers()) out.push_back(std::move(b));
  return out;
}

Audit Network::audit() const {
  Audit a;
  std::size_t stage = 0;
  int stride = cfg_.stem_stride;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    while (i >= stage_end_[stage]) ++stage;
    const auto& bc = blocks_[i].config();
    BlockInfo info;
    info.position = i + 1;
    info.stage = stage + 1;
    info.attention = bc.attention;
    info.stride = bc.stride;
    info.in_channels = bc.in_channels;
    info.out_channels = bc.out_channels();
    if (bc.attention == AttentionKind::mamba_se) a.mamba_positions.push_back(i + 1);
    if (bc.stride == 2) ++a.stride_transitions;
    stride *= bc.stride;
    a.blocks.push_back(info);
  }
  a.deepest_stride = stride;
  a.fusion = cfg_.uses_fusion();
  a.parameter_count = parameter_count(parameters());
  return a;
}

}  // namespace mmnet
