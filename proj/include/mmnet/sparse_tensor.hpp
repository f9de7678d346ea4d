#pragma once

// Coordinate-sparse tensors over a 3-D integer lattice with a batch index.
//
// Coordinates are stored in canonical ascending (batch, x, y, z) order and are
// expressed in units of the finest voxel, so a tensor with stride s only has
// coordinates that are multiples of s.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mmnet/tensor.hpp"

namespace mmnet::sparse {

struct Coord {
  std::int32_t batch = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  auto operator<=>(const Coord&) const = default;
};

struct CoordHash {
  std::size_t operator()(const Coord& c) const noexcept;
};

struct SparseTensor {
  std::vector<Coord> coords;
  Tensor feats;  // [coords.size(), channels]
  int stride = 1;
  double voxel_size = 0.5;
  std::size_t batch_size = 0;

  std::size_t size() const { return coords.size(); }
  std::size_t channels() const { return feats.dim(1); }

  // Same coordinates and lattice, new features.
  SparseTensor with_feats(Tensor new_feats) const;

  // offsets[b]..offsets[b+1] are the rows of batch item b.
  std::vector<std::size_t> batch_offsets() const;
};

// Throws ContractError when a SparseTensor invariant does not hold.
void validate(const SparseTensor& t);

// Order-sensitive 64-bit digest of a coordinate list.
std::uint64_t coord_fingerprint(std::span<const Coord> coords);

// Points to be voxelized: position, batch item, and a feature row each.
struct PointCloud {
  std::size_t channels = 0;
  std::vector<std::int32_t> batch;
  std::vector<std::array<double, 3>> xyz;
  std::vector<double> features;  // size() * channels

  std::size_t size() const { return xyz.size(); }
  void add(std::int32_t b, std::array<double, 3> p, std::span<const double> feature_row);
};

struct Quantized {
  SparseTensor tensor;
  std::vector<std::size_t> counts;  // points merged into each voxel
};

// Voxel coordinate = floor(position / voxel_size) per axis. Points sharing a
// voxel are merged by the arithmetic mean of their feature rows. The mean is
// evaluated over identical rows grouped with multiplicities in sorted order,
// so the result does not depend on input order and is unchanged when every
// point is duplicated.
Quantized quantize_counted(const PointCloud& points, double voxel_size);
SparseTensor quantize(const PointCloud& points, double voxel_size);

// unique(floor(c / (stride * old_stride)) * stride * old_stride); stride 1 is
// the identity (up to canonical ordering).
std::vector<Coord> stride_downsample_coords(std::span<const Coord> coords, int old_stride,
                                            int stride);

struct KernelTriple {
  std::uint32_t in_row = 0;
  std::uint32_t out_row = 0;
  std::uint32_t offset = 0;

  auto operator<=>(const KernelTriple&) const = default;
};

struct KernelMap {
  int kernel_size = 1;
  int conv_stride = 1;
  int in_stride = 1;
  int out_stride = 1;
  std::size_t in_rows = 0;
  std::uint64_t in_fingerprint = 0;
  std::vector<Coord> out_coords;
  // Sorted by (offset, out_row); offset_begin[k]..offset_begin[k+1] holds the
  // triples of kernel offset k.
  std::vector<KernelTriple> triples;
  std::vector<std::size_t> offset_begin;

  std::size_t kernel_volume() const {
    return static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
  }
};

// Offsets run over [-(k-1)/2, (k-1)/2]^3, x slowest; the centre has index
// (k^3 - 1) / 2 and offset -d has index k^3 - 1 - index(d).
std::uint32_t offset_index(int dx, int dy, int dz, int kernel_size);
std::array<int, 3> offset_vector(std::uint32_t index, int kernel_size);

// Output coordinates are the input coordinates (stride 1) or their stride
// downsampling. Triple (r_in, r_out, idx(d)) is listed iff
// coord(r_out) + d * in_stride == coord(r_in).
KernelMap build_kernel_map(std::span<const Coord> in_coords, int in_stride, int kernel_size,
                           int stride);
KernelMap build_kernel_map(const SparseTensor& in, int kernel_size, int stride);

// For each fine row, the coarse row whose cell contains it, or npos when the
// coarse set has no such cell.
inline constexpr std::size_t npos = static_cast<std::size_t>(-1);
std::vector<std::size_t> coarse_assignment(std::span<const Coord> fine, std::span<const Coord> coarse,
                                           int coarse_stride);

}  // namespace mmnet::sparse
