#include "mmnet/sparse_tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>

#include "mmnet/errors.hpp"

namespace mmnet::sparse {

namespace {

std::int32_t floor_div(std::int32_t a, std::int32_t s) {
  std::int32_t q = a / s;
  if ((a % s != 0) && ((a < 0) != (s < 0))) --q;
  return q;
}

Coord snap(const Coord& c, std::int32_t cell) {
  return {c.batch, floor_div(c.x, cell) * cell, floor_div(c.y, cell) * cell,
          floor_div(c.z, cell) * cell};
}

using CoordIndex = std::unordered_map<Coord, std::uint32_t, CoordHash>;

CoordIndex index_coords(std::span<const Coord> coords) {
  CoordIndex index;
  index.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    index.emplace(coords[i], static_cast<std::uint32_t>(i));
  }
  return index;
}

}  // namespace

std::size_t CoordHash::operator()(const Coord& c) const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::int32_t v : {c.batch, c.x, c.y, c.z}) {
    h ^= static_cast<std::uint32_t>(v);
    h *= 0x100000001b3ULL;
    h ^= h >> 29;
  }
  return static_cast<std::size_t>(h);
}

SparseTensor SparseTensor::with_feats(Tensor new_feats) const {
  if (new_feats.rank() != 2 || new_feats.dim(0) != coords.size()) {
    throw ShapeError("sparse tensor with " + std::to_string(coords.size()) +
                     " coordinates cannot take features " + shape_str(new_feats.shape()));
  }
  SparseTensor out;
  out.coords = coords;
  out.feats = std::move(new_feats);
  out.stride = stride;
  out.voxel_size = voxel_size;
  out.batch_size = batch_size;
  return out;
}

std::vector<std::size_t> SparseTensor::batch_offsets() const {
  std::vector<std::size_t> offsets(batch_size + 1, 0);
  for (const auto& c : coords) {
    if (c.batch < 0 || static_cast<std::size_t>(c.batch) >= batch_size) {
      throw ContractError("coordinate batch index " + std::to_string(c.batch) +
                          " outside batch of size " + std::to_string(batch_size));
    }
    ++offsets[static_cast<std::size_t>(c.batch) + 1];
  }
  std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
  return offsets;
}

void validate(const SparseTensor& t) {
  if (t.stride < 1) throw ContractError("sparse tensor stride must be positive");
  if (!t.feats.defined() || t.feats.rank() != 2 || t.feats.dim(0) != t.coords.size()) {
    throw ContractError("sparse tensor feature rows do not match its coordinates");
  }
  for (std::size_t i = 0; i < t.coords.size(); ++i) {
    const auto& c = t.coords[i];
    if (c.x % t.stride || c.y % t.stride || c.z % t.stride) {
      throw ContractError("coordinate not on the stride-" + std::to_string(t.stride) +
                          " lattice at row " + std::to_string(i));
    }
    if (i && !(t.coords[i - 1] < c)) {
      throw ContractError("coordinates not unique and sorted at row " + std::to_string(i));
    }
  }
  t.batch_offsets();
}

std::uint64_t coord_fingerprint(std::span<const Coord> coords) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL ^ coords.size();
  for (const auto& c : coords) {
    h = (h ^ CoordHash{}(c)) * 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 31;
  }
  return h;
}

void PointCloud::add(std::int32_t b, std::array<double, 3> p, std::span<const double> feature_row) {
  if (feature_row.size() != channels) {
    throw ShapeError("point feature row has " + std::to_string(feature_row.size()) +
                     " values, cloud expects " + std::to_string(channels));
  }
  batch.push_back(b);
  xyz.push_back(p);
  features.insert(features.end(), feature_row.begin(), feature_row.end());
}

Quantized quantize_counted(const PointCloud& points, double voxel_size) {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) {
    throw ContractError("quantize: voxel size must be positive and finite");
  }
  const std::size_t n = points.size();
  const std::size_t ch = points.channels;
  if (points.batch.size() != n || points.features.size() != n * ch) {
    throw ShapeError("quantize: point cloud arrays have inconsistent lengths");
  }

  std::vector<Coord> voxel(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<std::int32_t, 3> q{};
    for (int a = 0; a < 3; ++a) {
      const double p = points.xyz[i][a];
      if (!std::isfinite(p)) {
        throw IngestionError("quantize: non-finite coordinate at point " + std::to_string(i));
      }
      const double f = std::floor(p / voxel_size);
      if (std::abs(f) > static_cast<double>(std::numeric_limits<std::int32_t>::max() / 2)) {
        throw IngestionError("quantize: coordinate out of lattice range at point " +
                             std::to_string(i));
      }
      q[a] = static_cast<std::int32_t>(f);
    }
    voxel[i] = {points.batch[i], q[0], q[1], q[2]};
  }

  auto row = [&](std::size_t i) { return points.features.data() + i * ch; };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (voxel[a] != voxel[b]) return voxel[a] < voxel[b];
    return std::lexicographical_compare(row(a), row(a) + ch, row(b), row(b) + ch);
  });

  Quantized out;
  SparseTensor& t = out.tensor;
  t.stride = 1;
  t.voxel_size = voxel_size;
  std::vector<double> feats;
  std::vector<double> sum(ch);
  std::int32_t max_batch = -1;
  for (std::size_t i = 0; i < n;) {
    const Coord c = voxel[order[i]];
    std::fill(sum.begin(), sum.end(), 0.0);
    std::size_t count = 0;
    while (i < n && voxel[order[i]] == c) {
      // Run of identical feature rows inside this voxel.
      std::size_t j = i + 1;
      while (j < n && voxel[order[j]] == c &&
             std::equal(row(order[i]), row(order[i]) + ch, row(order[j]))) {
        ++j;
      }
      const double mult = static_cast<double>(j - i);
      for (std::size_t k = 0; k < ch; ++k) sum[k] += row(order[i])[k] * mult;
      count += j - i;
      i = j;
    }
    t.coords.push_back(c);
    for (std::size_t k = 0; k < ch; ++k) feats.push_back(sum[k] / static_cast<double>(count));
    out.counts.push_back(count);
    max_batch = std::max(max_batch, c.batch);
  }
  t.batch_size = static_cast<std::size_t>(max_batch + 1);
  t.feats = Tensor({t.coords.size(), ch}, std::move(feats));
  return out;
}

SparseTensor quantize(const PointCloud& points, double voxel_size) {
  return quantize_counted(points, voxel_size).tensor;
}

std::vector<Coord> stride_downsample_coords(std::span<const Coord> coords, int old_stride,
                                            int stride) {
  if (old_stride < 1 || stride < 1) throw ContractError("strides must be positive");
  const std::int32_t cell = old_stride * stride;
  std::vector<Coord> out;
  out.reserve(coords.size());
  for (const auto& c : coords) out.push_back(snap(c, cell));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::uint32_t offset_index(int dx, int dy, int dz, int kernel_size) {
  const int h = (kernel_size - 1) / 2;
  return static_cast<std::uint32_t>(((dx + h) * kernel_size + (dy + h)) * kernel_size + (dz + h));
}

std::array<int, 3> offset_vector(std::uint32_t index, int kernel_size) {
  const int h = (kernel_size - 1) / 2;
  const int k = kernel_size;
  const int i = static_cast<int>(index);
  return {i / (k * k) - h, (i / k) % k - h, i % k - h};
}

KernelMap build_kernel_map(std::span<const Coord> in_coords, int in_stride, int kernel_size,
                           int stride) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ContractError("kernel size must be odd and positive, got " +
                        std::to_string(kernel_size));
  }
  if (stride != 1 && stride != 2) {
    throw ContractError("convolution stride must be 1 or 2, got " + std::to_string(stride));
  }
  KernelMap km;
  km.kernel_size = kernel_size;
  km.conv_stride = stride;
  km.in_stride = in_stride;
  km.out_stride = in_stride * stride;
  km.in_rows = in_coords.size();
  km.in_fingerprint = coord_fingerprint(in_coords);
  if (stride == 1) {
    km.out_coords.assign(in_coords.begin(), in_coords.end());
  } else {
    km.out_coords = stride_downsample_coords(in_coords, in_stride, stride);
  }

  const auto index = index_coords(in_coords);
  const std::size_t volume = km.kernel_volume();
  km.offset_begin.assign(volume + 1, 0);
  for (std::uint32_t k = 0; k < volume; ++k) {
    km.offset_begin[k] = km.triples.size();
    const auto d = offset_vector(k, kernel_size);
    for (std::size_t r = 0; r < km.out_coords.size(); ++r) {
      const Coord& u = km.out_coords[r];
      const Coord probe{u.batch, u.x + d[0] * in_stride, u.y + d[1] * in_stride,
                        u.z + d[2] * in_stride};
      if (auto it = index.find(probe); it != index.end()) {
        km.triples.push_back({it->second, static_cast<std::uint32_t>(r), k});
      }
    }
  }
  km.offset_begin[volume] = km.triples.size();
  return km;
}

KernelMap build_kernel_map(const SparseTensor& in, int kernel_size, int stride) {
  return build_kernel_map(in.coords, in.stride, kernel_size, stride);
}

std::vector<std::size_t> coarse_assignment(std::span<const Coord> fine, std::span<const Coord> coarse,
                                           int coarse_stride) {
  const auto index = index_coords(coarse);
  std::vector<std::size_t> out(fine.size(), npos);
  for (std::size_t i = 0; i < fine.size(); ++i) {
    if (auto it = index.find(snap(fine[i], coarse_stride)); it != index.end()) out[i] = it->second;
  }
  return out;
}

}  // namespace mmnet::sparse
