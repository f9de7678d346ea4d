#include "mmnet/sparse_ops.hpp"

#include <cmath>
#include <string>

#include "mmnet/errors.hpp"

namespace mmnet::sparse {

SparseTensor sparse_conv(const SparseTensor& x, const ConvWeights& w, const KernelMap& km) {
  if (km.in_rows != x.size() || km.in_stride != x.stride ||
      km.in_fingerprint != coord_fingerprint(x.coords)) {
    throw ContractError("sparse_conv: kernel map was built for different coordinates");
  }
  const auto& ks = w.kernel.shape();
  if (ks.size() != 3 || ks[0] != km.kernel_volume()) {
    throw ShapeError("sparse_conv: kernel " + shape_str(ks) + " does not match a size-" +
                     std::to_string(km.kernel_size) + " kernel map");
  }
  const std::size_t cin = ks[1], cout = ks[2];
  if (x.channels() != cin) {
    throw ShapeError("sparse_conv: input has " + std::to_string(x.channels()) +
                     " channels, kernel expects " + std::to_string(cin));
  }
  if (w.bias.shape() != Shape{cout}) {
    throw ShapeError("sparse_conv: bias " + shape_str(w.bias.shape()) + " for " +
                     std::to_string(cout) + " output channels");
  }

  const std::size_t n_out = km.out_coords.size();
  std::vector<double> out(n_out * cout, 0.0);
  const double* xv = x.feats.values().data();
  const double* kv = w.kernel.values().data();
  for (std::size_t k = 0; k < km.kernel_volume(); ++k) {
    const double* wk = kv + k * cin * cout;
    for (std::size_t t = km.offset_begin[k]; t < km.offset_begin[k + 1]; ++t) {
      const auto& tr = km.triples[t];
      kernels::gemm_acc(1, cin, cout, xv + tr.in_row * cin, wk, out.data() + tr.out_row * cout);
    }
  }
  auto bv = w.bias.values();
  for (std::size_t r = 0; r < n_out; ++r) {
    for (std::size_t j = 0; j < cout; ++j) out[r * cout + j] += bv[j];
  }

  // The map is copied into the closure only when a backward rule is needed.
  const Tensor feats = x.feats, kernel = w.kernel, bias = w.bias;
  OpBackward backward;
  if (Tape::current() && (feats.requires_grad() || kernel.requires_grad() || bias.requires_grad())) {
    backward = [feats, kernel, bias, km_copy = std::make_shared<KernelMap>(km), cin,
                cout](std::span<const double> g) {
      auto gx = grad_sink(feats);
      auto gw = grad_sink(kernel);
      auto gb = grad_sink(bias);
      const double* xv = feats.values().data();
      const double* kv = kernel.values().data();
      for (std::size_t k = 0; k < km_copy->kernel_volume(); ++k) {
        const double* wk = kv + k * cin * cout;
        for (std::size_t t = km_copy->offset_begin[k]; t < km_copy->offset_begin[k + 1]; ++t) {
          const auto& tr = km_copy->triples[t];
          const double* go = g.data() + tr.out_row * cout;
          if (!gx.empty()) kernels::gemm_acc_bt(1, cout, cin, go, wk, gx.data() + tr.in_row * cin);
          if (!gw.empty()) {
            kernels::gemm_acc_at(1, cin, cout, xv + tr.in_row * cin, go,
                                 gw.data() + k * cin * cout);
          }
        }
      }
      if (!gb.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % cout] += g[i];
      }
    };
  }
  Tensor out_feats = make_result({n_out, cout}, std::move(out), {feats, kernel, bias}, backward);

  SparseTensor result;
  result.coords = km.out_coords;
  result.feats = std::move(out_feats);
  result.stride = km.out_stride;
  result.voxel_size = x.voxel_size;
  result.batch_size = x.batch_size;
  return result;
}

Tensor global_avg_pool(const SparseTensor& x) {
  const auto offsets = x.batch_offsets();
  const std::size_t batches = x.batch_size, ch = x.channels();
  for (std::size_t b = 0; b < batches; ++b) {
    if (offsets[b + 1] == offsets[b]) {
      throw DomainError("global_avg_pool: batch item " + std::to_string(b) +
                        " has no coordinates");
    }
  }
  auto xv = x.feats.values();
  std::vector<double> out(batches * ch, 0.0);
  for (std::size_t b = 0; b < batches; ++b) {
    const double inv = 1.0 / static_cast<double>(offsets[b + 1] - offsets[b]);
    for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r) {
      for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] += xv[r * ch + c];
    }
    for (std::size_t c = 0; c < ch; ++c) out[b * ch + c] *= inv;
  }
  const Tensor feats = x.feats;
  return make_result({batches, ch}, std::move(out), {feats},
                     [feats, offsets, batches, ch](std::span<const double> g) {
                       auto gx = grad_sink(feats);
                       for (std::size_t b = 0; b < batches; ++b) {
                         const double inv = 1.0 / static_cast<double>(offsets[b + 1] - offsets[b]);
                         for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r) {
                           for (std::size_t c = 0; c < ch; ++c) {
                             gx[r * ch + c] += g[b * ch + c] * inv;
                           }
                         }
                       }
                     });
}

SparseTensor channel_scale(const SparseTensor& x, const Tensor& w) {
  const std::size_t ch = x.channels();
  if (w.shape() != Shape{x.batch_size, ch}) {
    throw ShapeError("channel_scale: weights " + shape_str(w.shape()) + " for " +
                     std::to_string(x.batch_size) + " items of " + std::to_string(ch) +
                     " channels");
  }
  std::vector<std::size_t> item(x.size());
  for (std::size_t r = 0; r < x.size(); ++r) item[r] = static_cast<std::size_t>(x.coords[r].batch);
  auto xv = x.feats.values();
  auto wv = w.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t c = 0; c < ch; ++c) out[r * ch + c] = xv[r * ch + c] * wv[item[r] * ch + c];
  }
  const Tensor feats = x.feats;
  Tensor scaled = make_result(
      feats.shape(), std::move(out), {feats, w}, [feats, w, item, ch](std::span<const double> g) {
        auto gx = grad_sink(feats);
        auto gw = grad_sink(w);
        auto xv = feats.values();
        auto wv = w.values();
        for (std::size_t r = 0; r < item.size(); ++r) {
          for (std::size_t c = 0; c < ch; ++c) {
            const double gv = g[r * ch + c];
            if (!gx.empty()) gx[r * ch + c] += gv * wv[item[r] * ch + c];
            if (!gw.empty()) gw[item[r] * ch + c] += gv * xv[r * ch + c];
          }
        }
      });
  return x.with_feats(std::move(scaled));
}

SparseTensor sparse_add(const SparseTensor& a, const SparseTensor& b) {
  if (a.stride != b.stride || a.coords != b.coords) {
    throw ContractError("sparse_add: operands live on different coordinates");
  }
  return a.with_feats(add(a.feats, b.feats));
}

SparseTensor sparse_relu(const SparseTensor& x) { return x.with_feats(relu(x.feats)); }

SparseTensor pool_to_coarse(const SparseTensor& fine, const std::vector<Coord>& coarse_coords,
                            int coarse_stride) {
  if (coarse_stride < fine.stride || coarse_stride % fine.stride != 0) {
    throw ContractError("pool_to_coarse: stride " + std::to_string(coarse_stride) +
                        " is not a coarsening of stride " + std::to_string(fine.stride));
  }
  const auto assign = coarse_assignment(fine.coords, coarse_coords, coarse_stride);
  const std::size_t ch = fine.channels(), n_coarse = coarse_coords.size();
  std::vector<double> counts(n_coarse, 0.0);
  std::size_t matched = 0;
  for (auto a : assign) {
    if (a != npos) {
      counts[a] += 1.0;
      ++matched;
    }
  }
  if (matched == 0) {
    throw ContractError("pool_to_coarse: no fine coordinate overlaps the coarse lattice");
  }
  auto fv = fine.feats.values();
  std::vector<double> out(n_coarse * ch, 0.0);
  for (std::size_t r = 0; r < assign.size(); ++r) {
    if (assign[r] == npos) continue;
    for (std::size_t c = 0; c < ch; ++c) out[assign[r] * ch + c] += fv[r * ch + c];
  }
  for (std::size_t r = 0; r < n_coarse; ++r) {
    if (counts[r] == 0.0) continue;
    for (std::size_t c = 0; c < ch; ++c) out[r * ch + c] /= counts[r];
  }
  const Tensor feats = fine.feats;
  Tensor pooled = make_result({n_coarse, ch}, std::move(out), {feats},
                              [feats, assign, counts, ch](std::span<const double> g) {
                                auto gx = grad_sink(feats);
                                for (std::size_t r = 0; r < assign.size(); ++r) {
                                  if (assign[r] == npos) continue;
                                  const double inv = 1.0 / counts[assign[r]];
                                  for (std::size_t c = 0; c < ch; ++c) {
                                    gx[r * ch + c] += g[assign[r] * ch + c] * inv;
                                  }
                                }
                              });
  SparseTensor result;
  result.coords = coarse_coords;
  result.feats = std::move(pooled);
  result.stride = coarse_stride;
  result.voxel_size = fine.voxel_size;
  result.batch_size = fine.batch_size;
  return result;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode,
                  Tensor& running_mean, Tensor& running_var, double momentum, double eps) {
  if (x.rank() != 2) throw ShapeError("batch_norm: expected [rows, channels], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), ch = x.dim(1);
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) {
    throw ShapeError("batch_norm: affine parameters do not match " + std::to_string(ch) +
                     " channels");
  }
  auto xv = x.values();
  std::vector<double> mean(ch, 0.0), inv_std(ch, 0.0);
  if (mode == NormMode::train) {
    if (n == 0) throw DomainError("batch_norm: no active rows in training mode");
    std::vector<double> var(ch, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < ch; ++c) mean[c] += xv[r * ch + c];
    }
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < ch; ++c) {
        const double d = xv[r * ch + c] - mean[c];
        var[c] += d * d;
      }
    }
    auto rm = running_mean.mutable_values();
    auto rv = running_var.mutable_values();
    for (std::size_t c = 0; c < ch; ++c) {
      var[c] /= static_cast<double>(n);
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    auto rm = running_mean.values();
    auto rv = running_var.values();
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }

  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> xhat(n * ch), out(n * ch);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t i = r * ch + c;
      xhat[i] = (xv[i] - mean[c]) * inv_std[c];
      out[i] = gv[c] * xhat[i] + bv[c];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, mode, n, ch, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](std::span<const double> g) {
        auto gx = grad_sink(x);
        auto gg = grad_sink(gamma);
        auto gb = grad_sink(beta);
        auto gv = gamma.values();
        std::vector<double> sum_g(ch, 0.0), sum_gx(ch, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < ch; ++c) {
            sum_g[c] += g[r * ch + c];
            sum_gx[c] += g[r * ch + c] * xhat[r * ch + c];
          }
        }
        if (!gg.empty()) {
          for (std::size_t c = 0; c < ch; ++c) gg[c] += sum_gx[c];
        }
        if (!gb.empty()) {
          for (std::size_t c = 0; c < ch; ++c) gb[c] += sum_g[c];
        }
        if (gx.empty()) return;
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t i = r * ch + c;
            if (mode == NormMode::eval) {
              gx[i] += g[i] * gv[c] * inv_std[c];
            } else {
              gx[i] += gv[c] * inv_std[c] *
                       (g[i] - inv_n * sum_g[c] - xhat[i] * inv_n * sum_gx[c]);
            }
          }
        }
      });
}

std::shared_ptr<const KernelMap> KernelMapCache::get(const SparseTensor& x, int kernel_size,
                                                     int stride) {
  const auto key = std::make_tuple(coord_fingerprint(x.coords), x.stride, kernel_size, stride);
  auto it = maps_.find(key);
  if (it != maps_.end()) return it->second;
  auto km = std::make_shared<const KernelMap>(build_kernel_map(x, kernel_size, stride));
  maps_.emplace(key, km);
  return km;
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev == 0.0 ? 0.0 : dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

SparseConv::SparseConv(std::size_t in_channels, std::size_t out_channels, int kernel_size,
                       int stride, std::mt19937_64& rng)
    : kernel_size_(kernel_size), stride_(stride) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ContractError("kernel size must be odd and positive, got " + std::to_string(kernel_size));
  }
  const std::size_t volume = static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
  const double fan_in = static_cast<double>(volume * in_channels);
  w_.kernel = normal_tensor({volume, in_channels, out_channels}, std::sqrt(2.0 / fan_in), rng);
  w_.bias = Tensor::zeros({out_channels}, true);
}

SparseTensor SparseConv::forward(const SparseTensor& x, KernelMapCache& cache) const {
  return sparse_conv(x, w_, *cache.get(x, kernel_size_, stride_));
}

void SparseConv::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".kernel", w_.kernel});
  out.push_back({prefix + ".bias", w_.bias});
}

BatchNorm::BatchNorm(std::size_t channels, double momentum, double eps)
    : gamma_(Tensor::filled({channels}, 1.0, true)),
      beta_(Tensor::zeros({channels}, true)),
      running_mean_(Tensor::zeros({channels})),
      running_var_(Tensor::filled({channels}, 1.0)),
      momentum_(momentum),
      eps_(eps) {}

SparseTensor BatchNorm::forward(const SparseTensor& x, NormMode mode) {
  return x.with_feats(
      batch_norm(x.feats, gamma_, beta_, mode, running_mean_, running_var_, momentum_, eps_));
}

void BatchNorm::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_});
  out.push_back({prefix + ".beta", beta_});
}

void BatchNorm::collect_buffers(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".running_mean", running_mean_});
  out.push_back({prefix + ".running_var", running_var_});
}

}  // namespace mmnet::sparse
