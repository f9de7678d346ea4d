#pragma once

// Diagonal state-space scans, the Mamba block, and the channel recalibration
// that runs a Mamba block over each point set laid out on a square grid.

#include <random>
#include <string>
#include <vector>

#include "mmnet/linear.hpp"
#include "mmnet/sparse_tensor.hpp"

namespace mmnet::ssm {

// Fixed-parameter scan, one independent diagonal system per channel c:
//   h_t = Abar[c] * h_{t-1} + Bbar[c] * x[t, c]
//   y[t, c] = sum_n Cm[c, n] h_t[n] + D[c] * x[t, c]
// Abar, Bbar, Cm have shape [C, N]; D has shape [C]; h0 is [C, N] or
// undefined (zero). Throws NumericError for non-finite parameters.
Tensor lti_scan(const Tensor& x, const Tensor& abar, const Tensor& bbar, const Tensor& cm,
                const Tensor& d, const Tensor& h0 = {});

// Input-dependent scan with zero-order-hold discretisation of diagonal A:
//   h_t[e, n] = exp(delta[t, e] A[e, n]) h_{t-1}[e, n] + delta[t, e] B[t, n] u[t, e]
//   y[t, e] = sum_n C[t, n] h_t[e, n] + D[e] u[t, e]
// u, delta: [T, E] (delta > 0); A: [E, N]; B, C: [T, N]; D: [E]. h_0 = 0.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b,
                      const Tensor& c, const Tensor& d);

// y[t, e] = bias[e] + sum_j w[j, e] x[t - K + 1 + j, e], zero before t = 0.
Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias);

struct GridSeq {
  std::size_t side = 0;
  std::vector<std::size_t> kept;     // side * side rows, row-major grid order
  std::vector<std::size_t> dropped;  // cropped trailing rows
};

// side = floor(sqrt(n)); the first side^2 rows are kept in order.
// Throws ContractError for n = 0.
GridSeq reshape_to_grid(std::size_t n);

struct MambaOptions {
  std::size_t expand = 2;
  std::size_t state_dim = 16;
  std::size_t conv_width = 4;
  std::size_t dt_rank = 0;  // 0 picks ceil(channels / 16)
  double dt_min = 1e-3;
  double dt_max = 1e-1;
};

class MambaBlock {
 public:
  MambaBlock() = default;
  MambaBlock(std::size_t channels, const MambaOptions& options, std::mt19937_64& rng);

  // seq: [T, channels] -> [T, channels], residual included.
  Tensor forward(const Tensor& seq) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  // Zeroes every projection feeding the scan and the output projection.
  void zero_projections();

  std::size_t channels() const { return channels_; }
  std::size_t inner() const { return inner_; }

 private:
  std::size_t channels_ = 0;
  std::size_t inner_ = 0;
  Linear in_x_, in_z_;
  Tensor conv_w_, conv_b_;
  Linear dt_down_, dt_up_;  // dt_up carries the softplus bias
  Linear proj_b_, proj_c_;
  Tensor a_log_;  // A = -exp(a_log)
  Tensor d_;
  Linear out_;
};

// Per batch item: grid crop, Mamba block over the kept rows, mean over
// positions, then FC -> GELU -> FC -> sigmoid. Output [batch, channels].
class MambaSeLayer {
 public:
  MambaSeLayer() = default;
  MambaSeLayer(std::size_t channels, std::size_t reduction, const MambaOptions& options,
               std::mt19937_64& rng);

  Tensor weights(const sparse::SparseTensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  MambaBlock& block() { return block_; }
  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  MambaBlock block_;
  Linear fc1_, fc2_;
};

}  // namespace mmnet::ssm
