#pragma once

// Finite-difference suite over every differentiable operation and the
// benchmark harnesses behind `mmnet gradcheck` and `mmnet bench`.

#include <cstdint>
#include <string>
#include <vector>

namespace mmnet::suite {

struct CheckOutcome {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::size_t kinks_skipped = 0;
  std::size_t coords_checked = 0;
};

// Per-operation checks use tolerance 1e-4; the whole network on a small
// input uses 1e-3. Per-operation steps are 1e-5. Without `include_blocks`
// only the single operations run.
std::vector<CheckOutcome> run_gradcheck_suite(std::uint64_t seed, bool include_blocks = true);

struct TimingPoint {
  std::size_t size = 0;
  double seconds = 0.0;
};

struct ScalingResult {
  std::vector<TimingPoint> points;
  double slope = 0.0;  // least-squares slope of log(seconds) on log(size)
};

double loglog_slope(const std::vector<TimingPoint>& points);

// Selective scan wall time for T = 2^lo .. 2^hi (best of `reps`).
ScalingResult bench_scan(int lo_exp, int hi_exp, std::size_t channels, std::size_t state_dim,
                         int reps, std::uint64_t seed);

// 3^3 sparse convolution over random active sets of the given sizes.
ScalingResult bench_sparse_conv(const std::vector<std::size_t>& voxel_counts, std::size_t channels,
                                int reps, std::uint64_t seed);

}  // namespace mmnet::suite
