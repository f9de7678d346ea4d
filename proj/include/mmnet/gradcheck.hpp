#pragma once

// Central finite-difference checking of tape gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmnet/optim.hpp"

namespace mmnet {

struct GradcheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // Coordinates whose +/- eps steps straddle a kink (ReLU at zero, an empty
  // neighbourhood switching on) are skipped and counted. The check fails
  // when more than max_kink_fraction of all coordinates were skipped.
  bool skip_kinks = true;
  double max_kink_fraction = 0.1;
  // When positive, an input's gradient smaller than this fraction of the
  // norm over all inputs is judged on that scale instead of its own. Meant
  // for composite functions where some parameters barely touch the loss.
  double total_norm_floor = 0.0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  std::size_t kinks_skipped = 0;
  // |analytic - numeric| / (|analytic| + |numeric|), Euclidean norms over
  // the checked coordinates. The denominator is floored at 1e-6 * max(1, |loss|)
  // so vanishing gradients compare absolutely against round-off.
  double rel_error = 0.0;
  double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;  // squared norms behind rel_error
};

struct GradcheckResult {
  std::vector<GradcheckEntry> entries;
  double max_kink_fraction = 0.1;
  double norm_floor = 0.0;
  double max_rel_error() const;
  // The same measure over all checked coordinates of every input at once.
  double global_rel_error() const;
  bool kinks_within_budget() const;
  std::size_t kinks_skipped() const;
  std::size_t coords_checked() const;  // excluding skipped kinks
  bool passed(double tolerance) const;
};

// `loss_fn` must be a pure function of the values of `inputs` returning a
// scalar tensor. It is called once under a tape and twice per checked
// coordinate without one, and must return the same value either way.
GradcheckResult gradcheck(const std::function<Tensor()>& loss_fn, const ParameterList& inputs,
                          const GradcheckOptions& options = {});

}  // namespace mmnet
