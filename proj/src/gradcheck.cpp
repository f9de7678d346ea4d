#include "mmnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mmnet {

namespace {
// Below this combined norm (per unit of loss magnitude), differences are
// finite-difference round-off.
constexpr double kNormFloor = 1e-6;
// A second difference this large relative to the one-sided slopes means the
// step crossed a point where the function is not differentiable.
constexpr double kKinkRatio = 1e-2;
constexpr double kKinkAbsFloor = 1e-10;
}  // namespace

double GradcheckResult::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.rel_error);
  return worst;
}

std::size_t GradcheckResult::kinks_skipped() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.kinks_skipped;
  return n;
}

std::size_t GradcheckResult::coords_checked() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.coords_checked;
  return n;
}

bool GradcheckResult::kinks_within_budget() const {
  const double total = static_cast<double>(kinks_skipped() + coords_checked());
  return static_cast<double>(kinks_skipped()) <= max_kink_fraction * total;
}

bool GradcheckResult::passed(double tolerance) const {
  return max_rel_error() < tolerance && kinks_within_budget();
}

double GradcheckResult::global_rel_error() const {
  double d2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (const auto& e : entries) {
    d2 += e.diff_sq;
    a2 += e.analytic_sq;
    n2 += e.numeric_sq;
  }
  return std::sqrt(d2) / std::max(std::sqrt(a2) + std::sqrt(n2), norm_floor);
}

GradcheckResult gradcheck(const std::function<Tensor()>& loss_fn, const ParameterList& inputs,
                          const GradcheckOptions& options) {
  zero_grads(inputs);
  double loss_scale = 1.0, centre = 0.0;
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = loss_fn();
    }
    tape.backward(loss);
    centre = loss.item();
    loss_scale = std::max(1.0, std::abs(centre));
  }

  std::mt19937_64 rng(options.seed);
  GradcheckResult result;
  for (const auto& input : inputs) {
    Tensor x = input.tensor;
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }

    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    std::size_t kinks = 0;
    auto values = x.mutable_values();
    for (auto c : coords) {
      const double saved = values[c];
      values[c] = saved + options.eps;
      const double plus = loss_fn().item();
      values[c] = saved - options.eps;
      const double minus = loss_fn().item();
      values[c] = saved;
      if (options.skip_kinks) {
        const double second = std::abs(plus - 2.0 * centre + minus);
        const double slope = std::max(std::abs(plus - centre), std::abs(centre - minus));
        if (second > kKinkRatio * slope && second > kKinkAbsFloor * loss_scale) {
          ++kinks;
          continue;
        }
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      diff2 += (analytic[c] - numeric) * (analytic[c] - numeric);
      a2 += analytic[c] * analytic[c];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    GradcheckEntry entry{input.name, coords.size() - kinks, kinks, 0.0, diff2, a2, n2};
    entry.rel_error = std::sqrt(diff2) / std::max(denom, kNormFloor * loss_scale);
    result.entries.push_back(entry);
  }
  zero_grads(inputs);
  result.max_kink_fraction = options.max_kink_fraction;
  result.norm_floor = kNormFloor * loss_scale;
  if (options.total_norm_floor > 0.0) {
    double a2 = 0.0, n2 = 0.0;
    for (const auto& e : result.entries) {
      a2 += e.analytic_sq;
      n2 += e.numeric_sq;
    }
    const double floor = std::max(result.norm_floor,
                                  options.total_norm_floor * (std::sqrt(a2) + std::sqrt(n2)));
    for (auto& e : result.entries) {
      e.rel_error = std::sqrt(e.diff_sq) /
                    std::max(std::sqrt(e.analytic_sq) + std::sqrt(e.numeric_sq), floor);
    }
  }
  return result;
}

}  // namespace mmnet
