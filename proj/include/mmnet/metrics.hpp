#pragma once

// Regression metrics, report comparison, and the height-metric linear baseline.

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmnet/data.hpp"

namespace mmnet::metrics {

// sqrt(mean((y - f)^2)). ContractError on empty or mismatched inputs.
double rmse(std::span<const double> obs, std::span<const double> pred);
// 1 - SSE / SST. DomainError when every observation is the same.
double r2(std::span<const double> obs, std::span<const double> pred);

struct MapeResult {
  double percent = 0.0;
  std::size_t excluded = 0;  // zero observations left out
};
// 100 * mean |y - f| / |y| over y != 0. DomainError when every y is zero.
MapeResult mape(std::span<const double> obs, std::span<const double> pred);
// mean(f - y); positive means overestimation.
double mean_bias(std::span<const double> obs, std::span<const double> pred);

struct MetricsReport {
  std::string units;
  double r2 = 0.0;
  double rmse = 0.0;
  double mape_percent = 0.0;
  double mean_bias = 0.0;
  std::size_t n = 0;
  std::size_t n_excluded_from_mape = 0;
};

MetricsReport evaluate(std::span<const double> obs, std::span<const double> pred,
                       const std::string& units);

std::string units_of(data::Target t);  // "Mg/ha" or "m3/ha"

// Signed improvement of `current` over `reference`: |current - reference|,
// positive when current is better (higher R2, lower RMSE, MAPE and |MB|).
struct DiffRow {
  double r2 = 0.0;
  double rmse = 0.0;
  double mape = 0.0;
  double mean_bias = 0.0;
};
// ContractError when the units differ.
DiffRow diff_table(const MetricsReport& current, const MetricsReport& reference);

// Median of each field over repeated runs (average of the middle pair for
// even counts). ContractError for an empty list or mixed units.
MetricsReport median_report(const std::vector<MetricsReport>& runs);
double median(std::vector<double> v);

// Linear interpolation between order statistics: position p * (n - 1) in the
// sorted sample. p in [0, 1].
double percentile(std::vector<double> sorted_or_not, double p);

// max, mean, p10..p90, fraction of points above 1.3 / 5 / 10 m, and points
// per m^2 of the xy bounding box. Heights are z above the sample minimum.
inline constexpr std::size_t kHeightFeatureCount = 15;
std::array<double, kHeightFeatureCount> height_features(const data::PlotSample& sample);

struct LinearModel {
  std::vector<double> coef;  // intercept first
  bool ridge_fallback = false;

  double predict(std::span<const double> features) const;
};

// Least squares with an intercept; rank-deficient designs fall back to a
// ridge penalty of 1e-6 and set ridge_fallback.
LinearModel fit_linear(const std::vector<std::vector<double>>& x, std::span<const double> y);

struct BaselineResult {
  MetricsReport report;
  LinearModel model;
  std::vector<double> obs;
  std::vector<double> pred;
};

// Fits on `train` height features and evaluates on `test`. ContractError
// with fewer than kHeightFeatureCount + 1 training samples.
BaselineResult linear_baseline(const std::vector<data::PlotSample>& train,
                               const std::vector<data::PlotSample>& test, data::Target target);

// CSV "obs,pred,residual" with residual = pred - obs, 17 significant digits.
void export_residuals(std::span<const double> obs, std::span<const double> pred,
                      const std::filesystem::path& path);

}  // namespace mmnet::metrics
