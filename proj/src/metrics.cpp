#include "mmnet/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mmnet/errors.hpp"

namespace mmnet::metrics {

namespace {

void check_pair(std::span<const double> obs, std::span<const double> pred, const char* what) {
  if (obs.size() != pred.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(obs.size()) + " observations vs " +
                        std::to_string(pred.size()) + " predictions");
  }
  if (obs.empty()) throw ContractError(std::string(what) + ": no samples");
}

}  // namespace

double rmse(std::span<const double> obs, std::span<const double> pred) {
  check_pair(obs, pred, "rmse");
  double sse = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) sse += (obs[i] - pred[i]) * (obs[i] - pred[i]);
  return std::sqrt(sse / static_cast<double>(obs.size()));
}

double r2(std::span<const double> obs, std::span<const double> pred) {
  check_pair(obs, pred, "r2");
  double mean = 0.0;
  for (double y : obs) mean += y;
  mean /= static_cast<double>(obs.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    sse += (obs[i] - pred[i]) * (obs[i] - pred[i]);
    sst += (obs[i] - mean) * (obs[i] - mean);
  }
  if (sst == 0.0) throw DomainError("r2: observations have zero variance");
  return 1.0 - sse / sst;
}

MapeResult mape(std::span<const double> obs, std::span<const double> pred) {
  check_pair(obs, pred, "mape");
  MapeResult r;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i] == 0.0) {
      ++r.excluded;
      continue;
    }
    sum += 100.0 * std::abs(obs[i] - pred[i]) / std::abs(obs[i]);
    ++used;
  }
  if (used == 0) throw DomainError("mape: every observation is zero");
  r.percent = sum / static_cast<double>(used);
  return r;
}

double mean_bias(std::span<const double> obs, std::span<const double> pred) {
  check_pair(obs, pred, "mean_bias");
  double sum = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) sum += pred[i] - obs[i];
  return sum / static_cast<double>(obs.size());
}

MetricsReport evaluate(std::span<const double> obs, std::span<const double> pred,
                       const std::string& units) {
  MetricsReport rep;
  rep.units = units;
  rep.n = obs.size();
  rep.r2 = r2(obs, pred);
  rep.rmse = rmse(obs, pred);
  const auto m = mape(obs, pred);
  rep.mape_percent = m.percent;
  rep.n_excluded_from_mape = m.excluded;
  rep.mean_bias = mean_bias(obs, pred);
  return rep;
}

std::string units_of(data::Target t) { return t == data::Target::agb ? "Mg/ha" : "m3/ha"; }

DiffRow diff_table(const MetricsReport& current, const MetricsReport& reference) {
  if (current.units != reference.units) {
    throw ContractError("diff_table: cannot compare " + current.units + " with " + reference.units);
  }
  // Ties give +0 so an unchanged metric never prints as -0.
  auto signed_gap = [](double cur, double ref, bool higher_better) {
    const double gap = std::abs(cur - ref);
    if (gap == 0.0) return 0.0;
    const bool better = higher_better ? cur > ref : cur < ref;
    return better ? gap : -gap;
  };
  DiffRow d;
  d.r2 = signed_gap(current.r2, reference.r2, true);
  d.rmse = signed_gap(current.rmse, reference.rmse, false);
  d.mape = signed_gap(current.mape_percent, reference.mape_percent, false);
  const double mb_gap = std::abs(current.mean_bias - reference.mean_bias);
  d.mean_bias = mb_gap == 0.0 || std::abs(current.mean_bias) < std::abs(reference.mean_bias) ? mb_gap : -mb_gap;
  return d;
}

double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

MetricsReport median_report(const std::vector<MetricsReport>& runs) {
  if (runs.empty()) throw ContractError("median_report: no runs");
  auto field = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(static_cast<double>(get(r)));
    return median(std::move(v));
  };
  for (const auto& r : runs) {
    if (r.units != runs.front().units) throw ContractError("median_report: mixed units");
  }
  MetricsReport m;
  m.units = runs.front().units;
  m.r2 = field([](const MetricsReport& r) { return r.r2; });
  m.rmse = field([](const MetricsReport& r) { return r.rmse; });
  m.mape_percent = field([](const MetricsReport& r) { return r.mape_percent; });
  m.mean_bias = field([](const MetricsReport& r) { return r.mean_bias; });
  m.n = static_cast<std::size_t>(field([](const MetricsReport& r) { return r.n; }));
  m.n_excluded_from_mape =
      static_cast<std::size_t>(field([](const MetricsReport& r) { return r.n_excluded_from_mape; }));
  return m;
}

double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw ContractError("percentile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("percentile rank must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

std::array<double, kHeightFeatureCount> height_features(const data::PlotSample& sample) {
  if (sample.xyz.empty()) throw ContractError("height features of an empty sample");
  double zmin = sample.xyz.front()[2];
  double xmin = sample.xyz.front()[0], xmax = xmin, ymin = sample.xyz.front()[1], ymax = ymin;
  for (const auto& p : sample.xyz) {
    zmin = std::min(zmin, p[2]);
    xmin = std::min(xmin, p[0]);
    xmax = std::max(xmax, p[0]);
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  std::vector<double> h;
  h.reserve(sample.xyz.size());
  for (const auto& p : sample.xyz) h.push_back(p[2] - zmin);
  std::sort(h.begin(), h.end());
  const double n = static_cast<double>(h.size());
  std::array<double, kHeightFeatureCount> f{};
  f[0] = h.back();
  double sum = 0.0;
  for (double v : h) sum += v;
  f[1] = sum / n;
  for (int k = 1; k <= 9; ++k) f[1 + k] = percentile(h, 0.1 * k);
  const double cuts[3] = {1.3, 5.0, 10.0};
  for (int c = 0; c < 3; ++c) {
    const auto above = h.end() - std::upper_bound(h.begin(), h.end(), cuts[c]);
    f[11 + c] = static_cast<double>(above) / n;
  }
  const double area = std::max((xmax - xmin) * (ymax - ymin), 1e-6);
  f[14] = n / area;
  return f;
}

double LinearModel::predict(std::span<const double> features) const {
  if (features.size() + 1 != coef.size()) {
    throw ShapeError("linear model expects " + std::to_string(coef.size() - 1) + " features");
  }
  double y = coef[0];
  for (std::size_t j = 0; j < features.size(); ++j) y += coef[j + 1] * features[j];
  return y;
}

LinearModel fit_linear(const std::vector<std::vector<double>>& x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw ContractError("fit_linear: need one label per row");
  const auto rows = static_cast<Eigen::Index>(x.size());
  const auto cols = static_cast<Eigen::Index>(x.front().size() + 1);
  Eigen::MatrixXd a(rows, cols);
  Eigen::VectorXd b(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = x[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(row.size()) + 1 != cols) throw ShapeError("fit_linear: ragged design");
    a(i, 0) = 1.0;
    for (Eigen::Index j = 1; j < cols; ++j) a(i, j) = row[static_cast<std::size_t>(j - 1)];
    b(i) = y[static_cast<std::size_t>(i)];
  }
  LinearModel m;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::VectorXd coef;
  if (qr.rank() == cols) {
    coef = qr.solve(b);
  } else {
    m.ridge_fallback = true;
    Eigen::MatrixXd normal = a.transpose() * a;
    normal.diagonal().array() += 1e-6;
    coef = normal.ldlt().solve(a.transpose() * b);
  }
  m.coef.assign(coef.data(), coef.data() + coef.size());
  return m;
}

BaselineResult linear_baseline(const std::vector<data::PlotSample>& train,
                               const std::vector<data::PlotSample>& test, data::Target target) {
  if (train.size() < kHeightFeatureCount + 1) {
    throw ContractError("linear baseline needs at least " + std::to_string(kHeightFeatureCount + 1) +
                        " training samples, got " + std::to_string(train.size()));
  }
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const auto& s : train) {
    const auto f = height_features(s);
    x.emplace_back(f.begin(), f.end());
    y.push_back(s.label(target));
  }
  BaselineResult r;
  r.model = fit_linear(x, y);
  for (const auto& s : test) {
    const auto f = height_features(s);
    r.obs.push_back(s.label(target));
    r.pred.push_back(r.model.predict(f));
  }
  r.report = evaluate(r.obs, r.pred, units_of(target));
  return r;
}

void export_residuals(std::span<const double> obs, std::span<const double> pred,
                      const std::filesystem::path& path) {
  check_pair(obs, pred, "export_residuals");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IngestionError("cannot open " + path.string() + " for writing");
  out << "obs,pred,residual\n";
  char buf[96];
  for (std::size_t i = 0; i < obs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", obs[i], pred[i], pred[i] - obs[i]);
    out << buf;
  }
  if (!out) throw IngestionError("write failed for " + path.string());
}

}  // namespace mmnet::metrics
