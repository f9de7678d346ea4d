#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mmnet/errors.hpp"
#include "mmnet/metrics.hpp"

using namespace mmnet;
using namespace mmnet::metrics;

namespace {

using V = std::vector<double>;

MetricsReport report(double r2v, double rmsev, double mapev, double mb, const std::string& units) {
  MetricsReport r;
  r.units = units;
  r.r2 = r2v;
  r.rmse = rmsev;
  r.mape_percent = mapev;
  r.mean_bias = mb;
  return r;
}

// Printed table values carry three decimals.
constexpr double kPrint = 1e-3 + 1e-9;

data::PlotSample plot_with_heights(std::mt19937_64& rng, std::size_t n, double top) {
  std::uniform_real_distribution<double> u(0.0, 20.0), h(0.0, 1.0);
  data::PlotSample s;
  for (std::size_t i = 0; i < n; ++i) s.xyz.push_back({u(rng), u(rng), top * h(rng) * h(rng)});
  return s;
}

// 3x3 determinant, for Cramer's rule.
double det3(const std::array<std::array<double, 3>, 3>& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

}  // namespace

TEST(Rmse, HandCases) {
  EXPECT_EQ(rmse(V{1, 2, 3}, V{1, 2, 3}), 0.0);
  EXPECT_EQ(rmse(V{100, 200}, V{110, 190}), 10.0);
  EXPECT_EQ(rmse(V{5}, V{2}), 3.0);
  EXPECT_THROW((void)rmse(V{1, 2}, V{1}), ContractError);
  EXPECT_THROW((void)rmse(V{}, V{}), ContractError);
}

TEST(R2, HandCases) {
  EXPECT_EQ(r2(V{1, 2, 3}, V{1, 2, 3}), 1.0);
  EXPECT_EQ(r2(V{1, 2, 3}, V{2, 2, 2}), 0.0);
  EXPECT_EQ(r2(V{1, 2, 3}, V{1, 2, 4}), 0.5);
  EXPECT_THROW((void)r2(V{4, 4, 4}, V{1, 2, 3}), DomainError);
}

TEST(Mape, HandCases) {
  auto m = mape(V{100, 200}, V{110, 190});
  EXPECT_EQ(m.percent, 7.5);
  EXPECT_EQ(m.excluded, 0u);
  auto z = mape(V{0, 100, 200}, V{5, 110, 190});
  EXPECT_EQ(z.percent, 7.5);
  EXPECT_EQ(z.excluded, 1u);
  EXPECT_EQ(mape(V{3, 4}, V{3, 4}).percent, 0.0);
  EXPECT_THROW((void)mape(V{0, 0}, V{1, 2}), DomainError);
}

TEST(MeanBias, HandCases) {
  EXPECT_EQ(mean_bias(V{1, 2, 3}, V{6, 7, 8}), 5.0);
  EXPECT_EQ(mean_bias(V{50, 50}, V{60, 40}), 0.0);
  EXPECT_EQ(mean_bias(V{100, 200}, V{110, 190}), 0.0);
  EXPECT_GT(mean_bias(V{1}, V{2}), 0.0);
  EXPECT_THROW((void)mean_bias(V{}, V{}), ContractError);
}

TEST(MeanBias, AntisymmetricErrorsCancel) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int rep = 0; rep < 20; ++rep) {
    V obs, pred;
    for (int i = 0; i < 10; ++i) {
      const double y = 100 + u(rng), e = std::ldexp(std::round(u(rng) * 64), -6);
      obs.insert(obs.end(), {y, y});
      pred.insert(pred.end(), {y + e, y - e});
    }
    EXPECT_NEAR(mean_bias(obs, pred), 0.0, 1e-12);
  }
}

TEST(Evaluate, ReportFieldsAndExclusions) {
  auto r = evaluate(V{0, 100, 200}, V{5, 110, 190}, "Mg/ha");
  EXPECT_EQ(r.n, 3u);
  EXPECT_EQ(r.n_excluded_from_mape, 1u);
  EXPECT_EQ(r.units, "Mg/ha");
  EXPECT_DOUBLE_EQ(r.rmse, std::sqrt((25.0 + 100.0 + 100.0) / 3.0));
  EXPECT_EQ(units_of(data::Target::agb), "Mg/ha");
  EXPECT_EQ(units_of(data::Target::volume), "m3/ha");
}

TEST(Metrics, ScaleEquivariance) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(1, 300);
  V y(30), f(30);
  for (std::size_t i = 0; i < 30; ++i) {
    y[i] = u(rng);
    f[i] = y[i] + u(rng) / 10 - 15;
  }
  for (double a : {0.5, 3.0, 1000.0}) {
    V ya(y), fa(f), yb(y), fb(f);
    for (std::size_t i = 0; i < 30; ++i) {
      ya[i] *= a;
      fa[i] *= a;
      yb[i] = a * y[i] + 7.0;
      fb[i] = a * f[i] + 7.0;
    }
    EXPECT_NEAR(rmse(ya, fa), a * rmse(y, f), 1e-12 * a * rmse(y, f));
    EXPECT_NEAR(r2(yb, fb), r2(y, f), 1e-12);
    EXPECT_NEAR(mape(ya, fa).percent, mape(y, f).percent, 1e-10);
  }
}

TEST(DiffTable, IdenticalReportsGiveZeros) {
  auto r = report(0.7, 10, 20, -1, "Mg/ha");
  auto d = diff_table(r, r);
  EXPECT_EQ(d.r2, 0.0);
  EXPECT_EQ(d.rmse, 0.0);
  EXPECT_EQ(d.mape, 0.0);
  EXPECT_EQ(d.mean_bias, 0.0);
  for (double v : {d.r2, d.rmse, d.mape, d.mean_bias}) EXPECT_FALSE(std::signbit(v));
  EXPECT_THROW((void)diff_table(r, report(0.7, 10, 20, -1, "m3/ha")), ContractError);
}

TEST(DiffTable, WorseCurrentIsNegative) {
  auto d = diff_table(report(0.5, 12, 30, -4, "Mg/ha"), report(0.6, 10, 20, 3, "Mg/ha"));
  EXPECT_NEAR(d.r2, -0.1, 1e-12);
  EXPECT_EQ(d.rmse, -2.0);
  EXPECT_EQ(d.mape, -10.0);
  // |MB| grew from 3 to 4; the gap is taken on the signed values.
  EXPECT_EQ(d.mean_bias, -7.0);
}

TEST(DiffTable, AgbRowsOfPublishedComparison) {
  auto d = diff_table(report(0.810, 44.615, 163.150, 0.005, "Mg/ha"),
                      report(0.785, 46.030, 202.000, 0.013, "Mg/ha"));
  EXPECT_NEAR(d.r2, 0.025, kPrint);
  EXPECT_NEAR(d.rmse, 1.416, kPrint);
  EXPECT_NEAR(d.mape, 38.850, kPrint);
  EXPECT_NEAR(d.mean_bias, 0.008, kPrint);
}

TEST(DiffTable, VolumeRowsOfPublishedComparison) {
  auto d = diff_table(report(0.801, 85.860, 100.290, 0.119, "m3/ha"),
                      report(0.774, 91.398, 138.115, 1.164, "m3/ha"));
  EXPECT_NEAR(d.r2, 0.027, kPrint);
  EXPECT_NEAR(d.rmse, 5.538, kPrint);
  EXPECT_NEAR(d.mape, 37.825, kPrint);
  EXPECT_NEAR(d.mean_bias, 1.045, kPrint);
}

TEST(Median, OddEvenAndReports) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  auto m = median_report({report(0.1, 5, 1, 0, "u"), report(0.3, 1, 3, 2, "u"), report(0.2, 9, 2, -1, "u")});
  EXPECT_EQ(m.r2, 0.2);
  EXPECT_EQ(m.rmse, 5.0);
  EXPECT_EQ(m.mape_percent, 2.0);
  EXPECT_EQ(m.mean_bias, 0.0);
  EXPECT_THROW((void)median_report({}), ContractError);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_EQ(percentile({4, 1, 3, 2}, 0.0), 1.0);
  EXPECT_EQ(percentile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(percentile({10, 20, 30, 40, 50}, 0.1), 14.0);
  EXPECT_EQ(percentile({7}, 0.3), 7.0);
}

TEST(HeightFeatures, HandCase) {
  data::PlotSample s;
  s.xyz = {{0, 0, 1}, {2, 0, 3}, {0, 2, 7}, {2, 2, 13}};
  auto f = height_features(s);
  EXPECT_EQ(f[0], 12.0);            // max above minimum
  EXPECT_EQ(f[1], 5.0);             // mean above minimum
  EXPECT_DOUBLE_EQ(f[2], 0.6);      // p10 of {0, 2, 6, 12}
  EXPECT_EQ(f[11], 0.75);           // share above 1.3 m
  EXPECT_EQ(f[12], 0.5);            // above 5 m
  EXPECT_EQ(f[13], 0.25);           // above 10 m
  EXPECT_EQ(f[14], 1.0);            // 4 points over 4 m^2
}

TEST(FitLinear, MatchesNormalEquationsOnFiveByThree) {
  const std::vector<std::vector<double>> x{{1, 2}, {2, 0.5}, {3, 4}, {4, 3}, {5, 7}};
  const V y{3.1, 2.0, 6.9, 6.2, 11.5};
  auto m = fit_linear(x, y);
  ASSERT_EQ(m.coef.size(), 3u);
  EXPECT_FALSE(m.ridge_fallback);
  std::array<std::array<double, 3>, 3> a{};
  std::array<double, 3> b{};
  for (std::size_t i = 0; i < 5; ++i) {
    const std::array<double, 3> row{1.0, x[i][0], x[i][1]};
    for (int r = 0; r < 3; ++r) {
      b[r] += row[r] * y[i];
      for (int c = 0; c < 3; ++c) a[r][c] += row[r] * row[c];
    }
  }
  const double d = det3(a);
  for (int k = 0; k < 3; ++k) {
    auto ak = a;
    for (int r = 0; r < 3; ++r) ak[r][k] = b[r];
    EXPECT_NEAR(m.coef[k], det3(ak) / d, 1e-10) << k;
  }
}

TEST(FitLinear, RankDeficientFallsBackToRidge) {
  const std::vector<std::vector<double>> x{{1, 2}, {2, 4}, {3, 6}, {4, 8}};
  auto m = fit_linear(x, V{1, 2, 3, 4});
  EXPECT_TRUE(m.ridge_fallback);
  for (double c : m.coef) EXPECT_TRUE(std::isfinite(c));
  EXPECT_NEAR(m.predict(V{5, 10}), 5.0, 1e-3);
}

TEST(Baseline, RecoversExactlyLinearLabels) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> top(5, 35);
  std::vector<data::PlotSample> train, test;
  V w(kHeightFeatureCount);
  std::normal_distribution<double> nd;
  for (auto& v : w) v = nd(rng);
  auto make = [&](std::vector<data::PlotSample>& dst, int n) {
    for (int i = 0; i < n; ++i) {
      auto s = plot_with_heights(rng, 200, top(rng));
      const auto f = height_features(s);
      double y = 40.0;
      for (std::size_t k = 0; k < f.size(); ++k) y += w[k] * f[k];
      s.agb = y;
      dst.push_back(std::move(s));
    }
  };
  make(train, 60);
  make(test, 20);
  auto r = linear_baseline(train, test, data::Target::agb);
  EXPECT_GT(r.report.r2, 0.999);
  EXPECT_EQ(r.obs.size(), 20u);
}

TEST(Baseline, ConstantLabelsAreDomainError) {
  std::mt19937_64 rng(4);
  std::vector<data::PlotSample> train, test;
  for (int i = 0; i < 20; ++i) {
    auto s = plot_with_heights(rng, 100, 20);
    s.agb = 50;
    (i < 16 ? train : test).push_back(s);
  }
  EXPECT_THROW((void)linear_baseline(train, test, data::Target::agb), DomainError);
  train.resize(5);
  EXPECT_THROW((void)linear_baseline(train, test, data::Target::agb), ContractError);
}

TEST(Residuals, RoundTripIsBitExact) {
  const V obs{1.0 / 3.0, 200.0, 0.0}, pred{0.1, 199.99999999999997, -1e-300};
  const auto path = std::filesystem::temp_directory_path() / "mmnet_residuals_test.csv";
  export_residuals(obs, pred, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "obs,pred,residual");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double o = 0, p = 0, r = 0;
    ss >> o >> p >> r;
    EXPECT_EQ(o, obs[rows]);
    EXPECT_EQ(p, pred[rows]);
    EXPECT_EQ(r, pred[rows] - obs[rows]);
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
  std::filesystem::remove(path);
}
