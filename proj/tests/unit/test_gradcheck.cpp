#include <gtest/gtest.h>

#include <cmath>

#include "mmnet/gradcheck.hpp"
#include "mmnet/suite.hpp"

using namespace mmnet;

TEST(Gradcheck, EveryOperationOnFiftyRandomInstances) {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    for (const auto& o : suite::run_gradcheck_suite(seed, false)) {
      EXPECT_TRUE(o.passed) << o.name << " seed " << seed << " rel " << o.rel_error;
    }
  }
}

TEST(Gradcheck, BlocksAndNetworkOnFixedSeed) {
  for (const auto& o : suite::run_gradcheck_suite(1)) {
    EXPECT_TRUE(o.passed) << o.name << " rel " << o.rel_error;
  }
}

TEST(Gradcheck, DetectsAWrongBackwardRule) {
  Tensor x({3}, {0.3, -0.4, 1.1}, true);
  // Forward computes x^2 but the recorded rule claims d/dx = x.
  auto wrong_square = [](const Tensor& t) {
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = t.at(i) * t.at(i);
    return make_result(t.shape(), v, {t}, [t](std::span<const double> g) {
      auto sink = grad_sink(t);
      for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i] * t.at(i);
    });
  };
  auto r = gradcheck([&] { return sum_all(wrong_square(x)); }, {{"x", x}});
  EXPECT_FALSE(r.passed(1e-4));
}

TEST(Gradcheck, KinkCrossingIsSkippedNotCounted) {
  // relu at exactly zero: the central difference straddles the kink.
  Tensor x({2}, {0.0, 0.7}, true);
  auto r = gradcheck([&] { return sum_all(relu(x)); }, {{"x", x}});
  EXPECT_EQ(r.kinks_skipped(), 1u);
  EXPECT_EQ(r.coords_checked(), 1u);
  EXPECT_LT(r.max_rel_error(), 1e-8);
}
