#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mmnet/checkpoint.hpp"
#include "mmnet/errors.hpp"
#include "mmnet/optim.hpp"
#include "mmnet/tensor.hpp"

using namespace mmnet;

namespace {

Tensor random_matrix(std::size_t m, std::size_t n, std::mt19937_64& rng, bool rg = false) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(m * n);
  for (auto& x : v) x = d(rng);
  return Tensor({m, n}, v, rg);
}

// erf by its Maclaurin series; converges quickly for |x| <= 3.
double erf_series(double x) {
  double term = x, sum = x;
  for (int n = 1; n < 60; ++n) {
    term *= -x * x / n;
    sum += term / (2 * n + 1);
  }
  return 2.0 / std::sqrt(std::acos(-1.0)) * sum;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor i({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {5, 6, 7, 8});
  auto c = matmul(i, b);
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{5, 6, 7, 8}));
}

TEST(Matmul, HandCase) {
  auto c = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()),
            (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, ZeroMatrixGivesZero) {
  std::mt19937_64 rng(3);
  auto c = matmul(Tensor::zeros({3, 4}), random_matrix(4, 2, rng));
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoopOn8x8) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    auto a = random_matrix(8, 8, rng), b = random_matrix(8, 8, rng);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t j = 0; j < 8; ++j) {
        double ref = 0.0;
        for (std::size_t p = 0; p < 8; ++p) ref += a.at(i, p) * b.at(p, j);
        EXPECT_LT(std::abs(c.at(i, j) - ref), 1e-12);
      }
    }
  }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, KnownValues) {
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  const double phi1 = 0.5 * (1.0 + erf_series(1.0 / std::sqrt(2.0)));
  EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 1.0 * phi1, 1e-14);
  EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 0.841345, 1e-6);
}

TEST(Elementwise, GeluIsExactNotTanhApproximation) {
  for (double x : {-2.5, -0.7, 0.3, 1.9}) {
    const double exact = x * 0.5 * (1.0 + erf_series(x / std::sqrt(2.0)));
    EXPECT_NEAR(kernels::gelu(x), exact, 1e-13) << x;
  }
}

TEST(Elementwise, BroadcastShapeMismatchThrows) {
  EXPECT_THROW((void)add(Tensor::zeros({2, 3}), Tensor::zeros({2}), Broadcast::rows), ShapeError);
  EXPECT_THROW((void)mul(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST(Reduce, MeanSumAndConstant) {
  EXPECT_EQ(mean_all(Tensor({3}, {1, 2, 3})).item(), 2.0);
  auto m = reduce(ReduceOp::mean, Tensor::filled({4, 3}, 2.5), 0);
  for (double v : m.values()) EXPECT_EQ(v, 2.5);
  EXPECT_THROW((void)reduce(ReduceOp::sum, Tensor::zeros({0, 3}), 0), DomainError);
}

TEST(Backward, SumGradientIsAllOnes) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum_all(x);
  }
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ProductRule) {
  Tensor x = Tensor::scalar(3.0, true), y = Tensor::scalar(5.0, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mul(x, y);
  }
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 5.0);
  EXPECT_EQ(y.grad()[0], 3.0);
}

TEST(Backward, DisconnectedLeafGetsZero) {
  Tensor x = Tensor::scalar(2.0, true), unused = Tensor::scalar(7.0, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mul(x, x);
  }
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x({2}, {1, 2}, true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = scale(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, SigmoidDotMatchesFiniteDifference) {
  const std::vector<double> xv{0.3, -1.2, 0.8};
  Tensor w({1, 3}, {0.5, 0.25, -0.75}, true);
  Tensor x({3, 1}, xv);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum_all(sigmoid(matmul(w, x)));
  }
  tape.backward(loss);
  const double h = 1e-5;
  auto f = [&](std::vector<double> wv) {
    double z = 0.0;
    for (int i = 0; i < 3; ++i) z += wv[i] * xv[i];
    return 1.0 / (1.0 + std::exp(-z));
  };
  std::vector<double> base{0.5, 0.25, -0.75};
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    auto p = base, m = base;
    p[i] += h;
    m[i] -= h;
    const double num = (f(p) - f(m)) / (2 * h);
    diff2 += (num - w.grad()[i]) * (num - w.grad()[i]);
    a2 += w.grad()[i] * w.grad()[i];
    n2 += num * num;
  }
  EXPECT_LT(std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2)), 1e-6);
}

TEST(Backward, ReplayIsBitIdentical) {
  std::mt19937_64 rng(5);
  auto a = random_matrix(6, 5, rng), b = random_matrix(5, 4, rng);
  auto run = [&] {
    Tensor aa({6, 5}, std::vector<double>(a.values().begin(), a.values().end()), true);
    Tensor bb({5, 4}, std::vector<double>(b.values().begin(), b.values().end()), true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = mean_all(gelu(matmul(aa, bb)));
    }
    tape.backward(loss);
    return std::vector<double>(aa.grad().begin(), aa.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Optimizer, SgdOnSquare) {
  Tensor w = Tensor::scalar(1.0, true);
  ParameterList params{{"w", w}};
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mul(w, w);
  }
  tape.backward(loss);
  Optimizer opt({OptimizerKind::sgd, 0.1});
  opt.step(params);
  EXPECT_DOUBLE_EQ(w.item(), 0.8);
}

TEST(Optimizer, SgdZeroGradientLeavesParameter) {
  Tensor w = Tensor::scalar(1.25, true);
  ParameterList params{{"w", w}};
  Optimizer opt({OptimizerKind::sgd, 0.1});
  opt.step(params);
  EXPECT_EQ(w.item(), 1.25);
}

TEST(Optimizer, AdamDefaults) {
  OptimizerOptions o;
  EXPECT_EQ(o.kind, OptimizerKind::adam);
  EXPECT_EQ(o.lr, 1e-3);
  EXPECT_EQ(o.beta1, 0.9);
  EXPECT_EQ(o.beta2, 0.999);
  EXPECT_EQ(o.eps, 1e-8);
}

TEST(Optimizer, IdenticalStepsFromIdenticalStateAgree) {
  auto run = [] {
    Tensor w({3}, {0.5, -1.0, 2.0}, true);
    ParameterList params{{"w", w}};
    Optimizer opt;
    for (int i = 0; i < 2; ++i) {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = sum_all(mul(w, w));
      }
      tape.backward(loss);
      opt.step(params);
      zero_grads(params);
    }
    return std::vector<double>(w.values().begin(), w.values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Optimizer, NanGradientNamesParameter) {
  Tensor w = Tensor::scalar(1.0, true);
  w.node()->grad_buffer()[0] = std::nan("");
  Optimizer opt;
  try {
    opt.step({{"head.weight", w}});
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos);
  }
  EXPECT_EQ(w.item(), 1.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(9);
  auto a = random_matrix(3, 4, rng);
  Tensor b({5}, {1.0 / 3.0, -2e-300, 1e300, 0.1, std::nextafter(1.0, 2.0)});
  const auto path = std::filesystem::temp_directory_path() / "mmnet_ckpt_roundtrip.txt";
  save_checkpoint(path, {{"a", a}, {"b", b}});
  auto entries = load_checkpoint(path);
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].name, "a");
  EXPECT_EQ(entries[0].shape, (Shape{3, 4}));
  EXPECT_EQ(entries[0].values, std::vector<double>(a.values().begin(), a.values().end()));
  EXPECT_EQ(entries[1].values, std::vector<double>(b.values().begin(), b.values().end()));

  Tensor a2 = Tensor::zeros({3, 4}), b2 = Tensor::zeros({5});
  restore_checkpoint(entries, {{"a", a2}, {"b", b2}});
  EXPECT_EQ(std::vector<double>(a2.values().begin(), a2.values().end()), entries[0].values);
  Tensor wrong = Tensor::zeros({4, 3});
  EXPECT_ANY_THROW(restore_checkpoint(entries, {{"a", wrong}}));
  std::filesystem::remove(path);
}
