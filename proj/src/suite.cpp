#include "mmnet/suite.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "mmnet/attention.hpp"
#include "mmnet/gradcheck.hpp"
#include "mmnet/network.hpp"

namespace mmnet::suite {

namespace {

using sparse::SparseTensor;

constexpr double kOpTol = 1e-4;
constexpr double kNetTol = 1e-3;
constexpr double kStep = 1e-5;
// Composite blocks: gradients under this share of the total are judged on
// the total's scale.
constexpr double kCompositeFloor = 1e-4;

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool rg = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), rg);
}

// Values with magnitude in [0.2, 1] and random sign, away from ReLU kinks.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// sum(t * w) for a fixed random w, so every output element gets its own
// upstream gradient.
struct Probe {
  std::mt19937_64 rng;
  std::function<Tensor(const Tensor&)> make() {
    auto cache = std::make_shared<std::vector<double>>();
    auto seed = rng();
    return [cache, seed](const Tensor& t) {
      if (cache->size() != t.numel()) {
        std::mt19937_64 r(seed);
        std::uniform_real_distribution<double> d(-1.0, 1.0);
        cache->resize(t.numel());
        for (auto& x : *cache) x = d(r);
      }
      return sum_all(mul(t, Tensor(t.shape(), *cache)));
    };
  }
};

SparseTensor random_sparse(std::mt19937_64& rng, std::size_t batch, std::size_t per_item, int extent,
                           std::size_t channels, int stride = 1) {
  std::uniform_int_distribution<int> coord(0, extent - 1);
  std::set<sparse::Coord> set;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t added = 0;
    while (added < per_item) {
      sparse::Coord c{static_cast<std::int32_t>(b), coord(rng) * stride, coord(rng) * stride,
                      coord(rng) * stride};
      if (set.insert(c).second) ++added;
    }
  }
  SparseTensor t;
  t.coords.assign(set.begin(), set.end());
  t.stride = stride;
  t.batch_size = batch;
  t.feats = uniform({t.coords.size(), channels}, rng, -1.0, 1.0);
  return t;
}

// Moves parameters off their structured initial values (zero biases, unit
// norms) so no activation sits exactly on a ReLU kink.
void jitter(const ParameterList& params, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> d(-amount, amount);
  for (const auto& p : params) {
    for (auto& v : p.tensor.node()->value) v += d(rng);
  }
}

ParameterList with_prefix(const ParameterList& params, const std::string& extra_name,
                          const Tensor& extra) {
  ParameterList out = params;
  out.push_back({extra_name, extra});
  return out;
}

// Step sizes of order 0.1 keep the dt and A gradients well above
// finite-difference round-off; the default range makes them ~1e-5.
bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

ssm::MambaOptions check_mamba() {
  ssm::MambaOptions mo;
  mo.state_dim = 4;
  mo.dt_min = 0.05;
  mo.dt_max = 0.5;
  return mo;
}

}  // namespace

std::vector<CheckOutcome> run_gradcheck_suite(std::uint64_t seed, bool include_blocks) {
  std::mt19937_64 rng(seed);
  Probe probe{std::mt19937_64(seed ^ 0x5eedULL)};
  std::vector<CheckOutcome> out;
  auto check = [&](const std::string& name, const ParameterList& inputs,
                   const std::function<Tensor()>& loss, double tol = kOpTol,
                   std::size_t max_coords = 0, double step = kStep, bool global = false,
                   double total_floor = 0.0) {
    GradcheckOptions opt;
    opt.max_coords_per_input = max_coords;
    opt.seed = seed;
    opt.eps = step;
    opt.total_norm_floor = total_floor;
    const auto r = gradcheck(loss, inputs, opt);
    const double rel = global ? r.global_rel_error() : r.max_rel_error();
    out.push_back({name, rel, tol, rel < tol && r.kinks_within_budget(), r.kinks_skipped(),
                   r.coords_checked()});
  };

  // Dense operations.
  {
    Tensor a = uniform({3, 4}, rng, -1, 1), b = uniform({4, 5}, rng, -1, 1);
    auto p = probe.make();
    check("matmul", {{"a", a}, {"b", b}}, [=] { return p(matmul(a, b)); });
  }
  for (auto mode : {Broadcast::none, Broadcast::rows, Broadcast::cols}) {
    const char* tag = mode == Broadcast::none ? "" : (mode == Broadcast::rows ? "_rows" : "_cols");
    Tensor x = uniform({3, 4}, rng, -1, 1);
    Tensor y = mode == Broadcast::none ? uniform({3, 4}, rng, -1, 1)
                                       : uniform({mode == Broadcast::rows ? 4u : 3u}, rng, -1, 1);
    auto p1 = probe.make(), p2 = probe.make();
    check(std::string("add") + tag, {{"x", x}, {"y", y}}, [=] { return p1(add(x, y, mode)); });
    check(std::string("mul") + tag, {{"x", x}, {"y", y}}, [=] { return p2(mul(x, y, mode)); });
  }
  {
    Tensor x = uniform({3, 4}, rng, -1, 1), y = uniform({3, 4}, rng, -1, 1);
    auto p1 = probe.make(), p2 = probe.make();
    check("sub", {{"x", x}, {"y", y}}, [=] { return p1(sub(x, y)); });
    check("scale", {{"x", x}}, [=] { return p2(scale(x, -1.7)); });
  }
  {
    using Fn = Tensor (*)(const Tensor&);
    const std::pair<const char*, Fn> unary[] = {{"relu", relu},       {"gelu", gelu},
                                                {"sigmoid", sigmoid}, {"softplus", softplus},
                                                {"exp", exp},         {"silu", silu}};
    for (const auto& [name, fn] : unary) {
      Tensor x = away_from_zero({4, 5}, rng);
      auto p = probe.make();
      check(name, {{"x", x}}, [=] { return p(fn(x)); });
    }
  }
  for (auto op : {ReduceOp::sum, ReduceOp::mean, ReduceOp::max}) {
    for (std::size_t axis : {0u, 1u}) {
      Tensor x = uniform({4, 5}, rng, -1, 1);
      auto p = probe.make();
      const std::string name = std::string("reduce_") +
                               (op == ReduceOp::sum ? "sum" : op == ReduceOp::mean ? "mean" : "max") +
                               "_axis" + std::to_string(axis);
      check(name, {{"x", x}}, [=] { return p(reduce(op, x, axis)); });
    }
  }
  {
    Tensor x = uniform({3, 4}, rng, -1, 1), t = uniform({3, 4}, rng, -1, 1, false);
    check("sum_all", {{"x", x}}, [=] { return sum_all(mul(x, x)); });
    check("mean_all", {{"x", x}}, [=] { return mean_all(mul(x, x)); });
    check("mse_loss", {{"x", x}}, [=] { return mse_loss(x, t); });
  }
  {
    Tensor x = uniform({4, 3}, rng, -1, 1), y = uniform({2, 3}, rng, -1, 1);
    auto p1 = probe.make(), p2 = probe.make(), p3 = probe.make(), p4 = probe.make();
    check("reshape", {{"x", x}}, [=] { return p1(reshape(x, {3, 4})); });
    check("slice_rows", {{"x", x}}, [=] { return p2(slice_rows(x, 1, 2)); });
    const std::vector<std::size_t> rows{3, 0, 3, 1};
    check("gather_rows", {{"x", x}}, [=] { return p3(gather_rows(x, rows)); });
    check("concat_rows", {{"x", x}, {"y", y}}, [=] { return p4(concat_rows({x, y, x})); });
  }

  // Sparse operations.
  for (auto [k, s] : {std::pair{3, 1}, std::pair{3, 2}, std::pair{1, 2}, std::pair{1, 1}}) {
    SparseTensor x = random_sparse(rng, 2, 10, 4, 3);
    sparse::ConvWeights w{uniform({static_cast<std::size_t>(k * k * k), 3, 4}, rng, -1, 1),
                          uniform({4}, rng, -1, 1)};
    const auto km = sparse::build_kernel_map(x, k, s);
    auto p = probe.make();
    check("sparse_conv_k" + std::to_string(k) + "_s" + std::to_string(s),
          {{"feats", x.feats}, {"kernel", w.kernel}, {"bias", w.bias}},
          [=] { return p(sparse::sparse_conv(x, w, km).feats); });
  }
  {
    SparseTensor x = random_sparse(rng, 2, 6, 3, 3);
    SparseTensor y = x.with_feats(uniform({x.size(), 3}, rng, -1, 1));
    Tensor w = uniform({2, 3}, rng, 0.1, 1.0);
    auto p1 = probe.make(), p2 = probe.make(), p3 = probe.make(), p4 = probe.make();
    check("global_avg_pool", {{"feats", x.feats}}, [=] { return p1(sparse::global_avg_pool(x)); });
    check("channel_scale", {{"feats", x.feats}, {"w", w}},
          [=] { return p2(sparse::channel_scale(x, w).feats); });
    check("sparse_add", {{"a", x.feats}, {"b", y.feats}},
          [=] { return p3(sparse::sparse_add(x, y).feats); });
    SparseTensor r = x.with_feats(away_from_zero({x.size(), 3}, rng));
    check("sparse_relu", {{"feats", r.feats}}, [=] { return p4(sparse::sparse_relu(r).feats); });
  }
  {
    SparseTensor fine = random_sparse(rng, 2, 12, 4, 3);
    const auto coarse = sparse::stride_downsample_coords(fine.coords, 1, 2);
    auto p = probe.make();
    check("pool_to_coarse", {{"feats", fine.feats}},
          [=] { return p(sparse::pool_to_coarse(fine, coarse, 2).feats); });
  }
  for (auto mode : {sparse::NormMode::train, sparse::NormMode::eval}) {
    Tensor x = uniform({7, 3}, rng, -1, 2), g = uniform({3}, rng, 0.5, 1.5), b = uniform({3}, rng, -1, 1);
    auto rm = std::make_shared<Tensor>(uniform({3}, rng, -0.5, 0.5, false));
    auto rv = std::make_shared<Tensor>(uniform({3}, rng, 0.5, 1.5, false));
    auto p = probe.make();
    check(mode == sparse::NormMode::train ? "batch_norm_train" : "batch_norm_eval",
          {{"x", x}, {"gamma", g}, {"beta", b}},
          [=] { return p(sparse::batch_norm(x, g, b, mode, *rm, *rv, 0.1, 1e-5)); });
  }

  // Scans and the Mamba path.
  {
    const std::size_t t = 9, c = 3, n = 4;
    Tensor x = uniform({t, c}, rng, -1, 1), abar = uniform({c, n}, rng, 0.2, 0.95),
           bbar = uniform({c, n}, rng, -1, 1), cm = uniform({c, n}, rng, -1, 1),
           d = uniform({c}, rng, -1, 1), h0 = uniform({c, n}, rng, -1, 1);
    auto p = probe.make();
    check("lti_scan", {{"x", x}, {"abar", abar}, {"bbar", bbar}, {"c", cm}, {"d", d}, {"h0", h0}},
          [=] { return p(ssm::lti_scan(x, abar, bbar, cm, d, h0)); });
  }
  {
    const std::size_t t = 9, e = 3, n = 4;
    Tensor u = uniform({t, e}, rng, -1, 1), delta = uniform({t, e}, rng, 0.05, 0.8),
           a = uniform({e, n}, rng, -2, -0.2), b = uniform({t, n}, rng, -1, 1),
           c = uniform({t, n}, rng, -1, 1), d = uniform({e}, rng, -1, 1);
    auto p = probe.make();
    check("selective_scan", {{"u", u}, {"delta", delta}, {"a", a}, {"b", b}, {"c", c}, {"d", d}},
          [=] { return p(ssm::selective_scan(u, delta, a, b, c, d)); });
  }
  {
    Tensor x = uniform({7, 3}, rng, -1, 1), w = uniform({4, 3}, rng, -1, 1), b = uniform({3}, rng, -1, 1);
    auto p = probe.make();
    check("causal_depthwise_conv", {{"x", x}, {"w", w}, {"bias", b}},
          [=] { return p(ssm::causal_depthwise_conv(x, w, b)); });
  }
  {
    auto block = std::make_shared<ssm::MambaBlock>(4, check_mamba(), rng);
    Tensor seq = uniform({8, 4}, rng, -1, 1);
    ParameterList params;
    block->collect(params, "mamba");
    auto p = probe.make();
    check("mamba_block", with_prefix(params, "seq", seq), [=] { return p(block->forward(seq)); });
  }
  {
    SparseTensor x = random_sparse(rng, 2, 7, 3, 16);
    auto se = std::make_shared<SeLayer>(16, 4, rng);
    ParameterList params;
    se->collect(params, "se");
    auto p = probe.make();
    check("se_layer", with_prefix(params, "feats", x.feats), [=] { return p(se->forward(x).feats); });
  }
  {
    SparseTensor x = random_sparse(rng, 2, 7, 3, 16);
    auto mse = std::make_shared<ssm::MambaSeLayer>(16, 4, check_mamba(), rng);
    ParameterList params;
    mse->collect(params, "mamba_se");
    auto p = probe.make();
    check("mamba_se_weights", with_prefix(params, "feats", x.feats),
          [=] { return p(mse->weights(x)); });
  }

  if (!include_blocks) return out;

  // Both bottleneck kinds, strided with projection, on 6 voxels per item.
  // In train mode a conv bias feeding a norm has an identically zero
  // gradient, so those biases are checked in eval mode only.
  for (auto kind : {AttentionKind::se, AttentionKind::mamba_se}) {
    BottleneckConfig bc;
    bc.in_channels = 8;
    bc.mid_channels = 4;
    bc.stride = 2;
    bc.attention = kind;
    bc.reduction = 4;
    bc.mamba = check_mamba();
    auto block = std::make_shared<Bottleneck>(bc, rng);
    SparseTensor x = random_sparse(rng, 2, 6, 3, 8);
    ParameterList params;
    block->collect(params, "block");
    jitter(params, rng, 0.1);
    const std::string name = kind == AttentionKind::se ? "se_bottleneck" : "mamba_se_bottleneck";
    ParameterList live;
    for (const auto& e : params)
      if (!ends_with(e.name, "conv1.bias") && !ends_with(e.name, "conv2.bias") &&
          !ends_with(e.name, "conv3.bias") && !ends_with(e.name, "proj_conv.bias"))
        live.push_back(e);
    auto p = probe.make();
    check(name + "_train", with_prefix(live, "feats", x.feats), [=] {
      sparse::KernelMapCache cache;
      return p(block->forward(x, sparse::NormMode::train, cache).feats);
    }, kOpTol, 0, kStep, false, kCompositeFloor);
    const SparseTensor calib = random_sparse(rng, 8, 6, 3, 8);
    {
      sparse::KernelMapCache cache;
      for (int i = 0; i < 60; ++i) (void)block->forward(calib, sparse::NormMode::train, cache);
    }
    auto q = probe.make();
    check(name + "_eval", with_prefix(params, "feats", x.feats), [=] {
      sparse::KernelMapCache cache;
      return q(block->forward(x, sparse::NormMode::eval, cache).feats);
    }, kOpTol, 0, kStep, false, kCompositeFloor);
  }

  // Whole network on a small input.
  {
    NetworkConfig cfg;
    cfg.stem_channels = 4;
    cfg.widths = {2, 2, 4, 4};
    cfg.se_reduction = 4;
    cfg.head_hidden = 4;
    cfg.mamba = check_mamba();
    auto net = std::make_shared<Network>(cfg, seed);
    SparseTensor x = random_sparse(rng, 2, 14, 5, cfg.in_channels());
    jitter(net->parameters(), rng, 0.1);
    // Running statistics from a larger batch keep eval-mode activations at
    // unit scale; the defaults let sparse 3^3 neighbourhoods shrink them
    // layer after layer until ReLU inputs crowd the kink.
    const SparseTensor calib = random_sparse(rng, 8, 14, 5, cfg.in_channels());
    for (int i = 0; i < 60; ++i) (void)net->forward(calib, sparse::NormMode::train);
    auto p = probe.make();
    // Thousands of ReLU inputs: a small step keeps kink crossings rare.
    // Relative error of the whole sampled gradient vector.
    check("network_end_to_end", with_prefix(net->parameters(), "input", x.feats),
          [=] { return p(net->forward(x, sparse::NormMode::eval)); }, kNetTol, 3, 1e-6, true);
  }
  return out;
}

double loglog_slope(const std::vector<TimingPoint>& points) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(points.size());
  for (const auto& p : points) {
    const double x = std::log(static_cast<double>(p.size)), y = std::log(p.seconds);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

namespace {

template <typename Fn>
double best_time(int reps, Fn fn) {
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

}  // namespace

ScalingResult bench_scan(int lo_exp, int hi_exp, std::size_t channels, std::size_t state_dim,
                         int reps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ScalingResult res;
  Tensor a = uniform({channels, state_dim}, rng, -2, -0.2, false);
  Tensor d = uniform({channels}, rng, -1, 1, false);
  for (int e = lo_exp; e <= hi_exp; ++e) {
    const std::size_t t = std::size_t{1} << e;
    Tensor u = uniform({t, channels}, rng, -1, 1, false), delta = uniform({t, channels}, rng, 0.01, 0.5, false),
           b = uniform({t, state_dim}, rng, -1, 1, false), c = uniform({t, state_dim}, rng, -1, 1, false);
    const double s = best_time(reps, [&] { (void)ssm::selective_scan(u, delta, a, b, c, d); });
    res.points.push_back({t, s});
  }
  res.slope = loglog_slope(res.points);
  return res;
}

ScalingResult bench_sparse_conv(const std::vector<std::size_t>& voxel_counts, std::size_t channels,
                                int reps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ScalingResult res;
  sparse::ConvWeights w{uniform({27, channels, channels}, rng, -1, 1, false),
                        uniform({channels}, rng, -1, 1, false)};
  for (auto n : voxel_counts) {
    // Occupancy around 10% of a cube, as in a thinned canopy.
    const int extent = std::max(2, static_cast<int>(std::cbrt(static_cast<double>(n) * 10.0)));
    SparseTensor x = random_sparse(rng, 1, n, extent, channels);
    x.feats.set_requires_grad(false);
    const double s = best_time(reps, [&] {
      const auto km = sparse::build_kernel_map(x, 3, 1);
      (void)sparse::sparse_conv(x, w, km);
    });
    res.points.push_back({n, s});
  }
  res.slope = loglog_slope(res.points);
  return res;
}

}  // namespace mmnet::suite
