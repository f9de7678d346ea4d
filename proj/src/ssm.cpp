#include "mmnet/ssm.hpp"

#include <cmath>
#include <string>

#include "mmnet/errors.hpp"

namespace mmnet::ssm {

namespace {

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (!t.defined() || t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(expected) + ", got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

void require_finite(const Tensor& t, const char* what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

}  // namespace

Tensor lti_scan(const Tensor& x, const Tensor& abar, const Tensor& bbar, const Tensor& cm,
                const Tensor& d, const Tensor& h0) {
  if (x.rank() != 2) throw ShapeError("lti_scan: input must be [T, C], got " + shape_str(x.shape()));
  const std::size_t steps = x.dim(0), ch = x.dim(1);
  if (abar.rank() != 2 || abar.dim(0) != ch) {
    throw ShapeError("lti_scan: Abar must be [C, N], got " + shape_str(abar.shape()));
  }
  const std::size_t ns = abar.dim(1);
  require_shape(bbar, {ch, ns}, "lti_scan Bbar");
  require_shape(cm, {ch, ns}, "lti_scan C");
  require_shape(d, {ch}, "lti_scan D");
  if (h0.defined()) require_shape(h0, {ch, ns}, "lti_scan h0");
  require_finite(abar, "lti_scan Abar");
  require_finite(bbar, "lti_scan Bbar");
  require_finite(cm, "lti_scan C");
  require_finite(d, "lti_scan D");
  if (h0.defined()) require_finite(h0, "lti_scan h0");

  const std::size_t state = ch * ns;
  // hs[t + 1] is h_t; hs[0] is h0.
  std::vector<double> hs((steps + 1) * state, 0.0);
  if (h0.defined()) std::copy(h0.values().begin(), h0.values().end(), hs.begin());
  auto xv = x.values();
  auto av = abar.values(), bv = bbar.values(), cv = cm.values(), dv = d.values();
  std::vector<double> y(steps * ch);
  for (std::size_t t = 0; t < steps; ++t) {
    const double* prev = hs.data() + t * state;
    double* cur = hs.data() + (t + 1) * state;
    for (std::size_t c = 0; c < ch; ++c) {
      const double xt = xv[t * ch + c];
      double acc = 0.0;
      for (std::size_t n = 0; n < ns; ++n) {
        const std::size_t i = c * ns + n;
        cur[i] = av[i] * prev[i] + bv[i] * xt;
        acc += cv[i] * cur[i];
      }
      y[t * ch + c] = acc + dv[c] * xt;
    }
  }

  std::vector<Tensor> inputs{x, abar, bbar, cm, d};
  if (h0.defined()) inputs.push_back(h0);
  return make_result(
      {steps, ch}, std::move(y), inputs,
      [x, abar, bbar, cm, d, h0, steps, ch, ns, hs = std::move(hs)](std::span<const double> g) {
        const std::size_t state = ch * ns;
        auto gx = grad_sink(x);
        auto ga = grad_sink(abar);
        auto gb = grad_sink(bbar);
        auto gc = grad_sink(cm);
        auto gd = grad_sink(d);
        auto xv = x.values();
        auto av = abar.values(), bv = bbar.values(), cv = cm.values(), dv = d.values();
        std::vector<double> gh(state, 0.0);
        for (std::size_t t = steps; t-- > 0;) {
          const double* prev = hs.data() + t * state;
          const double* cur = hs.data() + (t + 1) * state;
          for (std::size_t c = 0; c < ch; ++c) {
            const double gy = g[t * ch + c];
            const double xt = xv[t * ch + c];
            double gxt = gy * dv[c];
            for (std::size_t n = 0; n < ns; ++n) {
              const std::size_t i = c * ns + n;
              // gh holds a_{t+1} * gh_{t+1} from the previous iteration.
              gh[i] += cv[i] * gy;
              if (!gc.empty()) gc[i] += gy * cur[i];
              if (!ga.empty()) ga[i] += gh[i] * prev[i];
              if (!gb.empty()) gb[i] += gh[i] * xt;
              gxt += gh[i] * bv[i];
            }
            if (!gd.empty()) gd[c] += gy * xt;
            if (!gx.empty()) gx[t * ch + c] += gxt;
          }
          for (std::size_t i = 0; i < state; ++i) gh[i] *= av[i];
        }
        if (h0.defined()) {
          auto g0 = grad_sink(h0);
          for (std::size_t i = 0; i < g0.size(); ++i) g0[i] += gh[i];
        }
      });
}

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b,
                      const Tensor& c, const Tensor& d) {
  if (u.rank() != 2) throw ShapeError("selective_scan: input must be [T, E], got " + shape_str(u.shape()));
  const std::size_t steps = u.dim(0), inner = u.dim(1);
  if (a.rank() != 2 || a.dim(0) != inner) {
    throw ShapeError("selective_scan: A must be [E, N], got " + shape_str(a.shape()));
  }
  const std::size_t ns = a.dim(1);
  require_shape(delta, {steps, inner}, "selective_scan delta");
  require_shape(b, {steps, ns}, "selective_scan B");
  require_shape(c, {steps, ns}, "selective_scan C");
  require_shape(d, {inner}, "selective_scan D");
  require_finite(a, "selective_scan A");
  require_finite(d, "selective_scan D");
  for (double v : delta.values()) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw NumericError("selective_scan: step sizes must be positive and finite");
    }
  }

  const std::size_t state = inner * ns;
  std::vector<double> hs((steps + 1) * state, 0.0);
  auto uv = u.values(), dtv = delta.values(), av = a.values(), bv = b.values(), cv = c.values(),
       dv = d.values();
  std::vector<double> y(steps * inner);
  for (std::size_t t = 0; t < steps; ++t) {
    const double* prev = hs.data() + t * state;
    double* cur = hs.data() + (t + 1) * state;
    const double* bt = bv.data() + t * ns;
    const double* ct = cv.data() + t * ns;
    for (std::size_t e = 0; e < inner; ++e) {
      const double dt = dtv[t * inner + e];
      const double du = dt * uv[t * inner + e];
      double acc = 0.0;
      for (std::size_t n = 0; n < ns; ++n) {
        const std::size_t i = e * ns + n;
        cur[i] = std::exp(dt * av[i]) * prev[i] + du * bt[n];
        acc += ct[n] * cur[i];
      }
      y[t * inner + e] = acc + dv[e] * uv[t * inner + e];
    }
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw NumericError("selective_scan: non-finite output");
  }

  return make_result(
      {steps, inner}, std::move(y), {u, delta, a, b, c, d},
      [u, delta, a, b, c, d, steps, inner, ns, hs = std::move(hs)](std::span<const double> g) {
        const std::size_t state = inner * ns;
        auto gu = grad_sink(u);
        auto gdt = grad_sink(delta);
        auto ga = grad_sink(a);
        auto gb = grad_sink(b);
        auto gc = grad_sink(c);
        auto gd = grad_sink(d);
        auto uv = u.values(), dtv = delta.values(), av = a.values(), bv = b.values(),
             cv = c.values(), dv = d.values();
        std::vector<double> gh(state, 0.0);
        std::vector<double> decay(state);
        for (std::size_t t = steps; t-- > 0;) {
          const double* prev = hs.data() + t * state;
          const double* cur = hs.data() + (t + 1) * state;
          const double* bt = bv.data() + t * ns;
          const double* ct = cv.data() + t * ns;
          for (std::size_t e = 0; e < inner; ++e) {
            const std::size_t te = t * inner + e;
            const double gy = g[te];
            const double dt = dtv[te];
            const double ut = uv[te];
            double gu_acc = gy * dv[e];
            double gdt_acc = 0.0;
            for (std::size_t n = 0; n < ns; ++n) {
              const std::size_t i = e * ns + n;
              const double at = std::exp(dt * av[i]);
              decay[i] = at;
              gh[i] += ct[n] * gy;
              if (!gc.empty()) gc[t * ns + n] += gy * cur[i];
              const double g_decay = gh[i] * prev[i] * at;
              gdt_acc += g_decay * av[i] + gh[i] * bt[n] * ut;
              if (!ga.empty()) ga[i] += g_decay * dt;
              if (!gb.empty()) gb[t * ns + n] += gh[i] * dt * ut;
              gu_acc += gh[i] * dt * bt[n];
            }
            if (!gu.empty()) gu[te] += gu_acc;
            if (!gdt.empty()) gdt[te] += gdt_acc;
            if (!gd.empty()) gd[e] += gy * ut;
          }
          for (std::size_t i = 0; i < state; ++i) gh[i] *= decay[i];
        }
      });
}

Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2) throw ShapeError("causal_depthwise_conv: input must be [T, E]");
  const std::size_t steps = x.dim(0), ch = x.dim(1);
  if (w.rank() != 2 || w.dim(1) != ch) {
    throw ShapeError("causal_depthwise_conv: weights must be [K, E], got " + shape_str(w.shape()));
  }
  require_shape(bias, {ch}, "causal_depthwise_conv bias");
  const std::size_t width = w.dim(0);
  auto xv = x.values(), wv = w.values(), bv = bias.values();
  std::vector<double> y(steps * ch);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t e = 0; e < ch; ++e) {
      double acc = bv[e];
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t lag = width - 1 - j;
        if (lag > t) continue;
        acc += wv[j * ch + e] * xv[(t - lag) * ch + e];
      }
      y[t * ch + e] = acc;
    }
  }
  return make_result({steps, ch}, std::move(y), {x, w, bias},
                     [x, w, bias, steps, ch, width](std::span<const double> g) {
                       auto gx = grad_sink(x);
                       auto gw = grad_sink(w);
                       auto gb = grad_sink(bias);
                       auto xv = x.values(), wv = w.values();
                       for (std::size_t t = 0; t < steps; ++t) {
                         for (std::size_t e = 0; e < ch; ++e) {
                           const double gy = g[t * ch + e];
                           if (!gb.empty()) gb[e] += gy;
                           for (std::size_t j = 0; j < width; ++j) {
                             const std::size_t lag = width - 1 - j;
                             if (lag > t) continue;
                             const std::size_t src = (t - lag) * ch + e;
                             if (!gx.empty()) gx[src] += gy * wv[j * ch + e];
                             if (!gw.empty()) gw[j * ch + e] += gy * xv[src];
                           }
                         }
                       }
                     });
}

GridSeq reshape_to_grid(std::size_t n) {
  if (n == 0) throw ContractError("reshape_to_grid: no rows to lay out");
  GridSeq grid;
  std::size_t s = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (s * s > n) --s;
  while ((s + 1) * (s + 1) <= n) ++s;
  grid.side = s;
  for (std::size_t i = 0; i < n; ++i) (i < s * s ? grid.kept : grid.dropped).push_back(i);
  return grid;
}

MambaBlock::MambaBlock(std::size_t channels, const MambaOptions& options, std::mt19937_64& rng)
    : channels_(channels), inner_(options.expand * channels) {
  if (channels == 0 || options.expand == 0 || options.state_dim == 0 || options.conv_width == 0) {
    throw ConfigError("mamba block sizes must be positive");
  }
  if (!(options.dt_min > 0.0) || !(options.dt_max >= options.dt_min)) {
    throw ConfigError("mamba step-size range must satisfy 0 < dt_min <= dt_max");
  }
  const std::size_t rank = options.dt_rank ? options.dt_rank : (channels + 15) / 16;
  const std::size_t ns = options.state_dim;
  in_x_ = Linear(channels, inner_, false, rng);
  in_z_ = Linear(channels, inner_, false, rng);
  {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(options.conv_width));
    std::vector<double> w(options.conv_width * inner_);
    for (auto& v : w) v = bound * dist(rng);
    conv_w_ = Tensor({options.conv_width, inner_}, std::move(w), true);
    conv_b_ = Tensor::zeros({inner_}, true);
  }
  dt_down_ = Linear(inner_, rank, false, rng);
  dt_up_ = Linear(rank, inner_, true, rng);
  {
    // Initial step sizes softplus(bias) spread log-uniformly over [dt_min, dt_max].
    std::uniform_real_distribution<double> dist(std::log(options.dt_min), std::log(options.dt_max));
    auto bias = dt_up_.bias().mutable_values();
    for (auto& v : bias) {
      const double dt = std::exp(dist(rng));
      v = dt + std::log(-std::expm1(-dt));
    }
  }
  proj_b_ = Linear(inner_, ns, false, rng);
  proj_c_ = Linear(inner_, ns, false, rng);
  std::vector<double> a_log(inner_ * ns);
  for (std::size_t e = 0; e < inner_; ++e) {
    for (std::size_t n = 0; n < ns; ++n) a_log[e * ns + n] = std::log(static_cast<double>(n + 1));
  }
  a_log_ = Tensor({inner_, ns}, std::move(a_log), true);
  d_ = Tensor::filled({inner_}, 1.0, true);
  out_ = Linear(inner_, channels, false, rng);
}

Tensor MambaBlock::forward(const Tensor& seq) const {
  if (seq.rank() != 2 || seq.dim(1) != channels_) {
    throw ShapeError("mamba block expects [T, " + std::to_string(channels_) + "], got " +
                     shape_str(seq.shape()));
  }
  if (seq.dim(0) == 0) throw ContractError("mamba block: empty sequence");
  const Tensor xs = silu(causal_depthwise_conv(in_x_.forward(seq), conv_w_, conv_b_));
  const Tensor z = in_z_.forward(seq);
  const Tensor delta = softplus(dt_up_.forward(dt_down_.forward(xs)));
  const Tensor a = scale(exp(a_log_), -1.0);
  const Tensor y = selective_scan(xs, delta, a, proj_b_.forward(xs), proj_c_.forward(xs), d_);
  return add(seq, out_.forward(mul(y, silu(z))));
}

void MambaBlock::collect(ParameterList& out, const std::string& prefix) const {
  in_x_.collect(out, prefix + ".in_x");
  in_z_.collect(out, prefix + ".in_z");
  out.push_back({prefix + ".conv.weight", conv_w_});
  out.push_back({prefix + ".conv.bias", conv_b_});
  dt_down_.collect(out, prefix + ".dt_down");
  dt_up_.collect(out, prefix + ".dt_up");
  proj_b_.collect(out, prefix + ".proj_b");
  proj_c_.collect(out, prefix + ".proj_c");
  out.push_back({prefix + ".a_log", a_log_});
  out.push_back({prefix + ".d", d_});
  out_.collect(out, prefix + ".out");
}

void MambaBlock::zero_projections() {
  for (Linear* l : {&in_x_, &in_z_, &proj_b_, &proj_c_, &out_}) {
    auto w = l->weight().mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
  }
}

MambaSeLayer::MambaSeLayer(std::size_t channels, std::size_t reduction,
                           const MambaOptions& options, std::mt19937_64& rng)
    : block_(channels, options, rng) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("channel count " + std::to_string(channels) +
                      " is not divisible by reduction " + std::to_string(reduction));
  }
  fc1_ = Linear(channels, channels / reduction, false, rng);
  fc2_ = Linear(channels / reduction, channels, false, rng);
}

Tensor MambaSeLayer::weights(const sparse::SparseTensor& x) const {
  const auto offsets = x.batch_offsets();
  const std::size_t ch = x.channels();
  std::vector<Tensor> pooled;
  pooled.reserve(x.batch_size);
  for (std::size_t b = 0; b < x.batch_size; ++b) {
    const std::size_t rows = offsets[b + 1] - offsets[b];
    if (rows == 0) {
      throw DomainError("mamba attention: batch item " + std::to_string(b) + " has no coordinates");
    }
    const GridSeq grid = reshape_to_grid(rows);
    const Tensor seq = slice_rows(x.feats, offsets[b], grid.kept.size());
    pooled.push_back(reshape(reduce(ReduceOp::mean, block_.forward(seq), 0), {1, ch}));
  }
  const Tensor z = concat_rows(pooled);
  return sigmoid(fc2_.forward(gelu(fc1_.forward(z))));
}

void MambaSeLayer::collect(ParameterList& out, const std::string& prefix) const {
  block_.collect(out, prefix + ".mamba");
  fc1_.collect(out, prefix + ".fc1");
  fc2_.collect(out, prefix + ".fc2");
}

}  // namespace mmnet::ssm
