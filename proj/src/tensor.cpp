#include "mmnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mmnet/errors.hpp"

namespace mmnet {

namespace {

thread_local Tape* g_current_tape = nullptr;

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a rank-2 tensor, got " +
                     shape_str(t.shape()));
  }
}

template <class F>
std::vector<double> map_values(const Tensor& x, F f) {
  auto in = x.values();
  std::vector<double> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), f);
  return out;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorNode::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// --- Tensor --------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return node_->value.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->value.at(row * node_->shape.at(1) + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

std::span<const double> Tensor::grad() const { return node_->grad_buffer(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

// --- Tape ----------------------------------------------------------------

void Tape::record(std::shared_ptr<TensorNode> output, BackwardFn backward) {
  entries_.push_back({std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any differentiable input");
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward();
  }
}

Tape* Tape::current() { return g_current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }

TapeScope::~TapeScope() { g_current_tape = previous_; }

// --- op plumbing -----------------------------------------------------------

std::span<double> grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.node()->grad_buffer();
}

namespace {

template <class Inputs>
Tensor make_result_impl(Shape shape, std::vector<double> values, const Inputs& inputs,
                        OpBackward backward) {
  Tensor out(std::move(shape), std::move(values), false);
  Tape* tape = Tape::current();
  if (!tape) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.set_requires_grad(true);
  TensorNode* raw = out.node().get();
  tape->record(out.node(), [raw, fn = std::move(backward)] {
    fn(std::span<const double>(raw->grad));
  });
  return out;
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, OpBackward backward) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   OpBackward backward) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(backward));
}

// --- kernels -------------------------------------------------------------

namespace kernels {

void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
              double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_acc_bt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                 double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

void gemm_acc_at(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                 double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

}  // namespace kernels

// --- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_acc(m, k, n, a.values().data(), b.values().data(), out.data());
  return make_result({m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         kernels::gemm_acc_bt(m, n, k, g.data(), b.values().data(), ga.data());
                       }
                       if (auto gb = grad_sink(b); !gb.empty()) {
                         kernels::gemm_acc_at(m, k, n, a.values().data(), g.data(), gb.data());
                       }
                     });
}

namespace {

// Index of the broadcast operand for element (i, j) of an [m, n] tensor.
struct BroadcastIndex {
  Broadcast mode;
  std::size_t n;
  std::size_t operator()(std::size_t flat) const {
    switch (mode) {
      case Broadcast::rows:
        return flat % n;
      case Broadcast::cols:
        return flat / n;
      case Broadcast::none:
        break;
    }
    return flat;
  }
};

BroadcastIndex check_broadcast(const Tensor& x, const Tensor& y, Broadcast mode,
                               const char* what) {
  if (mode == Broadcast::none) {
    if (x.shape() != y.shape()) {
      throw ShapeError(std::string(what) + ": shapes differ: " + shape_str(x.shape()) + " vs " +
                       shape_str(y.shape()));
    }
    return {mode, 1};
  }
  if (x.rank() != 2 || y.rank() != 1) {
    throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(y.shape()) +
                     " over " + shape_str(x.shape()));
  }
  const std::size_t want = mode == Broadcast::rows ? x.dim(1) : x.dim(0);
  if (y.dim(0) != want) {
    throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(y.shape()) +
                     " over " + shape_str(x.shape()));
  }
  return {mode, x.dim(1)};
}

}  // namespace

Tensor add(const Tensor& x, const Tensor& y, Broadcast mode) {
  const auto idx = check_broadcast(x, y, mode, "add");
  auto xv = x.values();
  auto yv = y.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[idx(i)];
  return make_result(x.shape(), std::move(out), {x, y}, [x, y, idx](std::span<const double> g) {
    if (auto gx = grad_sink(x); !gx.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (auto gy = grad_sink(y); !gy.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gy[idx(i)] += g[i];
    }
  });
}

Tensor sub(const Tensor& x, const Tensor& y) {
  check_broadcast(x, y, Broadcast::none, "sub");
  auto xv = x.values();
  auto yv = y.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] - yv[i];
  return make_result(x.shape(), std::move(out), {x, y}, [x, y](std::span<const double> g) {
    if (auto gx = grad_sink(x); !gx.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (auto gy = grad_sink(y); !gy.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& x, const Tensor& y, Broadcast mode) {
  const auto idx = check_broadcast(x, y, mode, "mul");
  auto xv = x.values();
  auto yv = y.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[idx(i)];
  return make_result(x.shape(), std::move(out), {x, y}, [x, y, idx](std::span<const double> g) {
    auto xv = x.values();
    auto yv = y.values();
    if (auto gx = grad_sink(x); !gx.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[idx(i)];
    }
    if (auto gy = grad_sink(y); !gy.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gy[idx(i)] += g[i] * xv[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  auto out = map_values(x, [factor](double v) { return v * factor; });
  return make_result(x.shape(), std::move(out), {x}, [x, factor](std::span<const double> g) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

namespace {

// Pointwise op whose derivative is expressed through input and output.
template <class F, class D>
Tensor pointwise(const Tensor& x, F f, D dfdx) {
  auto out = map_values(x, f);
  Tensor result;
  auto out_copy = out;
  result = make_result(x.shape(), std::move(out), {x},
                       [x, y = std::move(out_copy), dfdx](std::span<const double> g) {
                         auto gx = grad_sink(x);
                         auto xv = x.values();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gx[i] += g[i] * dfdx(xv[i], y[i]);
                         }
                       });
  return result;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return pointwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return pointwise(x, kernels::gelu, [](double v, double) { return kernels::gelu_grad(v); });
}

Tensor sigmoid(const Tensor& x) {
  return pointwise(x, kernels::sigmoid, [](double, double s) { return s * (1.0 - s); });
}

Tensor softplus(const Tensor& x) {
  return pointwise(x, kernels::softplus, [](double v, double) { return kernels::sigmoid(v); });
}

Tensor exp(const Tensor& x) {
  return pointwise(
      x, [](double v) { return std::exp(v); }, [](double, double e) { return e; });
}

Tensor silu(const Tensor& x) {
  return pointwise(
      x, [](double v) { return v * kernels::sigmoid(v); },
      [](double v, double) {
        const double s = kernels::sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor reduce(ReduceOp op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("reduce: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  const std::size_t extent = shape[axis];
  if (extent == 0) throw DomainError("reduce: axis " + std::to_string(axis) + " is empty");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }

  auto xv = x.values();
  std::vector<double> out(outer * inner, op == ReduceOp::max ? -INFINITY : 0.0);
  std::vector<std::size_t> argmax(op == ReduceOp::max ? out.size() : 0, 0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* src = xv.data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        if (op == ReduceOp::max) {
          if (src[i] > dst[i]) {
            dst[i] = src[i];
            argmax[o * inner + i] = e;
          }
        } else {
          dst[i] += src[i];
        }
      }
    }
  }
  if (op == ReduceOp::mean) {
    for (auto& v : out) v /= static_cast<double>(extent);
  }
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, op, outer, extent, inner, argmax = std::move(argmax)](
                         std::span<const double> g) {
                       auto gx = grad_sink(x);
                       const double w = op == ReduceOp::mean ? 1.0 / static_cast<double>(extent)
                                                             : 1.0;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < inner; ++i) {
                           const double gv = g[o * inner + i];
                           if (op == ReduceOp::max) {
                             gx[(o * extent + argmax[o * inner + i]) * inner + i] += gv;
                             continue;
                           }
                           for (std::size_t e = 0; e < extent; ++e) {
                             gx[(o * extent + e) * inner + i] += gv * w;
                           }
                         }
                       }
                     });
}

Tensor sum_all(const Tensor& x) {
  return reduce(ReduceOp::sum, reshape(x, {x.numel()}), 0);
}

Tensor mean_all(const Tensor& x) {
  return reduce(ReduceOp::mean, reshape(x, {x.numel()}), 0);
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  const Tensor diff = sub(pred, target);
  return mean_all(mul(diff, diff));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](std::span<const double> g) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_rows");
  if (begin + count > x.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                          xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  return make_result({count, cols}, std::move(out), {x},
                     [x, begin, cols](std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank2(x, "gather_rows");
  const std::size_t cols = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(rows.size() * cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return make_result({rows.size(), cols}, std::move(out), {x},
                     [x, cols, idx = std::vector<std::size_t>(rows.begin(), rows.end())](
                         std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           gx[idx[r] * cols + c] += g[r * cols + c];
                         }
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                       " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result({rows, cols}, std::move(out), parts, [parts](std::span<const double> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      auto gp = grad_sink(p);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
      offset += p.numel();
    }
  });
}

}  // namespace mmnet
