#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node holding a row-major value
// buffer and, for differentiable tensors, a gradient buffer of the same size.
// Operations record a backward rule on the thread's active Tape (see
// TapeScope) whenever at least one operand requires a gradient. Without an
// active tape nothing is recorded and results are plain constants.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  // Zero-filled on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_node(std::shared_ptr<TensorNode> node);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Direct write access; meant for leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // Zeros when nothing has been accumulated yet.
  std::span<const double> grad() const;
  void zero_grad();

  // Copy of the values with no history.
  Tensor detach() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Ordered record of differentiable operations. Entries are appended in
// execution order, so reverse iteration is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::shared_ptr<TensorNode> output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays every entry once, newest first.
  // Throws ContractError for a non-scalar loss.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Tape of the calling thread, or nullptr when no TapeScope is open.
  static Tape* current();

 private:
  struct Entry {
    std::shared_ptr<TensorNode> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// --- building blocks for operations defined outside this header ---------

// Gradient buffer of `t` when it takes part in differentiation, else empty.
std::span<double> grad_sink(const Tensor& t);

// Creates the result of an operation. When a tape is active and any input
// requires a gradient, the result requires one as well and `backward` is
// recorded; it receives the result's accumulated gradient.
using OpBackward = std::function<void(std::span<const double> out_grad)>;
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, OpBackward backward);
Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs, OpBackward backward);

// --- operations ---------------------------------------------------------

enum class Broadcast {
  none,  // shapes equal
  rows,  // y has shape [n] and applies to every row of x[m, n]
  cols,  // y has shape [m] and applies to every column of x[m, n]
};

enum class ReduceOp { sum, mean, max };

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& x, const Tensor& y, Broadcast mode = Broadcast::none);
Tensor sub(const Tensor& x, const Tensor& y);
Tensor mul(const Tensor& x, const Tensor& y, Broadcast mode = Broadcast::none);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
// Exact form x * Phi(x) with Phi the standard normal CDF.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor silu(const Tensor& x);

// Removes `axis`; throws DomainError when that extent is zero.
Tensor reduce(ReduceOp op, const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

Tensor reshape(const Tensor& x, Shape shape);
// Rows [begin, begin + count) of a rank-2 tensor.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(const std::vector<Tensor>& parts);

namespace kernels {

// c[m,n] += a[m,k] * b[k,n]; accumulation over k is ascending for each
// element, independent of m.
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const double* a,
              const double* b, double* c);
// c[m,k] += a[m,n] * b[k,n]^T
void gemm_acc_bt(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c);
// c[k,n] += a[m,k]^T * b[m,n]
void gemm_acc_at(std::size_t m, std::size_t k, std::size_t n, const double* a,
                 const double* b, double* c);

double gelu(double x);
double gelu_grad(double x);
double sigmoid(double x);
double softplus(double x);

}  // namespace kernels

}  // namespace mmnet
