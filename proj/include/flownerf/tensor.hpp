#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flownerf/common.hpp"

namespace flownerf {

// Dense f64 arrays of rank 0 (scalar), 1 (vector) or 2 (row-major matrix),
// recorded on a dynamic tape for reverse-mode differentiation. The tape is
// rebuilt every iteration; leaf parameters live outside it and keep their
// gradient buffers across tape clears.

using Shape = std::vector<long long>;

long long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> v;              // values, row-major
  std::vector<double> g;              // gradient, lazily allocated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;  // accumulates into parents' grads

  long long numel() const { return static_cast<long long>(v.size()); }
  // Ensures the grad buffer exists (zero-filled) and returns it.
  std::vector<double>& grad_buf() {
    if (g.empty()) g.assign(v.size(), 0.0);
    return g;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);
  static Tensor from_data(Shape s, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf with requires_grad=true; participates in optimization.
  static Tensor param(Shape s, std::vector<double> values);

  bool defined() const { return static_cast<bool>(n); }
  const Shape& shape() const { return n->shape; }
  long long numel() const { return n->numel(); }
  long long rank() const { return static_cast<long long>(n->shape.size()); }
  // 2-d view of the shape: scalar -> (1,1), vector -> (1,C).
  long long rows() const;
  long long cols() const;

  bool requires_grad() const { return n->requires_grad; }
  void set_requires_grad(bool rg);

  std::vector<double>& data() { return n->v; }
  const std::vector<double>& data() const { return n->v; }
  // Gradient buffer; empty vector if it was never written to.
  const std::vector<double>& grad() const { return n->g; }
  bool has_grad() const { return !n->g.empty(); }
  void zero_grad() { n->g.clear(); }

  double item() const;
  // Constant copy sharing no graph history.
  Tensor detach() const;

  std::shared_ptr<detail::Node> n;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  std::vector<std::shared_ptr<detail::Node>> nodes;
  void clear() { nodes.clear(); }
  std::size_t size() const { return nodes.size(); }
};

class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

Tape* active_tape();
bool grad_enabled();

// Backpropagates from a scalar loss through the active tape in reverse
// insertion order. Leaf grads accumulate across calls; intermediate grads are
// reset at entry so a second call on the same graph adds one more full pass.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops broadcast: same shape, scalar against anything,
// row vector (1,C)/(C,) against (N,C), and column (N,1) against (N,C).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Keep-dims reduction of a matrix: axis=0 -> (1,C), axis=1 -> (N,1).
Tensor sum_axis(const Tensor& a, int axis);

// Cumulative product along axis (matrix input). The exclusive variant shifts
// by one with a leading 1 (transmittance form).
Tensor cumprod(const Tensor& a, int axis);
Tensor cumprod_exclusive(const Tensor& a, int axis);

// Concatenation along the last axis. All rank-2 inputs with equal row counts
// concatenate columns; all rank<=1 inputs concatenate into one vector.
Tensor concat(const std::vector<Tensor>& parts);

Tensor slice_cols(const Tensor& a, long long start, long long len);
Tensor slice_rows(const Tensor& a, long long start, long long len);
Tensor reshape(const Tensor& a, Shape s);

// (N,C) -> (N*times, C) with each row repeated `times` consecutive slots.
Tensor repeat_rows(const Tensor& a, long long times);
Tensor gather_rows(const Tensor& a, const std::vector<long long>& idx);

Tensor l1_norm(const Tensor& a);  // sum |x|
Tensor l2_norm(const Tensor& a);  // sqrt(sum x^2)

// Differentiable bilinear lookup into a constant H x W x C image; uv is (P,2)
// in continuous pixel coordinates, clamped to the border.
Tensor bilinear_sample(std::shared_ptr<const std::vector<double>> image,
                       long long height, long long width, long long channels,
                       const Tensor& uv);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

}  // namespace flownerf
