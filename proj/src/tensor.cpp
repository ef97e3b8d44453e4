#include "flownerf/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <utility>

namespace flownerf {

namespace {

using detail::Node;
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>;

thread_local Tape* g_tape = nullptr;
thread_local bool g_grad_enabled = true;

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by op '") + op +
                         "'");
    }
  }
}

std::shared_ptr<Node> make_leaf(Shape s, std::vector<double> values,
                                bool requires_grad, const char* op) {
  if (static_cast<long long>(values.size()) != shape_numel(s)) {
    throw ShapeError(std::string(op) + ": data length " +
                     std::to_string(values.size()) + " does not match shape " +
                     shape_str(s));
  }
  check_finite(values, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(s);
  n->v = std::move(values);
  n->requires_grad = requires_grad;
  n->op = op;
  return n;
}

// Creates the output node for an op, wires parents/backward and records it on
// the active tape when it participates in differentiation.
Tensor make_op(const char* op, Shape shape, std::vector<double> values,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backfn) {
  check_finite(values, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->v = std::move(values);
  n->op = op;
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  n->requires_grad = rg;
  if (rg) {
    if (!g_tape) {
      throw ContractError(std::string("op '") + op +
                          "' touches differentiable tensors outside a tape "
                          "scope");
    }
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
    g_tape->nodes.push_back(n);
  }
  Tensor t;
  t.n = std::move(n);
  return t;
}

struct Dims {
  long long r, c;
};

Dims dims2(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  return {s[0], s[1]};
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                     shape_str(t.shape()));
  }
}

// Broadcast layout for binary elementwise ops. Strides are zero along
// broadcast dimensions so the same loop covers every supported case.
struct Broadcast {
  long long R, C;
  long long asr, asc, bsr, bsc;
  Shape out_shape;
};

Broadcast broadcast_layout(const Tensor& a, const Tensor& b, const char* op) {
  Dims da = dims2(a.shape());
  Dims db = dims2(b.shape());
  long long R = std::max(da.r, db.r);
  long long C = std::max(da.c, db.c);
  auto ok = [](long long d, long long full) { return d == full || d == 1; };
  if (!ok(da.r, R) || !ok(db.r, R) || !ok(da.c, C) || !ok(db.c, C)) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " do not broadcast");
  }
  Broadcast bc;
  bc.R = R;
  bc.C = C;
  bc.asr = (da.r == 1) ? 0 : da.c;
  bc.asc = (da.c == 1) ? 0 : 1;
  bc.bsr = (db.r == 1) ? 0 : db.c;
  bc.bsc = (db.c == 1) ? 0 : 1;
  long long out_rank = std::max(a.rank(), b.rank());
  if (out_rank == 0) {
    bc.out_shape = {};
  } else if (out_rank == 1) {
    bc.out_shape = {C};
  } else {
    bc.out_shape = {R, C};
  }
  return bc;
}

// fval(x,y) -> out; dfa/dfb give d out / d a (resp. b) from the inputs.
template <class F, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F fval,
                 DA dfa, DB dfb) {
  require_defined(a, op);
  require_defined(b, op);
  Broadcast bc = broadcast_layout(a, b, op);
  std::vector<double> out(static_cast<std::size_t>(bc.R * bc.C));
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (long long i = 0; i < bc.R; ++i) {
    for (long long j = 0; j < bc.C; ++j) {
      out[i * bc.C + j] = fval(av[i * bc.asr + j * bc.asc], bv[i * bc.bsr + j * bc.bsc]);
    }
  }
  auto an = a.n;
  auto bn = b.n;
  return make_op(op, bc.out_shape, std::move(out), {an, bn},
                 [bc, an, bn, dfa, dfb](Node& self) {
                   const double* g = self.g.data();
                   const double* av = an->v.data();
                   const double* bv = bn->v.data();
                   if (an->requires_grad) {
                     double* ga = an->grad_buf().data();
                     for (long long i = 0; i < bc.R; ++i)
                       for (long long j = 0; j < bc.C; ++j) {
                         double x = av[i * bc.asr + j * bc.asc];
                         double y = bv[i * bc.bsr + j * bc.bsc];
                         ga[i * bc.asr + j * bc.asc] += g[i * bc.C + j] * dfa(x, y);
                       }
                   }
                   if (bn->requires_grad) {
                     double* gb = bn->grad_buf().data();
                     for (long long i = 0; i < bc.R; ++i)
                       for (long long j = 0; j < bc.C; ++j) {
                         double x = av[i * bc.asr + j * bc.asc];
                         double y = bv[i * bc.bsr + j * bc.bsc];
                         gb[i * bc.bsr + j * bc.bsc] += g[i * bc.C + j] * dfb(x, y);
                       }
                   }
                 });
}

// fval maps input value to output; df(x, y) is the local derivative given
// input x and output y.
template <class F, class D>
Tensor unary_op(const char* op, const Tensor& a, F fval, D df) {
  require_defined(a, op);
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fval(a.data()[i]);
  auto an = a.n;
  return make_op(op, a.shape(), std::move(out), {an}, [an, df](Node& self) {
    if (!an->requires_grad) return;
    double* ga = an->grad_buf().data();
    const double* g = self.g.data();
    const double* x = an->v.data();
    const double* y = self.v.data();
    for (std::size_t i = 0; i < self.v.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

long long shape_numel(const Shape& s) {
  long long n = 1;
  for (long long d : s) {
    if (d <= 0) throw ShapeError("shape dimensions must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0); }

Tensor Tensor::full(Shape s, double value) {
  long long n = shape_numel(s);
  Tensor t;
  t.n = make_leaf(std::move(s), std::vector<double>(static_cast<std::size_t>(n), value),
                  false, "full");
  return t;
}

Tensor Tensor::from_data(Shape s, std::vector<double> values) {
  Tensor t;
  t.n = make_leaf(std::move(s), std::move(values), false, "from_data");
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.n = make_leaf({}, {value}, false, "scalar");
  return t;
}

Tensor Tensor::param(Shape s, std::vector<double> values) {
  Tensor t;
  t.n = make_leaf(std::move(s), std::move(values), true, "param");
  return t;
}

long long Tensor::rows() const { return dims2(n->shape).r; }
long long Tensor::cols() const { return dims2(n->shape).c; }

void Tensor::set_requires_grad(bool rg) {
  if (n->backfn) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  n->requires_grad = rg;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item(): tensor has shape " + shape_str(shape()));
  }
  return n->v[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.n = make_leaf(n->shape, n->v, false, "detach");
  return t;
}

// ---------------------------------------------------------------------------
// Tape / scopes

TapeScope::TapeScope(Tape& t) : prev_(g_tape) { g_tape = &t; }
TapeScope::~TapeScope() { g_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

Tape* active_tape() { return g_tape; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // nothing reachable
  if (!g_tape) throw ContractError("backward: no active tape");

  // Intermediate grads restart from zero each call; leaves accumulate.
  for (auto& node : g_tape->nodes) node->g.clear();
  loss.n->grad_buf()[0] += 1.0;

  for (auto it = g_tape->nodes.rbegin(); it != g_tape->nodes.rend(); ++it) {
    Node& node = **it;
    if (node.backfn && !node.g.empty()) node.backfn(node);
  }

  // Engine contract: grads are finite after backward.
  for (auto& node : g_tape->nodes) {
    for (const auto& p : node->parents) {
      if (p->backfn == nullptr && p->requires_grad && !p->g.empty()) {
        check_finite(p->g, node->op);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor sin(const Tensor& a) {
  return unary_op(
      "sin", a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary_op(
      "cos", a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a,
      [](double x) { return x > 34.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(x); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  long long M = a.shape()[0], K = a.shape()[1], K2 = b.shape()[0], N = b.shape()[1];
  if (K != K2) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(M * N));
  {
    ConstMatMap A(a.data().data(), M, K);
    ConstMatMap B(b.data().data(), K, N);
    MatMap C(out.data(), M, N);
    C.noalias() = A * B;
  }
  auto an = a.n;
  auto bn = b.n;
  return make_op("matmul", {M, N}, std::move(out), {an, bn},
                 [an, bn, M, K, N](Node& self) {
                   ConstMatMap G(self.g.data(), M, N);
                   if (an->requires_grad) {
                     ConstMatMap B(bn->v.data(), K, N);
                     MatMap GA(an->grad_buf().data(), M, K);
                     GA.noalias() += G * B.transpose();
                   }
                   if (bn->requires_grad) {
                     ConstMatMap A(an->v.data(), M, K);
                     MatMap GB(bn->grad_buf().data(), K, N);
                     GB.noalias() += A.transpose() * G;
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require_rank2(a, "transpose");
  long long R = a.shape()[0], C = a.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(R * C));
  for (long long i = 0; i < R; ++i)
    for (long long j = 0; j < C; ++j) out[j * R + i] = a.data()[i * C + j];
  auto an = a.n;
  return make_op("transpose", {C, R}, std::move(out), {an}, [an, R, C](Node& self) {
    if (!an->requires_grad) return;
    double* ga = an->grad_buf().data();
    const double* g = self.g.data();
    for (long long j = 0; j < C; ++j)
      for (long long i = 0; i < R; ++i) ga[i * C + j] += g[j * R + i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto an = a.n;
  return make_op("sum", {}, {s}, {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    double g = self.g[0];
    double* ga = an->grad_buf().data();
    for (std::size_t i = 0; i < an->v.size(); ++i) ga[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  double inv = 1.0 / static_cast<double>(a.numel());
  return mul(sum(a), Tensor::scalar(inv));
}

Tensor sum_axis(const Tensor& a, int axis) {
  require_defined(a, "sum_axis");
  require_rank2(a, "sum_axis");
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  long long R = a.shape()[0], C = a.shape()[1];
  Shape out_shape = (axis == 0) ? Shape{1, C} : Shape{R, 1};
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
  const double* av = a.data().data();
  if (axis == 0) {
    for (long long i = 0; i < R; ++i)
      for (long long j = 0; j < C; ++j) out[j] += av[i * C + j];
  } else {
    for (long long i = 0; i < R; ++i)
      for (long long j = 0; j < C; ++j) out[i] += av[i * C + j];
  }
  auto an = a.n;
  return make_op("sum_axis", out_shape, std::move(out), {an},
                 [an, R, C, axis](Node& self) {
                   if (!an->requires_grad) return;
                   double* ga = an->grad_buf().data();
                   const double* g = self.g.data();
                   for (long long i = 0; i < R; ++i)
                     for (long long j = 0; j < C; ++j)
                       ga[i * C + j] += (axis == 0) ? g[j] : g[i];
                 });
}

// ---------------------------------------------------------------------------
// Cumulative products. Backward uses the division-free suffix recurrence so
// exact zeros in the input (fully opaque samples) stay well-defined.

namespace {

Tensor cumprod_impl(const Tensor& a, int axis, bool exclusive, const char* op) {
  require_defined(a, op);
  require_rank2(a, op);
  if (axis != 0 && axis != 1) throw ShapeError(std::string(op) + ": axis must be 0 or 1");
  long long R = a.shape()[0], C = a.shape()[1];
  long long lanes = (axis == 1) ? R : C;
  long long len = (axis == 1) ? C : R;
  auto at = [axis, C](long long lane, long long k) -> long long {
    return (axis == 1) ? lane * C + k : k * C + lane;
  };
  std::vector<double> out(static_cast<std::size_t>(R * C));
  const double* av = a.data().data();
  for (long long lane = 0; lane < lanes; ++lane) {
    double p = 1.0;
    for (long long k = 0; k < len; ++k) {
      if (exclusive) {
        out[at(lane, k)] = p;
        p *= av[at(lane, k)];
      } else {
        p *= av[at(lane, k)];
        out[at(lane, k)] = p;
      }
    }
  }
  auto an = a.n;
  return make_op(op, {R, C}, std::move(out), {an},
                 [an, at, lanes, len, exclusive](Node& self) {
                   if (!an->requires_grad) return;
                   double* ga = an->grad_buf().data();
                   const double* g = self.g.data();
                   const double* x = an->v.data();
                   for (long long lane = 0; lane < lanes; ++lane) {
                     // P_k = prod_{l<k} x_l;  grad_k = P_k * B_k with
                     // inclusive:  B_k = g_k + x_{k+1} B_{k+1}
                     // exclusive:  B_k = g_{k+1} + x_{k+1} B_{k+1}
                     double B = 0.0;
                     std::vector<double> bs(static_cast<std::size_t>(len));
                     for (long long k = len - 1; k >= 0; --k) {
                       if (exclusive) {
                         B = (k + 1 < len) ? g[at(lane, k + 1)] + x[at(lane, k + 1)] * B
                                           : 0.0;
                       } else {
                         B = g[at(lane, k)] + ((k + 1 < len) ? x[at(lane, k + 1)] * B : 0.0);
                       }
                       bs[static_cast<std::size_t>(k)] = B;
                     }
                     double P = 1.0;
                     for (long long k = 0; k < len; ++k) {
                       ga[at(lane, k)] += P * bs[static_cast<std::size_t>(k)];
                       P *= x[at(lane, k)];
                     }
                   }
                 });
}

}  // namespace

Tensor cumprod(const Tensor& a, int axis) { return cumprod_impl(a, axis, false, "cumprod"); }
Tensor cumprod_exclusive(const Tensor& a, int axis) {
  return cumprod_impl(a, axis, true, "cumprod_exclusive");
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: empty input list");
  for (const auto& p : parts) require_defined(p, "concat");
  bool any_rank2 = false;
  for (const auto& p : parts) any_rank2 = any_rank2 || p.rank() == 2;

  long long R = any_rank2 ? dims2(parts[0].shape()).r : 1;
  long long C = 0;
  for (const auto& p : parts) {
    Dims d = dims2(p.shape());
    if (any_rank2 && d.r != R) {
      throw ShapeError("concat: row counts differ, " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    }
    C += d.c;
  }
  std::vector<double> out(static_cast<std::size_t>(R * C));
  long long col0 = 0;
  for (const auto& p : parts) {
    Dims d = dims2(p.shape());
    const double* pv = p.data().data();
    for (long long i = 0; i < R; ++i)
      for (long long j = 0; j < d.c; ++j) out[i * C + col0 + j] = pv[i * d.c + j];
    col0 += d.c;
  }
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) parents.push_back(p.n);
  Shape out_shape = any_rank2 ? Shape{R, C} : Shape{C};
  return make_op("concat", out_shape, std::move(out), std::move(parents),
                 [R, C](Node& self) {
                   const double* g = self.g.data();
                   long long col0 = 0;
                   for (auto& pn : self.parents) {
                     Dims d = dims2(pn->shape);
                     if (pn->requires_grad) {
                       double* gp = pn->grad_buf().data();
                       for (long long i = 0; i < R; ++i)
                         for (long long j = 0; j < d.c; ++j)
                           gp[i * d.c + j] += g[i * C + col0 + j];
                     }
                     col0 += d.c;
                   }
                 });
}

Tensor slice_cols(const Tensor& a, long long start, long long len) {
  require_defined(a, "slice_cols");
  Dims d = dims2(a.shape());
  if (start < 0 || len <= 0 || start + len > d.c) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(d.r * len));
  for (long long i = 0; i < d.r; ++i)
    for (long long j = 0; j < len; ++j) out[i * len + j] = a.data()[i * d.c + start + j];
  Shape out_shape = (a.rank() == 2) ? Shape{d.r, len} : Shape{len};
  auto an = a.n;
  return make_op("slice_cols", out_shape, std::move(out), {an},
                 [an, d, start, len](Node& self) {
                   if (!an->requires_grad) return;
                   double* ga = an->grad_buf().data();
                   const double* g = self.g.data();
                   for (long long i = 0; i < d.r; ++i)
                     for (long long j = 0; j < len; ++j)
                       ga[i * d.c + start + j] += g[i * len + j];
                 });
}

Tensor slice_rows(const Tensor& a, long long start, long long len) {
  require_defined(a, "slice_rows");
  require_rank2(a, "slice_rows");
  long long R = a.shape()[0], C = a.shape()[1];
  if (start < 0 || len <= 0 || start + len > R) {
    throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + start * C,
                          a.data().begin() + (start + len) * C);
  auto an = a.n;
  return make_op("slice_rows", {len, C}, std::move(out), {an},
                 [an, start, len, C](Node& self) {
                   if (!an->requires_grad) return;
                   double* ga = an->grad_buf().data();
                   const double* g = self.g.data();
                   for (long long i = 0; i < len * C; ++i) ga[start * C + i] += g[i];
                 });
}

Tensor reshape(const Tensor& a, Shape s) {
  require_defined(a, "reshape");
  if (shape_numel(s) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(s));
  }
  auto an = a.n;
  return make_op("reshape", std::move(s), a.data(), {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    double* ga = an->grad_buf().data();
    const double* g = self.g.data();
    for (std::size_t i = 0; i < self.v.size(); ++i) ga[i] += g[i];
  });
}

Tensor repeat_rows(const Tensor& a, long long times) {
  require_defined(a, "repeat_rows");
  if (times <= 0) throw ShapeError("repeat_rows: times must be positive");
  Dims d = dims2(a.shape());
  std::vector<double> out(static_cast<std::size_t>(d.r * times * d.c));
  for (long long i = 0; i < d.r; ++i)
    for (long long t = 0; t < times; ++t)
      for (long long j = 0; j < d.c; ++j)
        out[(i * times + t) * d.c + j] = a.data()[i * d.c + j];
  auto an = a.n;
  return make_op("repeat_rows", {d.r * times, d.c}, std::move(out), {an},
                 [an, d, times](Node& self) {
                   if (!an->requires_grad) return;
                   double* ga = an->grad_buf().data();
                   const double* g = self.g.data();
                   for (long long i = 0; i < d.r; ++i)
                     for (long long t = 0; t < times; ++t)
                       for (long long j = 0; j < d.c; ++j)
                         ga[i * d.c + j] += g[(i * times + t) * d.c + j];
                 });
}

Tensor gather_rows(const Tensor& a, const std::vector<long long>& idx) {
  require_defined(a, "gather_rows");
  require_rank2(a, "gather_rows");
  long long R = a.shape()[0], C = a.shape()[1];
  for (long long i : idx) {
    if (i < 0 || i >= R) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of " +
                       shape_str(a.shape()));
    }
  }
  long long M = static_cast<long long>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(M * C));
  for (long long i = 0; i < M; ++i)
    for (long long j = 0; j < C; ++j) out[i * C + j] = a.data()[idx[i] * C + j];
  auto an = a.n;
  return make_op("gather_rows", {M, C}, std::move(out), {an},
                 [an, idx, C](Node& self) {
                   if (!an->requires_grad) return;
                   double* ga = an->grad_buf().data();
                   const double* g = self.g.data();
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     for (long long j = 0; j < C; ++j)
                       ga[idx[i] * C + j] += g[i * C + j];
                 });
}

Tensor l1_norm(const Tensor& a) { return sum(abs(a)); }

Tensor l2_norm(const Tensor& a) { return sqrt(sum(mul(a, a))); }

// ---------------------------------------------------------------------------
// Bilinear image lookup

Tensor bilinear_sample(std::shared_ptr<const std::vector<double>> image,
                       long long height, long long width, long long channels,
                       const Tensor& uv) {
  require_defined(uv, "bilinear_sample");
  require_rank2(uv, "bilinear_sample");
  if (uv.shape()[1] != 2) {
    throw ShapeError("bilinear_sample: uv must be (P,2), got " + shape_str(uv.shape()));
  }
  if (!image || static_cast<long long>(image->size()) != height * width * channels) {
    throw ShapeError("bilinear_sample: image buffer does not match dimensions");
  }
  long long P = uv.shape()[0];
  const double* img = image->data();

  struct Corner {
    long long i00, i10, i01, i11;
    double fx, fy;
  };
  auto locate = [width, height, channels](double u, double v) {
    double x = std::min(std::max(u, 0.0), static_cast<double>(width - 1));
    double y = std::min(std::max(v, 0.0), static_cast<double>(height - 1));
    long long ix = std::min(static_cast<long long>(x), width - 2 >= 0 ? width - 2 : 0);
    long long iy = std::min(static_cast<long long>(y), height - 2 >= 0 ? height - 2 : 0);
    Corner c;
    c.fx = x - static_cast<double>(ix);
    c.fy = y - static_cast<double>(iy);
    long long ix1 = std::min(ix + 1, width - 1);
    long long iy1 = std::min(iy + 1, height - 1);
    c.i00 = (iy * width + ix) * channels;
    c.i10 = (iy * width + ix1) * channels;
    c.i01 = (iy1 * width + ix) * channels;
    c.i11 = (iy1 * width + ix1) * channels;
    return c;
  };

  std::vector<double> out(static_cast<std::size_t>(P * channels));
  for (long long p = 0; p < P; ++p) {
    Corner c = locate(uv.data()[2 * p], uv.data()[2 * p + 1]);
    for (long long k = 0; k < channels; ++k) {
      out[p * channels + k] = (1 - c.fx) * (1 - c.fy) * img[c.i00 + k] +
                              c.fx * (1 - c.fy) * img[c.i10 + k] +
                              (1 - c.fx) * c.fy * img[c.i01 + k] +
                              c.fx * c.fy * img[c.i11 + k];
    }
  }
  auto uvn = uv.n;
  return make_op(
      "bilinear_sample", {P, channels}, std::move(out), {uvn},
      [uvn, image, locate, P, channels, width, height](Node& self) {
        if (!uvn->requires_grad) return;
        const double* img = image->data();
        double* guv = uvn->grad_buf().data();
        const double* g = self.g.data();
        for (long long p = 0; p < P; ++p) {
          double u = uvn->v[2 * p], v = uvn->v[2 * p + 1];
          Corner c = locate(u, v);
          // Zero slope where the clamp is active.
          bool in_u = u > 0.0 && u < static_cast<double>(width - 1);
          bool in_v = v > 0.0 && v < static_cast<double>(height - 1);
          for (long long k = 0; k < channels; ++k) {
            double du = (1 - c.fy) * (img[c.i10 + k] - img[c.i00 + k]) +
                        c.fy * (img[c.i11 + k] - img[c.i01 + k]);
            double dv = (1 - c.fx) * (img[c.i01 + k] - img[c.i00 + k]) +
                        c.fx * (img[c.i11 + k] - img[c.i10 + k]);
            if (in_u) guv[2 * p] += g[p * channels + k] * du;
            if (in_v) guv[2 * p + 1] += g[p * channels + k] * dv;
          }
        }
      });
}

}  // namespace flownerf
