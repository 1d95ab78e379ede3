#pragma once

// Dense f64 tensors with a recorded reverse-mode gradient tape.
//
// Tensors are plain values (shape + row-major data). Ops on detached
// tensors run eagerly and produce detached results; ops that touch a
// tape-attached tensor are recorded so backward() can apply the chain
// rule in reverse tape order. One tape per training step; a tape is
// never shared across threads. Detached tensors are immutable values
// and safe to share.
//
// Numeric policy: f64 everywhere, every op checks its output for
// NaN/Inf and throws NumericError. Broadcasting is restricted to
// scalar-vs-tensor and vector-vs-matching-trailing-axis of a matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace remax {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public TensorError {
 public:
  using TensorError::TensorError;
};

class NumericError : public TensorError {
 public:
  using TensorError::TensorError;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Numerically stable scalar sigmoid, clamped into the open interval (0,1)
// so downstream products and logs stay well defined for any finite input.
inline double sigmoid_scalar(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  const double lo = std::numeric_limits<double>::denorm_min();
  const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  return std::min(hi, std::max(lo, s));
}

// log(sigmoid(x)) without forming sigmoid(x); exact for large |x| where
// the naive route saturates.
inline double log_sigmoid_scalar(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

class Tape;

struct Tensor {
  Shape shape;
  std::vector<double> data;
  Tape* tape = nullptr;  // nullptr: detached value
  int node = -1;         // node id on the tape, -1 when detached

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape s, double v) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool attached() const { return tape != nullptr; }
  bool is_scalar() const { return numel() == 1; }

  double value() const {
    if (!is_scalar()) throw ShapeError("value() requires a scalar tensor");
    return data[0];
  }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("rows() requires rank 2");
    return shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols() requires rank 2");
    return shape[1];
  }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  // Value copy with no tape linkage.
  Tensor detached() const { return Tensor(shape, data); }
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kSigmoid,
  kTanh,
  kRelu,
  kLog,
  kExp,
  kLogSigmoid,
  kMatmul,
  kTranspose,
  kSliceCols,
  kReshape,
  kReduceSum,
  kReduceMean,
  kReduceMax,
  kSoftmax,
  kLogSoftmax,
  kStopGrad,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScale: return "scale";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kLogSigmoid: return "log_sigmoid";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kSliceCols: return "slice_cols";
    case Op::kReshape: return "reshape";
    case Op::kReduceSum: return "sum";
    case Op::kReduceMean: return "mean";
    case Op::kReduceMax: return "max";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kStopGrad: return "stop_gradient";
  }
  return "?";
}

inline void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(what) + " produced a non-finite value");
    }
  }
}

class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    int a = -1;  // input node ids; -1 means constant input (values in aval/bval)
    int b = -1;
    Shape shape;   // output shape
    Shape ashape;  // operand shapes (needed for broadcast backward)
    Shape bshape;
    std::vector<double> aval;  // saved operand / output values as each op needs
    std::vector<double> bval;
    std::vector<double> out;
    std::vector<std::size_t> arg;  // argmax positions for max-reduce
    int axis = -1;                 // reduce/softmax axis; -1 = all (reduce only)
    double c = 0.0;                // scale constant
    std::size_t c0 = 0, c1 = 0;    // slice_cols column range
  };

  Tensor leaf(const Tensor& value) { return leaf(value.shape, value.data); }

  Tensor leaf(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("leaf data length does not match shape");
    }
    check_finite(data, "leaf");
    Node n;
    n.op = Op::kLeaf;
    n.shape = shape;
    Tensor t(std::move(shape), std::move(data));
    t.tape = this;
    t.node = record(std::move(n));
    return t;
  }

  int record(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape* merged_tape(const Tensor& a, const Tensor& b) {
  if (a.attached() && b.attached() && a.tape != b.tape) {
    throw TensorError("operands live on different tapes");
  }
  return a.attached() ? a.tape : b.tape;
}

enum class Bcast { kSame, kScalarA, kScalarB, kVecA, kVecB };

// Legal pairings: identical shapes, scalar against anything, or a vector
// against the matching trailing axis of a matrix. Everything else is
// rejected so each gradient rule stays auditable.
inline Bcast classify(const Shape& a, const Shape& b) {
  if (a == b) return Bcast::kSame;
  if (shape_numel(a) == 1) return Bcast::kScalarA;
  if (shape_numel(b) == 1) return Bcast::kScalarB;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Bcast::kVecB;
  if (b.size() == 2 && a.size() == 1 && a[0] == b[1]) return Bcast::kVecA;
  throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

inline const Shape& out_shape(Bcast k, const Shape& a, const Shape& b) {
  switch (k) {
    case Bcast::kSame: return a;
    case Bcast::kScalarA: return b;
    case Bcast::kScalarB: return a;
    case Bcast::kVecA: return b;
    case Bcast::kVecB: return a;
  }
  return a;
}

inline std::size_t operand_index(Bcast k, bool is_a, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::kSame: return i;
    case Bcast::kScalarA: return is_a ? 0 : i;
    case Bcast::kScalarB: return is_a ? i : 0;
    case Bcast::kVecA: return is_a ? i % cols : i;
    case Bcast::kVecB: return is_a ? i : i % cols;
  }
  return i;
}

template <typename F>
Tensor binary_op(Op op, const Tensor& a, const Tensor& b, F&& f) {
  const Bcast k = classify(a.shape, b.shape);
  const Shape& os = out_shape(k, a.shape, b.shape);
  const std::size_t n = shape_numel(os);
  const std::size_t cols = os.size() == 2 ? os[1] : (os.empty() ? 1 : os[0]);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(a.data[operand_index(k, true, i, cols)],
               b.data[operand_index(k, false, i, cols)]);
  }
  check_finite(out, op_name(op));

  Tensor r(os, std::move(out));
  Tape* tape = merged_tape(a, b);
  if (tape != nullptr) {
    Tape::Node node;
    node.op = op;
    node.a = a.attached() ? a.node : -1;
    node.b = b.attached() ? b.node : -1;
    node.shape = r.shape;
    node.ashape = a.shape;
    node.bshape = b.shape;
    if (op == Op::kMul || op == Op::kDiv) {
      node.aval = a.data;
      node.bval = b.data;
    }
    if (op == Op::kDiv) node.out = r.data;
    r.tape = tape;
    r.node = tape->record(std::move(node));
  }
  return r;
}

struct UnarySpec {
  bool save_input = false;
  bool save_output = false;
};

template <typename F>
Tensor unary_op(Op op, const Tensor& a, F&& f, UnarySpec spec, double c = 0.0) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a.data[i]);
  check_finite(out, op_name(op));

  Tensor r(a.shape, std::move(out));
  if (a.attached()) {
    Tape::Node node;
    node.op = op;
    node.a = a.node;
    node.shape = r.shape;
    node.ashape = a.shape;
    node.c = c;
    if (spec.save_input) node.aval = a.data;
    if (spec.save_output) node.out = r.data;
    r.tape = a.tape;
    r.node = a.tape->record(std::move(node));
  }
  return r;
}

// Iterate rank-1/rank-2 "lines" along `axis` (softmax and axis reductions).
struct LineIter {
  std::size_t n_lines;   // number of independent lines
  std::size_t line_len;  // elements per line
  std::size_t stride;    // element stride within a line
  std::size_t base_step; // offset step between consecutive lines

  static LineIter make(const Shape& s, int axis) {
    if (s.size() == 1) {
      if (axis != 0) throw ShapeError("axis out of range for rank-1 tensor");
      return {1, s[0], 1, 0};
    }
    if (s.size() == 2) {
      if (axis == 0) return {s[1], s[0], s[1], 1};
      if (axis == 1) return {s[0], s[1], 1, s[1]};
      throw ShapeError("axis out of range for rank-2 tensor");
    }
    throw ShapeError("line ops support rank 1 and 2 only");
  }
  std::size_t index(std::size_t line, std::size_t k) const {
    return line * base_step + k * stride;
  }
};

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(Op::kAdd, a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(Op::kSub, a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(Op::kMul, a, b, [](double x, double y) { return x * y; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(Op::kDiv, a, b, [](double x, double y) { return x / y; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(Op::kScale, a, [c](double x) { return c * x; }, {}, c);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(Op::kSigmoid, a, sigmoid_scalar, {.save_output = true});
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(Op::kTanh, a, [](double x) { return std::tanh(x); },
                          {.save_output = true});
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; },
                          {.save_input = true});
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(Op::kLog, a, [](double x) { return std::log(x); },
                          {.save_input = true});
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(Op::kExp, a, [](double x) { return std::exp(x); },
                          {.save_output = true});
}

inline Tensor log_sigmoid(const Tensor& a) {
  return detail::unary_op(Op::kLogSigmoid, a, log_sigmoid_scalar, {.save_input = true});
}

// ---- linear algebra --------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul requires rank-2 operands");
  if (a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape) + " * " +
                     shape_str(b.shape));
  }
  const std::size_t m = a.shape[0], kk = a.shape[1], n = b.shape[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < kk; ++k) {
      const double av = a.data[i * kk + k];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.data[k * n + j];
    }
  }
  check_finite(out, "matmul");

  Tensor r(Shape{m, n}, std::move(out));
  Tape* tape = detail::merged_tape(a, b);
  if (tape != nullptr) {
    Tape::Node node;
    node.op = Op::kMatmul;
    node.a = a.attached() ? a.node : -1;
    node.b = b.attached() ? b.node : -1;
    node.shape = r.shape;
    node.ashape = a.shape;
    node.bshape = b.shape;
    node.aval = a.data;
    node.bval = b.data;
    r.tape = tape;
    r.node = tape->record(std::move(node));
  }
  return r;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose requires rank 2");
  const std::size_t r = a.shape[0], c = a.shape[1];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data[i * c + j];

  Tensor t(Shape{c, r}, std::move(out));
  if (a.attached()) {
    Tape::Node node;
    node.op = Op::kTranspose;
    node.a = a.node;
    node.shape = t.shape;
    node.ashape = a.shape;
    t.tape = a.tape;
    t.node = a.tape->record(std::move(node));
  }
  return t;
}

// Contiguous column slice [c0, c1) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2) throw ShapeError("slice_cols requires rank 2");
  if (c0 >= c1 || c1 > a.shape[1]) throw ShapeError("slice_cols range out of bounds");
  const std::size_t r = a.shape[0], c = a.shape[1], w = c1 - c0;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data[i * c + c0 + j];

  Tensor t(Shape{r, w}, std::move(out));
  if (a.attached()) {
    Tape::Node node;
    node.op = Op::kSliceCols;
    node.a = a.node;
    node.shape = t.shape;
    node.ashape = a.shape;
    node.c0 = c0;
    node.c1 = c1;
    t.tape = a.tape;
    t.node = a.tape->record(std::move(node));
  }
  return t;
}

// Same data, new shape (row-major order preserved).
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape cannot change element count");
  }
  Tensor t(std::move(shape), a.data);
  if (a.attached()) {
    Tape::Node node;
    node.op = Op::kReshape;
    node.a = a.node;
    node.shape = t.shape;
    node.ashape = a.shape;
    t.tape = a.tape;
    t.node = a.tape->record(std::move(node));
  }
  return t;
}

// ---- reductions ------------------------------------------------------------

namespace detail {

inline Tensor reduce_op(Op op, const Tensor& a, int axis) {
  if (a.numel() == 0) throw ShapeError("reduce of empty tensor");
  Shape os;
  std::vector<double> out;
  std::vector<std::size_t> arg;

  if (axis < 0) {
    os = Shape{1};
    if (op == Op::kReduceMax) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < a.numel(); ++i)
        if (a.data[i] > a.data[best]) best = i;
      out = {a.data[best]};
      arg = {best};
    } else {
      double s = 0.0;
      for (double x : a.data) s += x;
      if (op == Op::kReduceMean) s /= static_cast<double>(a.numel());
      out = {s};
    }
  } else {
    const auto it = LineIter::make(a.shape, axis);
    if (a.rank() == 1) {
      os = Shape{1};
    } else {
      os = Shape{axis == 0 ? a.shape[1] : a.shape[0]};
    }
    out.resize(it.n_lines);
    if (op == Op::kReduceMax) arg.resize(it.n_lines);
    for (std::size_t l = 0; l < it.n_lines; ++l) {
      if (op == Op::kReduceMax) {
        std::size_t best = it.index(l, 0);
        for (std::size_t k = 1; k < it.line_len; ++k) {
          const std::size_t idx = it.index(l, k);
          if (a.data[idx] > a.data[best]) best = idx;
        }
        out[l] = a.data[best];
        arg[l] = best;
      } else {
        double s = 0.0;
        for (std::size_t k = 0; k < it.line_len; ++k) s += a.data[it.index(l, k)];
        if (op == Op::kReduceMean) s /= static_cast<double>(it.line_len);
        out[l] = s;
      }
    }
  }
  check_finite(out, op_name(op));

  Tensor r(std::move(os), std::move(out));
  if (a.attached()) {
    Tape::Node node;
    node.op = op;
    node.a = a.node;
    node.shape = r.shape;
    node.ashape = a.shape;
    node.axis = axis;
    node.arg = std::move(arg);
    r.tape = a.tape;
    r.node = a.tape->record(std::move(node));
  }
  return r;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, int axis = -1) { return detail::reduce_op(Op::kReduceSum, a, axis); }
inline Tensor mean(const Tensor& a, int axis = -1) { return detail::reduce_op(Op::kReduceMean, a, axis); }
inline Tensor max(const Tensor& a, int axis = -1) { return detail::reduce_op(Op::kReduceMax, a, axis); }

// ---- softmax family --------------------------------------------------------

namespace detail {

inline Tensor softmax_like(Op op, const Tensor& a, int axis) {
  const auto it = LineIter::make(a.shape, axis);
  std::vector<double> out(a.numel());
  for (std::size_t l = 0; l < it.n_lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < it.line_len; ++k) mx = std::max(mx, a.data[it.index(l, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < it.line_len; ++k) z += std::exp(a.data[it.index(l, k)] - mx);
    if (op == Op::kSoftmax) {
      for (std::size_t k = 0; k < it.line_len; ++k) {
        const std::size_t idx = it.index(l, k);
        out[idx] = std::exp(a.data[idx] - mx) / z;
      }
    } else {
      const double lz = std::log(z);
      for (std::size_t k = 0; k < it.line_len; ++k) {
        const std::size_t idx = it.index(l, k);
        out[idx] = a.data[idx] - mx - lz;
      }
    }
  }
  check_finite(out, op_name(op));

  Tensor r(a.shape, std::move(out));
  if (a.attached()) {
    Tape::Node node;
    node.op = op;
    node.a = a.node;
    node.shape = r.shape;
    node.ashape = a.shape;
    node.axis = axis;
    node.out = r.data;
    r.tape = a.tape;
    r.node = a.tape->record(std::move(node));
  }
  return r;
}

}  // namespace detail

inline Tensor softmax(const Tensor& a, int axis) { return detail::softmax_like(Op::kSoftmax, a, axis); }
inline Tensor log_softmax(const Tensor& a, int axis) { return detail::softmax_like(Op::kLogSoftmax, a, axis); }

// ---- stop gradient ---------------------------------------------------------

// Identity in the forward pass (bit-identical values); the backward pass
// deposits exactly zero into the input and everything behind it.
inline Tensor stop_gradient(const Tensor& a) {
  Tensor r(a.shape, a.data);
  if (a.attached()) {
    Tape::Node node;
    node.op = Op::kStopGrad;
    node.a = a.node;
    node.shape = r.shape;
    node.ashape = a.shape;
    r.tape = a.tape;
    r.node = a.tape->record(std::move(node));
  }
  return r;
}

// ---- backward --------------------------------------------------------------

class Gradients {
 public:
  Gradients(const Tape* tape, std::vector<std::vector<double>> g)
      : tape_(tape), grads_(std::move(g)) {}

  // Gradient of the loss w.r.t. a tensor on this tape; zeros if no path.
  Tensor at(const Tensor& t) const {
    if (t.tape != tape_ || t.node < 0) {
      throw TensorError("gradient requested for a tensor not on this tape");
    }
    const auto id = static_cast<std::size_t>(t.node);
    if (id >= grads_.size() || grads_[id].empty()) return Tensor::zeros(t.shape);
    return Tensor(t.shape, grads_[id]);
  }

  bool reached(const Tensor& t) const {
    const auto id = static_cast<std::size_t>(t.node);
    return t.node >= 0 && id < grads_.size() && !grads_[id].empty();
  }

  double max_abs(const Tensor& t) const {
    Tensor g = at(t);
    double m = 0.0;
    for (double x : g.data) m = std::max(m, std::abs(x));
    return m;
  }

 private:
  const void* tape_;
  std::vector<std::vector<double>> grads_;
};

namespace detail {

inline void accumulate(std::vector<std::vector<double>>& grads, int node,
                       const Shape& shape, std::size_t idx, double v) {
  if (node < 0) return;  // constant operand
  auto& g = grads[static_cast<std::size_t>(node)];
  if (g.empty()) g.assign(shape_numel(shape), 0.0);
  g[idx] += v;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Accumulation order is fixed by
// tape order, so replaying an identical tape gives bit-identical results.
inline Gradients backward(const Tape& tape, const Tensor& loss) {
  if (!loss.attached() || loss.tape != &tape) {
    throw TensorError("loss is not attached to this tape");
  }
  if (!loss.is_scalar()) throw ShapeError("backward requires a scalar loss");

  std::vector<std::vector<double>> grads(tape.size());
  grads[static_cast<std::size_t>(loss.node)] = {1.0};

  for (int id = loss.node; id >= 0; --id) {
    const auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Tape::Node& n = tape.node(id);

    using detail::Bcast;
    using detail::accumulate;

    switch (n.op) {
      case Op::kLeaf:
      case Op::kStopGrad:
        break;

      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv: {
        const Bcast k = detail::classify(n.ashape, n.bshape);
        const std::size_t cols = n.shape.size() == 2 ? n.shape[1]
                                 : (n.shape.empty() ? 1 : n.shape[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ai = detail::operand_index(k, true, i, cols);
          const std::size_t bi = detail::operand_index(k, false, i, cols);
          double da = 0.0, db = 0.0;
          switch (n.op) {
            case Op::kAdd: da = g[i]; db = g[i]; break;
            case Op::kSub: da = g[i]; db = -g[i]; break;
            case Op::kMul: da = g[i] * n.bval[bi]; db = g[i] * n.aval[ai]; break;
            case Op::kDiv:
              da = g[i] / n.bval[bi];
              db = -g[i] * n.out[i] / n.bval[bi];
              break;
            default: break;
          }
          accumulate(grads, n.a, n.ashape, ai, da);
          accumulate(grads, n.b, n.bshape, bi, db);
        }
        break;
      }

      case Op::kScale:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i] * n.c);
        break;

      case Op::kSigmoid:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i] * n.out[i] * (1.0 - n.out[i]));
        break;

      case Op::kTanh:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i] * (1.0 - n.out[i] * n.out[i]));
        break;

      case Op::kRelu:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, n.aval[i] > 0.0 ? g[i] : 0.0);
        break;

      case Op::kLog:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i] / n.aval[i]);
        break;

      case Op::kExp:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i] * n.out[i]);
        break;

      case Op::kLogSigmoid:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i] * (1.0 - sigmoid_scalar(n.aval[i])));
        break;

      case Op::kMatmul: {
        const std::size_t m = n.ashape[0], kk = n.ashape[1], nn = n.bshape[1];
        // dA = g * B^T
        if (n.a >= 0) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < kk; ++k) {
              double s = 0.0;
              for (std::size_t j = 0; j < nn; ++j)
                s += g[i * nn + j] * n.bval[k * nn + j];
              accumulate(grads, n.a, n.ashape, i * kk + k, s);
            }
        }
        // dB = A^T * g
        if (n.b >= 0) {
          for (std::size_t k = 0; k < kk; ++k)
            for (std::size_t j = 0; j < nn; ++j) {
              double s = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                s += n.aval[i * kk + k] * g[i * nn + j];
              accumulate(grads, n.b, n.bshape, k * nn + j, s);
            }
        }
        break;
      }

      case Op::kTranspose: {
        const std::size_t r = n.ashape[0], c = n.ashape[1];
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            accumulate(grads, n.a, n.ashape, i * c + j, g[j * r + i]);
        break;
      }

      case Op::kSliceCols: {
        const std::size_t r = n.ashape[0], c = n.ashape[1], w = n.c1 - n.c0;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            accumulate(grads, n.a, n.ashape, i * c + n.c0 + j, g[i * w + j]);
        break;
      }

      case Op::kReshape:
        for (std::size_t i = 0; i < g.size(); ++i)
          accumulate(grads, n.a, n.ashape, i, g[i]);
        break;

      case Op::kReduceSum:
      case Op::kReduceMean: {
        if (n.axis < 0) {
          const double d = n.op == Op::kReduceMean
                               ? g[0] / static_cast<double>(shape_numel(n.ashape))
                               : g[0];
          for (std::size_t i = 0; i < shape_numel(n.ashape); ++i)
            accumulate(grads, n.a, n.ashape, i, d);
        } else {
          const auto it = detail::LineIter::make(n.ashape, n.axis);
          for (std::size_t l = 0; l < it.n_lines; ++l) {
            const double d = n.op == Op::kReduceMean
                                 ? g[l] / static_cast<double>(it.line_len)
                                 : g[l];
            for (std::size_t k = 0; k < it.line_len; ++k)
              accumulate(grads, n.a, n.ashape, it.index(l, k), d);
          }
        }
        break;
      }

      case Op::kReduceMax:
        for (std::size_t l = 0; l < g.size(); ++l)
          accumulate(grads, n.a, n.ashape, n.arg[l], g[l]);
        break;

      case Op::kSoftmax: {
        const auto it = detail::LineIter::make(n.ashape, n.axis);
        for (std::size_t l = 0; l < it.n_lines; ++l) {
          double dot = 0.0;
          for (std::size_t k = 0; k < it.line_len; ++k) {
            const std::size_t idx = it.index(l, k);
            dot += g[idx] * n.out[idx];
          }
          for (std::size_t k = 0; k < it.line_len; ++k) {
            const std::size_t idx = it.index(l, k);
            accumulate(grads, n.a, n.ashape, idx, n.out[idx] * (g[idx] - dot));
          }
        }
        break;
      }

      case Op::kLogSoftmax: {
        const auto it = detail::LineIter::make(n.ashape, n.axis);
        for (std::size_t l = 0; l < it.n_lines; ++l) {
          double gsum = 0.0;
          for (std::size_t k = 0; k < it.line_len; ++k) gsum += g[it.index(l, k)];
          for (std::size_t k = 0; k < it.line_len; ++k) {
            const std::size_t idx = it.index(l, k);
            accumulate(grads, n.a, n.ashape, idx, g[idx] - std::exp(n.out[idx]) * gsum);
          }
        }
        break;
      }
    }
  }
  return Gradients(&tape, std::move(grads));
}

}  // namespace remax
