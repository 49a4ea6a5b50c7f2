#include "pevfa/autodiff.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstring>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pevfa::ad {

namespace {

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch (" + a.shape_string() + " vs " +
                   b.shape_string() + ")");
}

enum class Broadcast { Same, Row, Col, Scalar };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return Broadcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::Col;
  shape_fail(op, a, b);
}

double broadcast_at(const Tensor& b, Broadcast kind, std::size_t r, std::size_t c) {
  switch (kind) {
    case Broadcast::Same:
      return b(r, c);
    case Broadcast::Row:
      return b(0, c);
    case Broadcast::Col:
      return b(r, 0);
    case Broadcast::Scalar:
      return b[0];
  }
  return 0.0;
}

// Reduce a full-shape gradient back onto a broadcast operand.
Tensor reduce_to(const Tensor& g, const Tensor& target, Broadcast kind) {
  if (kind == Broadcast::Same) return g;
  Tensor out(target.rows(), target.cols());
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t c = 0; c < g.cols(); ++c) {
      if (kind == Broadcast::Row) {
        out(0, c) += g(r, c);
      } else if (kind == Broadcast::Col) {
        out(r, 0) += g(r, c);
      } else {
        out[0] += g(r, c);
      }
    }
  }
  return out;
}

}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor: data length does not match shape");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::row_vector(std::span<const double> values) {
  return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item: tensor is " + shape_string() + ", not 1x1");
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << rows_ << 'x' << cols_;
  return os.str();
}

namespace {

using Lane8 = double __attribute__((vector_size(64)));

inline Lane8 load8(const double* p) {
  Lane8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, Lane8 v) { std::memcpy(p, &v, sizeof v); }

}  // namespace

// Register-tiled 4x8 blocks. Every output entry is still accumulated as
// ((0 + a0*b0) + a1*b1) + ... in index order, whatever the tiling.
void matmul_into(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  out = Tensor(n, m);
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  std::size_t j0 = 0;
  for (; j0 + 8 <= m; j0 += 8) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      const double* a0 = A + i * k;
      const double* a1 = a0 + k;
      const double* a2 = a1 + k;
      const double* a3 = a2 + k;
      Lane8 c0 = {}, c1 = {}, c2 = {}, c3 = {};
      for (std::size_t p = 0; p < k; ++p) {
        const Lane8 bv = load8(B + p * m + j0);
        c0 += a0[p] * bv;
        c1 += a1[p] * bv;
        c2 += a2[p] * bv;
        c3 += a3[p] * bv;
      }
      store8(O + i * m + j0, c0);
      store8(O + (i + 1) * m + j0, c1);
      store8(O + (i + 2) * m + j0, c2);
      store8(O + (i + 3) * m + j0, c3);
    }
    for (; i < n; ++i) {
      const double* ai = A + i * k;
      Lane8 c = {};
      for (std::size_t p = 0; p < k; ++p) c += ai[p] * load8(B + p * m + j0);
      store8(O + i * m + j0, c);
    }
  }
  if (j0 < m) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* ai = A + i * k;
      for (std::size_t j = j0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * B[p * m + j];
        O[i * m + j] = acc;
      }
    }
  }
}

namespace {

Tensor transposed(const Tensor& t) {
  Tensor out(t.cols(), t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out(c, r) = t(r, c);
  return out;
}

}  // namespace

void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& out) {
  matmul_into(a, transposed(b), out);
}

void matmul_tn_into(const Tensor& a, const Tensor& b, Tensor& out) {
  matmul_into(transposed(a), b, out);
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SumRows: return "sum_rows";
    case Op::MeanRows: return "mean_rows";
    case Op::SumCols: return "sum_cols";
    case Op::Concat: return "concat";
    case Op::SliceCols: return "slice";
    case Op::GatherRows: return "gather_rows";
    case Op::Transpose: return "transpose";
    case Op::Clamp: return "clamp";
    case Op::Minimum: return "minimum";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape construction

Var Tape::push(Node node) {
  if (node.op != Op::Leaf) {
    bool rg = false;
    if (node.op == Op::Concat) {
      for (auto id : node.inputs) rg = rg || nodes_[id].requires_grad;
    } else {
      rg = nodes_[node.a].requires_grad;
      if (node.op == Op::MatMul || node.op == Op::MatMulNT || node.op == Op::Add ||
          node.op == Op::Sub || node.op == Op::Mul || node.op == Op::Minimum) {
        rg = rg || nodes_[node.b].requires_grad;
      }
    }
    node.requires_grad = rg;
    compute(node);
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(const Tensor& source) {
  if (auto it = params_.find(&source); it != params_.end()) return Var{it->second};
  Node n;
  n.op = Op::Leaf;
  n.value = source;
  n.requires_grad = record_grad_;
  n.is_param = true;
  Var v = push(std::move(n));
  params_.emplace(&source, v.id);
  return v;
}

bool Tape::has_param(const Tensor& source) const { return params_.contains(&source); }

Var Tape::param_var(const Tensor& source) const {
  auto it = params_.find(&source);
  if (it == params_.end()) throw std::out_of_range("tape: tensor was not registered as a parameter");
  return Var{it->second};
}

#define PEVFA_BINARY(name, opcode)        \
  Var Tape::name(Var a, Var b) {          \
    Node n;                               \
    n.op = Op::opcode;                    \
    n.a = a.id;                           \
    n.b = b.id;                           \
    return push(std::move(n));            \
  }

PEVFA_BINARY(matmul, MatMul)
PEVFA_BINARY(matmul_nt, MatMulNT)
PEVFA_BINARY(add, Add)
PEVFA_BINARY(sub, Sub)
PEVFA_BINARY(mul, Mul)
PEVFA_BINARY(minimum, Minimum)
#undef PEVFA_BINARY

#define PEVFA_UNARY(name, opcode)  \
  Var Tape::name(Var a) {          \
    Node n;                        \
    n.op = Op::opcode;             \
    n.a = a.id;                    \
    return push(std::move(n));     \
  }

PEVFA_UNARY(tanh, Tanh)
PEVFA_UNARY(relu, Relu)
PEVFA_UNARY(exp, Exp)
PEVFA_UNARY(log, Log)
PEVFA_UNARY(square, Square)
PEVFA_UNARY(sum, Sum)
PEVFA_UNARY(mean, Mean)
PEVFA_UNARY(sum_rows, SumRows)
PEVFA_UNARY(mean_rows, MeanRows)
PEVFA_UNARY(sum_cols, SumCols)
PEVFA_UNARY(transpose, Transpose)
#undef PEVFA_UNARY

Var Tape::scale(Var a, double c) {
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.c0 = c;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double c) {
  Node n;
  n.op = Op::AddScalar;
  n.a = a.id;
  n.c0 = c;
  return push(std::move(n));
}

Var Tape::clamp(Var a, double lo, double hi) {
  Node n;
  n.op = Op::Clamp;
  n.a = a.id;
  n.c0 = lo;
  n.c1 = hi;
  return push(std::move(n));
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Node n;
  n.op = Op::Concat;
  for (auto p : parts) n.inputs.push_back(p.id);
  n.a = parts.front().id;
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Node n;
  n.op = Op::SliceCols;
  n.a = a.id;
  n.index = {begin, end};
  return push(std::move(n));
}

Var Tape::gather_rows(Var a, std::vector<std::size_t> index) {
  Node n;
  n.op = Op::GatherRows;
  n.a = a.id;
  n.index = std::move(index);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward

void Tape::compute(Node& n) {
  if (n.op == Op::Leaf) return;
  const Tensor& a = nodes_[n.a].value;
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::MatMul: {
      const Tensor& b = nodes_[n.b].value;
      if (a.cols() != b.rows()) shape_fail("matmul", a, b);
      matmul_into(a, b, n.value);
      return;
    }
    case Op::MatMulNT: {
      const Tensor& b = nodes_[n.b].value;
      if (a.cols() != b.cols()) shape_fail("matmul_nt", a, b);
      matmul_nt_into(a, b, n.value);
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& b = nodes_[n.b].value;
      const char* name = op_name(n.op);
      const Broadcast kind = broadcast_kind(name, a, b);
      n.value = Tensor(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
          const double y = broadcast_at(b, kind, r, c);
          const double x = a(r, c);
          n.value(r, c) = n.op == Op::Add ? x + y : (n.op == Op::Sub ? x - y : x * y);
        }
      }
      return;
    }
    case Op::Minimum: {
      const Tensor& b = nodes_[n.b].value;
      if (!a.same_shape(b)) shape_fail("minimum", a, b);
      n.value = Tensor(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::min(a[i], b[i]);
      return;
    }
    case Op::Scale:
    case Op::AddScalar:
    case Op::Tanh:
    case Op::Relu:
    case Op::Exp:
    case Op::Log:
    case Op::Square:
    case Op::Clamp: {
      n.value = Tensor(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        double y = 0.0;
        switch (n.op) {
          case Op::Scale: y = x * n.c0; break;
          case Op::AddScalar: y = x + n.c0; break;
          case Op::Tanh: y = std::tanh(x); break;
          case Op::Relu: y = x > 0.0 ? x : 0.0; break;
          case Op::Exp: y = std::exp(x); break;
          case Op::Log: y = std::log(x); break;
          case Op::Square: y = x * x; break;
          case Op::Clamp: y = std::clamp(x, n.c0, n.c1); break;
          default: break;
        }
        n.value[i] = y;
      }
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      double acc = 0.0;
      for (double x : a.values()) acc += x;
      if (n.op == Op::Mean) {
        if (a.empty()) throw ShapeError("mean: empty tensor");
        acc /= static_cast<double>(a.size());
      }
      n.value = Tensor::scalar(acc);
      return;
    }
    case Op::SumRows: {
      n.value = Tensor(1, a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) n.value(0, c) += a(r, c);
      return;
    }
    case Op::MeanRows: {
      if (a.rows() == 0) throw ShapeError("mean_rows: no rows");
      n.value = Tensor(1, a.cols());
      std::vector<double> column(a.rows());
      for (std::size_t c = 0; c < a.cols(); ++c) {
        for (std::size_t r = 0; r < a.rows(); ++r) column[r] = a(r, c);
        std::sort(column.begin(), column.end());
        double acc = 0.0;
        for (double x : column) acc += x;
        n.value(0, c) = acc / static_cast<double>(a.rows());
      }
      return;
    }
    case Op::SumCols: {
      n.value = Tensor(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) acc += a(r, c);
        n.value(r, 0) = acc;
      }
      return;
    }
    case Op::Concat: {
      const std::size_t rows = a.rows();
      std::size_t cols = 0;
      for (auto id : n.inputs) {
        const Tensor& part = nodes_[id].value;
        if (part.rows() != rows) shape_fail("concat", a, part);
        cols += part.cols();
      }
      n.value = Tensor(rows, cols);
      std::size_t offset = 0;
      for (auto id : n.inputs) {
        const Tensor& part = nodes_[id].value;
        for (std::size_t r = 0; r < rows; ++r)
          std::copy(part.row(r).begin(), part.row(r).end(), n.value.row(r).begin() + offset);
        offset += part.cols();
      }
      return;
    }
    case Op::SliceCols: {
      const std::size_t begin = n.index[0], end = n.index[1];
      if (begin >= end || end > a.cols()) {
        throw ShapeError("slice: columns [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + a.shape_string());
      }
      n.value = Tensor(a.rows(), end - begin);
      for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy(a.row(r).begin() + begin, a.row(r).begin() + end, n.value.row(r).begin());
      return;
    }
    case Op::GatherRows: {
      n.value = Tensor(n.index.size(), a.cols());
      for (std::size_t i = 0; i < n.index.size(); ++i) {
        if (n.index[i] >= a.rows()) {
          throw ShapeError("gather_rows: index " + std::to_string(n.index[i]) +
                           " out of range for " + a.shape_string());
        }
        std::copy(a.row(n.index[i]).begin(), a.row(n.index[i]).end(), n.value.row(i).begin());
      }
      return;
    }
    case Op::Transpose: {
      n.value = Tensor(a.cols(), a.rows());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) n.value(c, r) = a(r, c);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Backward

const Tensor& Tape::grad(Var v) const {
  const Node& n = at(v);
  return n.grad.empty() ? empty_grad_ : n.grad;
}

void Tape::accumulate(std::uint32_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor();
}

void Tape::backward(Var loss) {
  const Node& root = at(loss);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + root.value.shape_string());
  }
  zero_grad();
  if (!root.requires_grad) return;
  nodes_[loss.id].grad = Tensor::scalar(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.op == Op::Leaf || !n.requires_grad || n.grad.empty()) continue;
    propagate(n);
  }
}

void Tape::propagate(const Node& n) {
  const Tensor& g = n.grad;
  const Tensor& a = nodes_[n.a].value;
  const bool need_a = nodes_[n.a].requires_grad;
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::MatMul: {
      const Tensor& b = nodes_[n.b].value;
      Tensor tmp;
      if (need_a) {
        matmul_nt_into(g, b, tmp);  // g * b^T
        accumulate(n.a, tmp);
      }
      if (nodes_[n.b].requires_grad) {
        matmul_tn_into(a, g, tmp);  // a^T * g
        accumulate(n.b, tmp);
      }
      return;
    }
    case Op::MatMulNT: {
      // y = a * b^T
      const Tensor& b = nodes_[n.b].value;
      Tensor tmp;
      if (need_a) {
        matmul_into(g, b, tmp);
        accumulate(n.a, tmp);
      }
      if (nodes_[n.b].requires_grad) {
        matmul_tn_into(g, a, tmp);  // g^T * a
        accumulate(n.b, tmp);
      }
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& b = nodes_[n.b].value;
      const Broadcast kind = broadcast_kind(op_name(n.op), a, b);
      if (n.op == Op::Mul) {
        if (need_a) {
          Tensor ga(a.rows(), a.cols());
          for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(r, c) * broadcast_at(b, kind, r, c);
          accumulate(n.a, ga);
        }
        if (nodes_[n.b].requires_grad) {
          Tensor gb(a.rows(), a.cols());
          for (std::size_t i = 0; i < a.size(); ++i) gb[i] = g[i] * a[i];
          accumulate(n.b, reduce_to(gb, b, kind));
        }
        return;
      }
      if (need_a) accumulate(n.a, g);
      if (nodes_[n.b].requires_grad) {
        Tensor gb = reduce_to(g, b, kind);
        if (n.op == Op::Sub)
          for (auto& x : gb.values()) x = -x;
        accumulate(n.b, gb);
      }
      return;
    }
    case Op::Minimum: {
      const Tensor& b = nodes_[n.b].value;
      Tensor ga(a.rows(), a.cols()), gb(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] <= b[i]) {
          ga[i] = g[i];
        } else {
          gb[i] = g[i];
        }
      }
      if (need_a) accumulate(n.a, ga);
      accumulate(n.b, gb);
      return;
    }
    case Op::Scale:
    case Op::AddScalar:
    case Op::Tanh:
    case Op::Relu:
    case Op::Exp:
    case Op::Log:
    case Op::Square:
    case Op::Clamp: {
      if (!need_a) return;
      Tensor ga(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        double d = 0.0;
        switch (n.op) {
          case Op::Scale: d = n.c0; break;
          case Op::AddScalar: d = 1.0; break;
          case Op::Tanh: d = 1.0 - n.value[i] * n.value[i]; break;
          case Op::Relu: d = x > 0.0 ? 1.0 : 0.0; break;
          case Op::Exp: d = n.value[i]; break;
          case Op::Log: d = 1.0 / x; break;
          case Op::Square: d = 2.0 * x; break;
          case Op::Clamp: d = (x >= n.c0 && x <= n.c1) ? 1.0 : 0.0; break;
          default: break;
        }
        ga[i] = g[i] * d;
      }
      accumulate(n.a, ga);
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      if (!need_a) return;
      const double s = n.op == Op::Mean ? g[0] / static_cast<double>(a.size()) : g[0];
      accumulate(n.a, Tensor(a.rows(), a.cols(), s));
      return;
    }
    case Op::SumRows:
    case Op::MeanRows: {
      if (!need_a) return;
      const double k = n.op == Op::MeanRows ? 1.0 / static_cast<double>(a.rows()) : 1.0;
      Tensor ga(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(0, c) * k;
      accumulate(n.a, ga);
      return;
    }
    case Op::SumCols: {
      if (!need_a) return;
      Tensor ga(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(r, 0);
      accumulate(n.a, ga);
      return;
    }
    case Op::Concat: {
      std::size_t offset = 0;
      for (auto id : n.inputs) {
        const Tensor& part = nodes_[id].value;
        if (nodes_[id].requires_grad) {
          Tensor gp(part.rows(), part.cols());
          for (std::size_t r = 0; r < part.rows(); ++r)
            std::copy(g.row(r).begin() + offset, g.row(r).begin() + offset + part.cols(),
                      gp.row(r).begin());
          accumulate(id, gp);
        }
        offset += part.cols();
      }
      return;
    }
    case Op::SliceCols: {
      if (!need_a) return;
      Tensor ga(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy(g.row(r).begin(), g.row(r).end(), ga.row(r).begin() + n.index[0]);
      accumulate(n.a, ga);
      return;
    }
    case Op::GatherRows: {
      if (!need_a) return;
      Tensor ga(a.rows(), a.cols());
      for (std::size_t i = 0; i < n.index.size(); ++i) {
        auto dst = ga.row(n.index[i]);
        auto src = g.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      }
      accumulate(n.a, ga);
      return;
    }
    case Op::Transpose: {
      if (!need_a) return;
      Tensor ga(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(c, r);
      accumulate(n.a, ga);
      return;
    }
  }
}

void Tape::set_leaf_value(Var leaf, const Tensor& value) {
  Node& n = at(leaf);
  if (n.op != Op::Leaf) throw std::invalid_argument("set_leaf_value: node is not a leaf");
  if (!n.value.same_shape(value)) shape_fail("set_leaf_value", n.value, value);
  n.value = value;
}

void Tape::replay() {
  for (auto& n : nodes_) compute(n);
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> Tape::branch_pattern() const {
  std::vector<std::uint8_t> out;
  for (const auto& n : nodes_) {
    if (n.op != Op::Relu && n.op != Op::Clamp && n.op != Op::Minimum) continue;
    const Tensor& a = nodes_[n.a].value;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double x = a[i];
      if (n.op == Op::Relu) out.push_back(x > 0.0);
      if (n.op == Op::Clamp) out.push_back(x < n.c0 ? 0 : x > n.c1 ? 2 : 1);
      if (n.op == Op::Minimum) out.push_back(x <= nodes_[n.b].value[i]);
    }
  }
  return out;
}

double grad_check(Tape& tape, Var loss, std::span<const Var> params, double eps, std::size_t* switched) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto p : params) {
    const Tensor& g = tape.grad(p);
    analytic.push_back(g.empty() ? Tensor(tape.value(p).rows(), tape.value(p).cols()) : g);
  }
  const double floor =
      std::max(1e-8, 1e4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(tape.value(loss).item())) / eps);
  const auto base = switched ? tape.branch_pattern() : std::vector<std::uint8_t>{};
  if (switched) *switched = 0;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor original = tape.value(params[k]);
    Tensor probe = original;
    for (std::size_t i = 0; i < original.size(); ++i) {
      probe[i] = original[i] + eps;
      tape.set_leaf_value(params[k], probe);
      tape.replay();
      const double up = tape.value(loss).item();
      bool flipped = switched && tape.branch_pattern() != base;
      probe[i] = original[i] - eps;
      tape.set_leaf_value(params[k], probe);
      tape.replay();
      const double down = tape.value(loss).item();
      flipped = flipped || (switched && tape.branch_pattern() != base);
      probe[i] = original[i];
      if (flipped) {
        ++*switched;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(floor, std::abs(numeric));
      worst = std::max(worst, err);
    }
    tape.set_leaf_value(params[k], original);
  }
  tape.replay();
  return worst;
}

AdamState::AdamState(std::span<Tensor* const> params, double learning_rate, double b1, double b2,
                     double eps)
    : lr(learning_rate), beta1(b1), beta2(b2), epsilon(eps) {
  for (const Tensor* p : params) {
    first_moment.emplace_back(p->rows(), p->cols());
    second_moment.emplace_back(p->rows(), p->cols());
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->same_shape(grads[k]) || !params[k]->same_shape(state.first_moment[k])) {
      throw ShapeError("adam_step: tensor " + std::to_string(k) + " shape mismatch (" +
                       params[k]->shape_string() + " vs " + grads[k].shape_string() + ")");
    }
    if (!grads[k].all_finite()) {
      throw NonFiniteGradient("adam_step: non-finite gradient in tensor " + std::to_string(k) +
                              " (" + grads[k].shape_string() + ") at step " +
                              std::to_string(state.timestep + 1));
    }
  }
  state.timestep += 1;
  const double t = static_cast<double>(state.timestep);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

std::vector<Tensor> collect_grads(const Tape& tape, std::span<Tensor* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor* p : params) {
    if (tape.has_param(*p)) {
      const Tensor& g = tape.grad_of(*p);
      out.push_back(g.empty() ? Tensor(p->rows(), p->cols()) : g);
    } else {
      out.emplace_back(p->rows(), p->cols());
    }
  }
  return out;
}

void keep_heap_resident() {
#if defined(__GLIBC__)
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 16 << 20);
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
#endif
}

}  // namespace pevfa::ad
