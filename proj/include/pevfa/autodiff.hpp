#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pevfa::ad {

/// Dense row-major rank-2 tensor of doubles. Vectors are 1xN rows, scalars 1x1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::span<const double> values);
  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double item() const;
  void fill(double v);
  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense kernels. Each output row depends only on the matching input row, with a
// fixed accumulation order, so row permutations of the inputs permute outputs exactly.
void matmul_into(const Tensor& a, const Tensor& b, Tensor& out);     // a * b
void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& out);  // a * b^T
void matmul_tn_into(const Tensor& a, const Tensor& b, Tensor& out);  // a^T * b

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  MatMulNT,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Relu,
  Exp,
  Log,
  Square,
  Sum,
  Mean,
  SumRows,
  MeanRows,
  SumCols,
  Concat,
  SliceCols,
  GatherRows,
  Transpose,
  Clamp,
  Minimum,
};

const char* op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  std::uint32_t id = 0;
};

/// Reverse-mode tape. Records primitive operations in topological order and
/// supports replaying the forward pass after leaf values change.
class Tape {
 public:
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Tensor value);
  /// Leaf that receives a gradient. The same tensor object registered twice
  /// maps to the same node.
  Var param(const Tensor& source);
  /// True once `source` has been registered through param().
  bool has_param(const Tensor& source) const;
  Var param_var(const Tensor& source) const;

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  // Binary elementwise ops: b may be same shape, 1xN (row broadcast), Rx1
  // (column broadcast) or 1x1.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }
  Var tanh(Var a);
  Var relu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var sum_rows(Var a);   // RxC -> 1xC
  Var mean_rows(Var a);  // RxC -> 1xC, canonical (sorted) accumulation order
  Var sum_cols(Var a);   // RxC -> Rx1
  Var concat(std::span<const Var> parts);  // column-wise, equal row counts
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var gather_rows(Var a, std::vector<std::size_t> index);
  Var transpose(Var a);
  Var clamp(Var a, double lo, double hi);
  Var minimum(Var a, Var b);

  /// Reference is invalidated by the next operation recorded on this tape.
  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient accumulated by the last backward(); zero tensor if none reached.
  const Tensor& grad(Var v) const;
  /// Gradient with respect to a registered parameter tensor.
  const Tensor& grad_of(const Tensor& source) const { return grad(param_var(source)); }

  void backward(Var loss);
  void zero_grad();

  /// Overwrite a leaf's value; call replay() to refresh downstream values.
  void set_leaf_value(Var leaf, const Tensor& value);
  void replay();

  std::size_t node_count() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool records_grad() const { return record_grad_; }
  /// Which side of its switching point every relu, clamp and minimum entry is on.
  std::vector<std::uint8_t> branch_pattern() const;

 private:
  struct Node {
    Op op = Op::Leaf;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    std::vector<std::uint32_t> inputs;   // Concat
    std::vector<std::size_t> index;      // GatherRows, SliceCols (begin,end)
    double c0 = 0.0;
    double c1 = 0.0;
    bool requires_grad = false;
    bool is_param = false;
    Tensor value;
    Tensor grad;
  };

  Var push(Node node);
  void compute(Node& node);
  void propagate(const Node& node);
  Node& at(Var v) { return nodes_.at(v.id); }
  const Node& at(Var v) const { return nodes_.at(v.id); }
  void accumulate(std::uint32_t id, const Tensor& g);

  bool record_grad_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::uint32_t> params_;
  Tensor empty_grad_;
};

/// Max over registered parameter entries of
/// |analytic - central difference| / max(floor, |central difference|), where floor is
/// 1e4 times the rounding noise of the difference quotient (eps_mach * max(1, |loss|) / eps)
/// and at least 1e-8.
/// Runs backward() on `loss` itself, then perturbs each entry and replays.
/// With `switched` set, entries whose +-eps replay changes branch_pattern() are left
/// out and counted there.
double grad_check(Tape& tape, Var loss, std::span<const Var> params, double eps,
                  std::size_t* switched = nullptr);

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with bias correction. Moments shape-match the parameters given at construction.
struct AdamState {
  AdamState() = default;
  AdamState(std::span<Tensor* const> params, double learning_rate, double beta1 = 0.9,
            double beta2 = 0.999, double epsilon = 1e-8);

  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t timestep = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One Adam step in place. Throws NonFiniteGradient (parameters untouched) if any
/// gradient entry is NaN or infinite.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

/// Collects gradients for `params` from a tape that has run backward(). Parameters
/// never registered on the tape get a zero gradient.
std::vector<Tensor> collect_grads(const Tape& tape, std::span<Tensor* const> params);

/// Stops glibc from trimming the heap after every tape is freed. Training builds and
/// drops a tape per minibatch, and the release/re-fault cycle otherwise costs about
/// as much as the arithmetic. Process-wide; a no-op off glibc.
void keep_heap_resident();

}  // namespace pevfa::ad
