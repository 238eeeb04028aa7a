#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace medent::nn {

// Dense row-major matrix of doubles. Row vectors (1 x n) are the common
// case throughout the recurrent models.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Matrix row(std::vector<double> values);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

// Numerically stable softmax of a single row.
std::vector<double> softmax(std::span<const double> z);

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  // Adam state.
  Matrix m;
  Matrix v;
  std::uint64_t step = 0;

  Parameter() = default;
  Parameter(std::string name, Matrix value);
  void zero_grad() { grad.fill(0.0); }
};

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

void validate(const AdamHyper& hyper);

// Bias-corrected Adam update, then zeroes every gradient. Parameters whose
// gradient is identically zero are left untouched (no moment decay, no
// step).
void adam_step(std::span<Parameter* const> params, const AdamHyper& hyper);

// Handle to a node on a Tape.
struct Var {
  int id = -1;
};

class Tape;
using BackwardFn = std::function<void(Tape&)>;

// Define-by-run tape. Nodes are appended in execution order, so the node
// vector is already a topological order and backward is a reverse sweep.
// A tape built with record = false only evaluates values; it keeps no
// closures and rejects backward().
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  Var constant(Matrix value);
  // Leaf that reads `p.value`; gradients flow into `p.grad` on backward.
  Var param(Parameter& p);
  // Read-only leaf; no gradient is accumulated.
  Var param(const Parameter& p);

  const Matrix& value(Var v) const;
  // Gradient of the last backward() pass (zeros if the node got none).
  const Matrix& grad(Var v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var concat_cols(Var a, Var b);
  // Stacks 1 x n rows into a k x n matrix.
  Var stack_rows(std::span<const Var> rows);
  Var slice_cols(Var a, std::size_t start, std::size_t count);
  Var transpose(Var a);
  // Row `index` of an embedding table as a 1 x cols matrix.
  Var embedding(Parameter& table, int index);
  Var embedding(const Parameter& table, int index);
  Var softmax(Var row);
  // -ln(softmax(logits)[target] + 1e-12) as a 1 x 1 node.
  Var cross_entropy(Var logits, std::size_t target);
  Var mean(std::span<const Var> scalars);
  Var sum(Var a);

  // Appends an op with a caller supplied backward rule. Used for custom
  // primitives and for exercising the gradient checker.
  Var record(Matrix value, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, adding into
  // the gradients of every Parameter reached.
  void backward(Var loss);

  // Gradient buffer for `v`, allocated on first use. For backward rules.
  Matrix& grad_ref(Var v);

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;  // parameter leaves read in place
    Parameter* sink = nullptr;
    Parameter* embed_sink = nullptr;  // embedding rows accumulate here
    int embed_row = -1;
    Matrix grad;
    BackwardFn backward;
  };

  Var push(Matrix value, BackwardFn backward = {});
  Var push_embedding(const Parameter& table, Parameter* sink, int index);

  bool record_;
  std::vector<Node> nodes_;
};

// Central finite differences against the tape's analytic gradients on up
// to `max_samples` scalars (all of them when fewer exist). Returns the
// largest |analytic - numeric| / max(|analytic|, |numeric|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-3;

using LossBuilder = std::function<Var(Tape&)>;

double grad_check(const LossBuilder& build_loss, std::span<Parameter* const> params, double h = 1e-5,
                  std::size_t max_samples = 256, std::uint64_t seed = 7);

}  // namespace medent::nn
