#include "medent/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "medent/error.hpp"
#include "medent/util.hpp"

namespace medent::nn {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error("shape_mismatch", "matrix data length " + std::to_string(data_.size()) +
                                      " does not match shape " + shape_string());
  }
}

Matrix Matrix::row(std::vector<double> values) {
  const auto n = values.size();
  return Matrix(1, n, std::move(values));
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error("shape_mismatch", "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error("shape_mismatch",
                "matmul shape mismatch: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = &c(i, 0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = &b(k, 0);
      for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) {
    throw Error("empty_input", "softmax of an empty row");
  }
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> out(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i])) throw Error("non_finite", "softmax input is not finite");
    out[i] = std::exp(z[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

Parameter::Parameter(std::string n, Matrix v)
    : name(std::move(n)),
      value(std::move(v)),
      grad(value.rows(), value.cols()),
      m(value.rows(), value.cols()),
      v(value.rows(), value.cols()) {}

void validate(const AdamHyper& h) {
  if (!(h.learning_rate > 0.0) || !(h.beta1 > 0.0 && h.beta1 < 1.0) ||
      !(h.beta2 > 0.0 && h.beta2 < 1.0) || !(h.epsilon > 0.0)) {
    throw Error("invalid_argument", "Adam hyperparameters out of range");
  }
}

void adam_step(std::span<Parameter* const> params, const AdamHyper& hyper) {
  validate(hyper);
  for (Parameter* p : params) {
    auto g = p->grad.data();
    if (std::all_of(g.begin(), g.end(), [](double x) { return x == 0.0; })) continue;
    ++p->step;
    const double t = static_cast<double>(p->step);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    auto val = p->value.data();
    auto m = p->m.data();
    auto v = p->v.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      val[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Matrix value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw Error("non_finite", "operation produced a non-finite value (node " +
                                  std::to_string(nodes_.size()) + ")");
  }
  Node n;
  n.value = std::move(value);
  if (record_) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value)); }

Var Tape::param(Parameter& p) {
  Var v = param(static_cast<const Parameter&>(p));
  if (record_) nodes_[v.id].sink = &p;
  return v;
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.ref = &p.value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.ref ? *n.ref : n.value;
}

Matrix& Tape::grad_ref(Var v) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.empty()) {
    const Matrix& val = n.ref ? *n.ref : n.value;
    n.grad = Matrix(val.rows(), val.cols());
  }
  return n.grad;
}

const Matrix& Tape::grad(Var v) { return grad_ref(v); }

Var Tape::record(Matrix value, BackwardFn backward) { return push(std::move(value), std::move(backward)); }

Var Tape::matmul(Var a, Var b) {
  Matrix out = nn::matmul(value(a), value(b));
  return push(std::move(out), [a, b, self = Var{static_cast<int>(nodes_.size())}](Tape& t) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    const Matrix& dC = t.grad_ref(self);
    const std::size_t r = A.rows(), k = A.cols(), c = B.cols();
    {
      Matrix& dA = t.grad_ref(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += dC(i, j) * B(p, j);
          dA(i, p) += s;
        }
    }
    {
      Matrix& dB = t.grad_ref(b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) dB(p, j) += aip * dC(i, j);
        }
    }
  });
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw Error("shape_mismatch",
                std::string(op) + " shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
  }
}

}  // namespace

Var Tape::add(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  require_same_shape(A, B, "add");
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, b, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    Matrix& dA = t.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
    Matrix& dB = t.grad_ref(b);
    for (std::size_t i = 0; i < g.size(); ++i) dB[i] += g[i];
  });
}

Var Tape::sub(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  require_same_shape(A, B, "sub");
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, b, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    Matrix& dA = t.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
    Matrix& dB = t.grad_ref(b);
    for (std::size_t i = 0; i < g.size(); ++i) dB[i] -= g[i];
  });
}

Var Tape::mul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  require_same_shape(A, B, "mul");
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, b, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    {
      Matrix& dA = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * B[i];
    }
    Matrix& dB = t.grad_ref(b);
    for (std::size_t i = 0; i < g.size(); ++i) dB[i] += g[i] * A[i];
  });
}

Var Tape::sigmoid(Var a) {
  Matrix out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    const Matrix& y = t.value(self);
    Matrix& dA = t.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var Tape::tanh(Var a) {
  Matrix out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    const Matrix& y = t.value(self);
    Matrix& dA = t.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var Tape::concat_cols(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.rows() != B.rows()) {
    throw Error("shape_mismatch",
                "concat_cols shape mismatch: " + A.shape_string() + " vs " + B.shape_string());
  }
  const std::size_t na = A.cols(), nb = B.cols();
  Matrix out(A.rows(), na + nb);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    for (std::size_t j = 0; j < na; ++j) out(r, j) = A(r, j);
    for (std::size_t j = 0; j < nb; ++j) out(r, na + j) = B(r, j);
  }
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, b, na, nb, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    {
      Matrix& dA = t.grad_ref(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < na; ++j) dA(r, j) += g(r, j);
    }
    Matrix& dB = t.grad_ref(b);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < nb; ++j) dB(r, j) += g(r, na + j);
  });
}

Var Tape::stack_rows(std::span<const Var> rows) {
  if (rows.empty()) {
    throw Error("empty_input", "stack_rows of zero rows");
  }
  const std::size_t n = value(rows[0]).cols();
  Matrix out(rows.size(), n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Matrix& v = value(rows[r]);
    if (v.rows() != 1 || v.cols() != n) {
      throw Error("shape_mismatch", "stack_rows expects 1x" + std::to_string(n) + " rows, got " +
                                        v.shape_string());
    }
    for (std::size_t j = 0; j < n; ++j) out(r, j) = v[j];
  }
  const Var self{static_cast<int>(nodes_.size())};
  std::vector<Var> inputs(rows.begin(), rows.end());
  return push(std::move(out), [inputs = std::move(inputs), n, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    for (std::size_t r = 0; r < inputs.size(); ++r) {
      Matrix& d = t.grad_ref(inputs[r]);
      for (std::size_t j = 0; j < n; ++j) d[j] += g(r, j);
    }
  });
}

Var Tape::slice_cols(Var a, std::size_t start, std::size_t count) {
  const Matrix& A = value(a);
  if (start + count > A.cols() || count == 0) {
    throw Error("shape_mismatch", "slice_cols [" + std::to_string(start) + ", +" +
                                      std::to_string(count) + ") out of range for " + A.shape_string());
  }
  Matrix out(A.rows(), count);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t j = 0; j < count; ++j) out(r, j) = A(r, start + j);
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, start, count, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    Matrix& dA = t.grad_ref(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < count; ++j) dA(r, start + j) += g(r, j);
  });
}

Var Tape::transpose(Var a) {
  const Matrix& A = value(a);
  Matrix out(A.cols(), A.rows());
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) out(c, r) = A(r, c);
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [a, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    Matrix& dA = t.grad_ref(a);
    for (std::size_t r = 0; r < dA.rows(); ++r)
      for (std::size_t c = 0; c < dA.cols(); ++c) dA(r, c) += g(c, r);
  });
}

Var Tape::push_embedding(const Parameter& table, Parameter* sink, int index) {
  const Matrix& T = table.value;
  if (index < 0 || static_cast<std::size_t>(index) >= T.rows()) {
    throw Error("index_out_of_range", "embedding index " + std::to_string(index) + " out of range for " +
                                          table.name + " (" + T.shape_string() + ")");
  }
  Matrix out(1, T.cols());
  for (std::size_t j = 0; j < T.cols(); ++j) out[j] = T(static_cast<std::size_t>(index), j);
  Var v = push(std::move(out));
  if (record_ && sink) {
    nodes_[v.id].embed_sink = sink;
    nodes_[v.id].embed_row = index;
  }
  return v;
}

Var Tape::embedding(Parameter& table, int index) { return push_embedding(table, &table, index); }

Var Tape::embedding(const Parameter& table, int index) { return push_embedding(table, nullptr, index); }

Var Tape::softmax(Var row) {
  const Matrix& z = value(row);
  if (z.rows() != 1) {
    throw Error("shape_mismatch", "softmax expects a single row, got " + z.shape_string());
  }
  Matrix out = Matrix::row(nn::softmax(z.data()));
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [row, self](Tape& t) {
    const Matrix& g = t.grad_ref(self);
    const Matrix& y = t.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    Matrix& dz = t.grad_ref(row);
    for (std::size_t i = 0; i < g.size(); ++i) dz[i] += y[i] * (g[i] - dot);
  });
}

Var Tape::cross_entropy(Var logits, std::size_t target) {
  constexpr double kFloor = 1e-12;
  const Matrix& z = value(logits);
  if (z.rows() != 1) {
    throw Error("shape_mismatch", "cross_entropy expects a single row, got " + z.shape_string());
  }
  if (target >= z.cols()) {
    throw Error("index_out_of_range", "target index " + std::to_string(target) +
                                          " out of range for " + std::to_string(z.cols()) + " classes");
  }
  std::vector<double> p = nn::softmax(z.data());
  const double pt = p[target];
  Matrix out(1, 1, -std::log(pt + kFloor));
  const Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), [logits, target, p = std::move(p), self](Tape& t) {
    const double g = t.grad_ref(self)[0];
    const double pt = p[target];
    // d/dz_j of -ln(p_t + floor) = p_t / (p_t + floor) * (p_j - [j == t])
    const double scale = g * pt / (pt + kFloor);
    Matrix& dz = t.grad_ref(logits);
    for (std::size_t j = 0; j < p.size(); ++j) {
      dz[j] += scale * (p[j] - (j == target ? 1.0 : 0.0));
    }
  });
}

Var Tape::mean(std::span<const Var> scalars) {
  if (scalars.empty()) {
    throw Error("empty_input", "mean of zero scalars");
  }
  double s = 0.0;
  for (Var v : scalars) {
    const Matrix& m = value(v);
    if (m.size() != 1) throw Error("shape_mismatch", "mean expects 1x1 inputs, got " + m.shape_string());
    s += m[0];
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  const Var self{static_cast<int>(nodes_.size())};
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  return push(Matrix(1, 1, s * inv), [inputs = std::move(inputs), inv, self](Tape& t) {
    const double g = t.grad_ref(self)[0];
    for (Var v : inputs) t.grad_ref(v)[0] += g * inv;
  });
}

Var Tape::sum(Var a) {
  const Matrix& A = value(a);
  double s = 0.0;
  for (double x : A.data()) s += x;
  const Var self{static_cast<int>(nodes_.size())};
  return push(Matrix(1, 1, s), [a, self](Tape& t) {
    const double g = t.grad_ref(self)[0];
    Matrix& dA = t.grad_ref(a);
    for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += g;
  });
}

void Tape::backward(Var loss) {
  if (!record_) {
    throw Error("not_recording", "backward() on a tape built without recording");
  }
  const Matrix& l = value(loss);
  if (l.rows() != 1 || l.cols() != 1) {
    throw Error("non_scalar_loss", "backward() needs a 1x1 loss, got " + l.shape_string());
  }
  for (auto& n : nodes_) n.grad = Matrix();
  grad_ref(loss)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this);
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.sink) {
      auto dst = node.sink->grad.data();
      auto src = node.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    } else if (node.embed_sink) {
      Matrix& dst = node.embed_sink->grad;
      const auto row = static_cast<std::size_t>(node.embed_row);
      for (std::size_t k = 0; k < dst.cols(); ++k) dst(row, k) += node.grad[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const LossBuilder& build_loss, std::span<Parameter* const> params, double h,
                  std::size_t max_samples, std::uint64_t seed) {
  if (!(h > 0.0)) {
    throw Error("invalid_argument", "finite-difference step must be positive");
  }
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build_loss(tape);
    if (!std::isfinite(tape.value(loss)[0])) {
      throw Error("non_finite", "loss is not finite");
    }
    tape.backward(loss);
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < params[i]->value.size(); ++k) coords.emplace_back(i, k);
  }
  if (coords.size() > max_samples) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_samples);
  }

  auto eval = [&]() {
    Tape tape(false);
    const double v = tape.value(build_loss(tape))[0];
    if (!std::isfinite(v)) throw Error("non_finite", "loss is not finite");
    return v;
  };

  double worst = 0.0;
  for (auto [i, k] : coords) {
    double& x = params[i]->value[k];
    const double orig = x;
    x = orig + h;
    const double up = eval();
    x = orig - h;
    const double down = eval();
    x = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i][k];
    const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  for (Parameter* p : params) p->zero_grad();
  return worst;
}

}  // namespace medent::nn
