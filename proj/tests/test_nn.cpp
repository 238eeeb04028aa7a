#include <doctest.h>

#include <cmath>
#include <vector>

#include "medent/error.hpp"
#include "medent/nn.hpp"
#include "medent/util.hpp"

using namespace medent;
using namespace medent::nn;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& x : m.data()) x = rng.uniform(-scale, scale);
  return m;
}

// Central difference of a scalar function of one parameter entry, computed
// without the tape's backward pass.
double numeric_grad(const LossBuilder& f, Parameter& p, std::size_t k, double h = 1e-5) {
  const double orig = p.value[k];
  p.value[k] = orig + h;
  Tape up(false);
  const double fu = up.value(f(up))[0];
  p.value[k] = orig - h;
  Tape down(false);
  const double fd = down.value(f(down))[0];
  p.value[k] = orig;
  return (fu - fd) / (2 * h);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

}  // namespace

TEST_CASE("matmul forward") {
  Tape t(false);
  SUBCASE("identity") {
    Matrix x = Matrix::from_rows({{1.5, -2}, {3, 4}});
    Var out = t.matmul(t.constant(Matrix::from_rows({{1, 0}, {0, 1}})), t.constant(x));
    CHECK(t.value(out) == x);
  }
  SUBCASE("hand arithmetic") {
    Var out = t.matmul(t.constant(Matrix::from_rows({{1, 2}})), t.constant(Matrix::from_rows({{3}, {4}})));
    CHECK(t.value(out)(0, 0) == 11.0);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      t.matmul(t.constant(Matrix(2, 3)), t.constant(Matrix(2, 3)));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == "shape_mismatch");
      CHECK(std::string(e.what()).find("2x3 * 2x3") != std::string::npos);
    }
  }
}

TEST_CASE("matmul gradients match central differences") {
  Rng rng(11);
  Parameter a("a", random_matrix(3, 4, rng));
  Parameter b("b", random_matrix(4, 2, rng));
  Parameter w("w", random_matrix(3, 2, rng));
  // Weighted sum so every output entry gets a distinct upstream gradient.
  LossBuilder f = [&](Tape& t) { return t.sum(t.mul(t.matmul(t.param(a), t.param(b)), t.param(w))); };
  Tape t;
  t.backward(f(t));
  for (Parameter* p : {&a, &b}) {
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      CHECK(rel_err(p->grad[k], numeric_grad(f, *p, k)) < 1e-8);
    }
  }
}

TEST_CASE("softmax") {
  SUBCASE("symmetric") {
    auto p = softmax(std::vector<double>{0, 0});
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
  }
  SUBCASE("shift invariant") {
    for (double c : {-50.0, 0.0, 3.7, 700.0}) {
      auto p = softmax(std::vector<double>{c, c, c});
      for (double x : p) CHECK(std::abs(x - 1.0 / 3.0) < 1e-15);
    }
  }
  SUBCASE("no overflow at large logits") {
    auto p = softmax(std::vector<double>{1000, 0});
    CHECK(std::isfinite(p[0]));
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] < 1e-300);
  }
  SUBCASE("empty row is an error") { CHECK_THROWS_AS(softmax(std::vector<double>{}), Error); }
  SUBCASE("sums to one on random rows") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> z(1 + rng.below(50));
      for (auto& x : z) x = rng.uniform(-30, 30);
      auto p = softmax(z);
      double s = 0;
      for (double x : p) {
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("cross entropy") {
  SUBCASE("confident correct prediction is near zero") {
    Tape t(false);
    Var l = t.cross_entropy(t.constant(Matrix::row({60, 0, 0})), 0);
    CHECK(t.value(l)[0] < 1e-12);
  }
  SUBCASE("uniform gives ln K") {
    for (std::size_t k : {2u, 7u, 100u}) {
      Tape t(false);
      Var l = t.cross_entropy(t.constant(Matrix(1, k)), k - 1);
      CHECK(t.value(l)[0] == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-10));
    }
  }
  SUBCASE("target out of range") {
    Tape t(false);
    CHECK_THROWS_AS(t.cross_entropy(t.constant(Matrix(1, 3)), 3), Error);
  }
  SUBCASE("logit gradient is softmax minus one-hot") {
    Rng rng(5);
    Parameter z("z", random_matrix(1, 6, rng, 2.0));
    const std::size_t target = 4;
    LossBuilder f = [&](Tape& t) { return t.cross_entropy(t.param(z), target); };
    Tape t;
    t.backward(f(t));
    auto p = softmax(z.value.data());
    for (std::size_t j = 0; j < 6; ++j) {
      const double expected = p[j] - (j == target ? 1.0 : 0.0);
      CHECK(rel_err(z.grad[j], expected) < 1e-10);
      CHECK(rel_err(z.grad[j], numeric_grad(f, z, j)) < 1e-8);
    }
  }
}

TEST_CASE("backward") {
  SUBCASE("square") {
    Parameter w("w", Matrix(1, 1, 3.0));
    Tape t;
    Var x = t.param(w);
    t.backward(t.mul(x, x));
    CHECK(w.grad[0] == 6.0);
  }
  SUBCASE("gradients add across uses") {
    Parameter w("w", Matrix(1, 1, 3.0));
    Tape t;
    t.backward(t.add(t.param(w), t.param(w)));
    CHECK(w.grad[0] == 2.0);
  }
  SUBCASE("embedding rows accumulate") {
    Parameter e("e", Matrix(4, 2, 1.0));
    Tape t;
    Var a = t.embedding(e, 1);
    Var b = t.embedding(e, 1);
    Var c = t.embedding(e, 3);
    t.backward(t.sum(t.add(t.add(a, b), c)));
    CHECK(e.grad(1, 0) == 2.0);
    CHECK(e.grad(3, 1) == 1.0);
    CHECK(e.grad(0, 0) == 0.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Parameter w("w", Matrix(1, 2, 1.0));
    Tape t;
    CHECK_THROWS_WITH_AS(t.backward(t.param(w)), doctest::Contains("1x1"), Error);
  }
  SUBCASE("non-finite values are rejected at op boundaries") {
    Tape t;
    CHECK_THROWS_AS(t.constant(Matrix(1, 1, std::nan(""))), Error);
  }
}

TEST_CASE("every primitive matches central differences") {
  Rng rng(23);
  Parameter a("a", random_matrix(1, 5, rng));
  Parameter b("b", random_matrix(1, 5, rng));
  Parameter m("m", random_matrix(3, 5, rng));
  Parameter e("e", random_matrix(6, 5, rng));
  LossBuilder f = [&](Tape& t) {
    Var x = t.param(a);
    Var y = t.param(b);
    Var s = t.sigmoid(t.mul(x, y));
    Var h = t.tanh(t.sub(s, t.embedding(e, 2)));
    Var rows = t.stack_rows(std::vector<Var>{h, x, t.slice_cols(t.concat_cols(y, h), 2, 5)});
    Var scores = t.matmul(h, t.transpose(t.add(rows, t.param(m))));
    Var w = t.softmax(scores);
    Var ctx = t.matmul(w, t.param(m));
    Var logits = t.concat_cols(ctx, scores);
    std::vector<Var> parts{t.cross_entropy(logits, 2), t.sum(t.mul(ctx, ctx))};
    return t.mean(parts);
  };
  std::vector<Parameter*> params{&a, &b, &m, &e};
  CHECK(grad_check(f, params, 1e-5, 1000) < 1e-7);
}

TEST_CASE("grad_check") {
  Rng rng(2);
  SUBCASE("linear model is exact") {
    Parameter w("w", random_matrix(4, 3, rng));
    Parameter x("x", random_matrix(1, 4, rng));
    LossBuilder f = [&](Tape& t) { return t.sum(t.matmul(t.param(x), t.param(w))); };
    std::vector<Parameter*> params{&w, &x};
    CHECK(grad_check(f, params) < 1e-10);
  }
  SUBCASE("a corrupted backward rule is detected") {
    Parameter w("w", random_matrix(1, 8, rng));
    // sigmoid whose backward pass forgets the (1 - y) factor.
    LossBuilder f = [&](Tape& t) {
      Var x = t.param(w);
      Matrix y = t.value(x);
      for (auto& v : y.data()) v = 1.0 / (1.0 + std::exp(-v));
      const Var self{static_cast<int>(t.size())};
      Var s = t.record(y, [x, self](Tape& tt) {
        const Matrix& g = tt.grad_ref(self);
        const Matrix& out = tt.value(self);
        Matrix& dx = tt.grad_ref(x);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * out[i];
      });
      return t.sum(s);
    };
    std::vector<Parameter*> params{&w};
    CHECK(grad_check(f, params) > 1e-2);
  }
  SUBCASE("non-finite loss is an error") {
    Parameter w("w", Matrix(1, 1, 0.0));
    LossBuilder f = [&](Tape& t) {
      Var x = t.param(w);
      return t.record(Matrix(1, 1, std::nan("")), {});
      (void)x;
    };
    std::vector<Parameter*> params{&w};
    CHECK_THROWS_AS(grad_check(f, params), Error);
  }
  SUBCASE("step must be positive") {
    Parameter w("w", Matrix(1, 1, 0.0));
    std::vector<Parameter*> params{&w};
    CHECK_THROWS_AS(grad_check([&](Tape& t) { return t.param(w); }, params, 0.0), Error);
  }
}

TEST_CASE("adam") {
  AdamHyper hyper;  // lr 1e-3, betas (0.9, 0.999), eps 1e-8
  SUBCASE("first step moves by about lr") {
    Parameter p("p", Matrix(1, 1, 0.5));
    p.grad[0] = 1.0;
    std::vector<Parameter*> ps{&p};
    adam_step(ps, hyper);
    // t = 1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    const double expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
    CHECK(p.value[0] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(p.step == 1);
    CHECK(p.grad[0] == 0.0);
  }
  SUBCASE("zero gradient leaves values untouched, even with history") {
    Parameter p("p", Matrix(2, 2, 0.25));
    std::vector<Parameter*> ps{&p};
    p.grad.fill(0.3);
    adam_step(ps, hyper);
    const Matrix before = p.value;
    const auto step = p.step;
    adam_step(ps, hyper);
    CHECK(p.value == before);
    CHECK(p.step == step);
  }
  SUBCASE("deterministic") {
    auto run = [&] {
      Rng rng(9);
      Parameter p("p", random_matrix(3, 3, rng));
      std::vector<Parameter*> ps{&p};
      for (int i = 0; i < 20; ++i) {
        for (auto& g : p.grad.data()) g = rng.uniform(-1, 1);
        adam_step(ps, hyper);
      }
      return p.value;
    };
    CHECK(run() == run());
  }
  SUBCASE("invalid hyperparameters") {
    Parameter p("p", Matrix(1, 1));
    std::vector<Parameter*> ps{&p};
    CHECK_THROWS_AS(adam_step(ps, AdamHyper{1e-3, 1.0, 0.999, 1e-8}), Error);
    CHECK_THROWS_AS(adam_step(ps, AdamHyper{0.0, 0.9, 0.999, 1e-8}), Error);
  }
}

TEST_CASE("tape replay is bit-identical") {
  Rng rng(4);
  Parameter w("w", random_matrix(5, 5, rng));
  Parameter x("x", random_matrix(1, 5, rng));
  auto eval = [&] {
    Tape t;
    Var h = t.param(x);
    for (int i = 0; i < 4; ++i) h = t.tanh(t.matmul(h, t.param(w)));
    return t.value(t.softmax(h));
  };
  CHECK(eval() == eval());
}
