#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "prtg/autodiff.hpp"
#include "prtg/rng.hpp"

using namespace prtg;
using TapeD = Tape<double>;
using Id = TapeD::Id;

namespace {

Matrix<double> random_matrix(int rows, int cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Matrix<double> m(rows, cols);
  Rng rng(seed);
  for (double& v : m.flat()) v = lo + (hi - lo) * uniform01(rng);
  return m;
}

using Builder = std::function<Id(TapeD&, const std::vector<Id>&)>;

// Scalar probe: sum(out * R) for a fixed random R, so every output element
// contributes a distinct weight.
double probe(const std::vector<Matrix<double>>& inputs, const Builder& build, std::vector<Matrix<double>>* grads) {
  TapeD tape;
  std::vector<Id> ids;
  for (const auto& m : inputs) ids.push_back(tape.input(m));
  const Id out = build(tape, ids);
  const auto& v = tape.value(out);
  const Id r = tape.constant(random_matrix(v.rows(), v.cols(), 99));
  const Id loss = tape.sum(tape.mul(out, r));
  const double value = tape.value(loss)(0, 0);
  if (grads != nullptr) {
    tape.backward(loss);
    grads->clear();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& g = tape.grad(ids[i]);
      grads->push_back(g.size() == 0 ? Matrix<double>(inputs[i].rows(), inputs[i].cols()) : g);
    }
  }
  return value;
}

// Central differences on every input element.
void check_gradients(std::vector<Matrix<double>> inputs, const Builder& build, double tol = 1e-6) {
  std::vector<Matrix<double>> analytic;
  probe(inputs, build, &analytic);
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i].data()[k];
      inputs[i].data()[k] = x0 + h;
      const double fp = probe(inputs, build, nullptr);
      inputs[i].data()[k] = x0 - h;
      const double fm = probe(inputs, build, nullptr);
      inputs[i].data()[k] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[i].data()[k];
      INFO("input " << i << " element " << k);
      CHECK(std::abs(a - fd) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

}  // namespace

TEST_CASE("linear layer gradients") {
  check_gradients({random_matrix(5, 4, 1), random_matrix(4, 3, 2), random_matrix(1, 3, 3)},
                  [](TapeD& t, const std::vector<Id>& x) { return t.linear(x[0], x[1], x[2]); });
  check_gradients({random_matrix(6, 2, 4), random_matrix(2, 7, 5)},
                  [](TapeD& t, const std::vector<Id>& x) { return t.linear(x[0], x[1]); });
}

TEST_CASE("elementwise op gradients") {
  const auto a = random_matrix(4, 3, 6);
  const auto b = random_matrix(4, 3, 7);
  check_gradients({a, b}, [](TapeD& t, const std::vector<Id>& x) { return t.add(x[0], x[1]); });
  check_gradients({a, b}, [](TapeD& t, const std::vector<Id>& x) { return t.mul(x[0], x[1]); });
  check_gradients({a}, [](TapeD& t, const std::vector<Id>& x) { return t.scale(x[0], -2.5); });
  check_gradients({a}, [](TapeD& t, const std::vector<Id>& x) { return t.softplus(x[0]); });
  check_gradients({a}, [](TapeD& t, const std::vector<Id>& x) { return t.exp(x[0]); });
  check_gradients({a}, [](TapeD& t, const std::vector<Id>& x) { return t.sin(x[0]); });
  check_gradients({a}, [](TapeD& t, const std::vector<Id>& x) { return t.cos(x[0]); });
  // Values kept away from the kink.
  auto r = random_matrix(4, 3, 8, 0.1, 1.0);
  for (std::size_t i = 0; i < r.size(); i += 2) r.data()[i] = -r.data()[i];
  check_gradients({r}, [](TapeD& t, const std::vector<Id>& x) { return t.relu(x[0]); });
}

TEST_CASE("concat, encode and reductions") {
  check_gradients({random_matrix(3, 2, 9), random_matrix(3, 4, 10)},
                  [](TapeD& t, const std::vector<Id>& x) { return t.concat(x[0], x[1]); });
  check_gradients({random_matrix(4, 3, 11)}, [](TapeD& t, const std::vector<Id>& x) { return t.encode(x[0], 3); },
                  1e-5);
  check_gradients({random_matrix(5, 3, 12)}, [](TapeD& t, const std::vector<Id>& x) { return t.sum_squares(x[0]); });
  check_gradients({random_matrix(6, 1, 13)},
                  [](TapeD& t, const std::vector<Id>& x) { return t.mean_square_rows(x[0], {0, 2, 5}); });
}

TEST_CASE("encode layout is [v, sin, cos] per frequency") {
  TapeD t;
  Matrix<double> x(1, 3);
  x(0, 0) = 0.1;
  x(0, 1) = -0.3;
  x(0, 2) = 0.7;
  const Id e = t.encode(t.constant(x), 2);
  const auto& v = t.value(e);
  REQUIRE(v.cols() == 15);
  for (int c = 0; c < 3; ++c) {
    CHECK(v(0, c) == x(0, c));
    CHECK(v(0, 3 + c) == doctest::Approx(std::sin(kPi * x(0, c))));
    CHECK(v(0, 6 + c) == doctest::Approx(std::cos(kPi * x(0, c))));
    CHECK(v(0, 9 + c) == doctest::Approx(std::sin(2 * kPi * x(0, c))));
    CHECK(v(0, 12 + c) == doctest::Approx(std::cos(2 * kPi * x(0, c))));
  }
}

TEST_CASE("composite gradients over ragged rays") {
  const std::vector<int> offsets = {0, 3, 4, 9};
  std::vector<double> delta;
  Rng rng(14);
  for (int i = 0; i < 9; ++i) delta.push_back(0.05 + 0.3 * uniform01(rng));
  check_gradients({random_matrix(9, 1, 15, 0.0, 4.0), random_matrix(9, 3, 16, 0.0, 1.0)},
                  [&](TapeD& t, const std::vector<Id>& x) { return t.composite(x[0], x[1], delta, offsets); });
}

TEST_CASE("tonemapped L2 treats the weight as a constant") {
  const auto pred = random_matrix(4, 3, 17, 0.2, 2.0);
  const auto target = random_matrix(4, 3, 18, 0.0, 2.0);
  const double eps = 1e-3;
  Matrix<double> weight(4, 3);
  for (std::size_t i = 0; i < weight.size(); ++i) weight.data()[i] = 1.0 / std::pow(pred.data()[i] + eps, 2);

  // Fixed weight: ordinary gradient of a weighted quadratic.
  check_gradients({pred}, [&](TapeD& t, const std::vector<Id>& x) { return t.tonemapped_l2(x[0], target, weight); });

  // The eps form has the same value and the same (stop-gradient) adjoint.
  TapeD a, b;
  const Id pa = a.input(pred);
  const Id pb = b.input(pred);
  const Id la = a.tonemapped_l2(pa, target, weight);
  const Id lb = b.tonemapped_l2(pb, target, eps);
  CHECK(a.value(la)(0, 0) == doctest::Approx(b.value(lb)(0, 0)).epsilon(1e-14));
  a.backward(la);
  b.backward(lb);
  for (std::size_t i = 0; i < pred.size(); ++i)
    CHECK(a.grad(pa).data()[i] == doctest::Approx(b.grad(pb).data()[i]).epsilon(1e-14));
}

TEST_CASE("parameters accumulate into external gradient storage") {
  const auto w = random_matrix(3, 2, 19);
  Matrix<double> gw(3, 2);
  TapeD t;
  const Id x = t.constant(random_matrix(4, 3, 20));
  const Id p = t.parameter(w, &gw);
  const Id loss = t.sum(t.linear(x, p));
  t.backward(loss);
  // d sum(xW) / dW_ij = sum_r x_ri
  const auto& xv = t.value(x);
  for (int i = 0; i < 3; ++i) {
    double col = 0.0;
    for (int r = 0; r < 4; ++r) col += xv(r, i);
    for (int j = 0; j < 2; ++j) CHECK(gw(i, j) == doctest::Approx(col));
  }
}

TEST_CASE("backward rejects non-scalar losses and reports non-finite gradients") {
  TapeD t;
  const Id x = t.input(random_matrix(2, 2, 21));
  CHECK_THROWS_AS(t.backward(x), InvalidInput);

  TapeD u;
  Matrix<double> big(1, 1, 800.0);
  const Id y = u.input(big);
  const Id loss = u.sum(u.exp(y));
  try {
    u.backward(loss);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("exp") != std::string::npos);
  }
}

TEST_CASE("replay recomputes values after a parameter change") {
  Matrix<double> w(1, 1, 2.0);
  TapeD t;
  const Id x = t.constant(Matrix<double>(1, 1, 3.0));
  const Id p = t.parameter(w, nullptr);
  const Id y = t.linear(x, p);
  CHECK(t.value(y)(0, 0) == 6.0);
  w(0, 0) = -1.0;
  t.replay();
  CHECK(t.value(y)(0, 0) == -3.0);
}

TEST_CASE("adam matches the bias-corrected update written out by hand") {
  Matrix<double> p(1, 2);
  p(0, 0) = 1.0;
  p(0, 1) = -2.0;
  Matrix<double> g(1, 2);
  std::vector<Matrix<double>*> ps{&p};
  std::vector<const Matrix<double>*> gs{&g};
  auto st = AdamState<double>::zeros_like(std::vector<const Matrix<double>*>{&p});

  double m[2] = {0, 0}, v[2] = {0, 0}, q[2] = {1.0, -2.0};
  const double grads[3][2] = {{0.5, -1.0}, {0.25, 2.0}, {-0.1, 0.0}};
  const double lr = 0.01;
  for (int step = 1; step <= 3; ++step) {
    g(0, 0) = grads[step - 1][0];
    g(0, 1) = grads[step - 1][1];
    adam_step<double>(st, ps, gs, lr);
    for (int k = 0; k < 2; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * grads[step - 1][k];
      v[k] = 0.999 * v[k] + 0.001 * grads[step - 1][k] * grads[step - 1][k];
      const double mh = m[k] / (1 - std::pow(0.9, step));
      const double vh = v[k] / (1 - std::pow(0.999, step));
      q[k] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(st.step == step);
    CHECK(p(0, 0) == doctest::Approx(q[0]).epsilon(1e-14));
    CHECK(p(0, 1) == doctest::Approx(q[1]).epsilon(1e-14));
  }
  // First step moves each coordinate by lr against the gradient sign.
  Matrix<double> p2(1, 1, 0.0), g2(1, 1, 3.0);
  auto s2 = AdamState<double>::zeros_like(std::vector<const Matrix<double>*>{&p2});
  adam_step<double>(s2, std::vector<Matrix<double>*>{&p2}, std::vector<const Matrix<double>*>{&g2}, 0.1);
  CHECK(p2(0, 0) == doctest::Approx(-0.1).epsilon(1e-8));
}

TEST_CASE("adam rejects shape mismatches") {
  Matrix<double> p(2, 2), g(2, 3);
  auto st = AdamState<double>::zeros_like(std::vector<const Matrix<double>*>{&p});
  CHECK_THROWS_AS(adam_step<double>(st, std::vector<Matrix<double>*>{&p}, std::vector<const Matrix<double>*>{&g}, 0.1),
                  InvalidInput);
}

TEST_CASE("learning rate decays exponentially between the endpoints") {
  CHECK(decayed_learning_rate(1e-3, 1e-5, 0, 100) == doctest::Approx(1e-3));
  CHECK(decayed_learning_rate(1e-3, 1e-5, 100, 100) == doctest::Approx(1e-5));
  CHECK(decayed_learning_rate(1e-3, 1e-5, 50, 100) == doctest::Approx(1e-4));
  CHECK(decayed_learning_rate(1e-3, 1e-5, 7, 0) == doctest::Approx(1e-3));
}
