#include <doctest.h>

#include <cmath>
#include <random>

#include "inheritlab/error.hpp"
#include "inheritlab/gradcheck.hpp"
#include "inheritlab/optim.hpp"
#include "inheritlab/tape.hpp"

using namespace ilab;

TEST_CASE("tensor construction enforces shape/value agreement") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5, 0.0)), Error);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6.0);
}

TEST_CASE("grad of x*x at 3 is 6") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0), true);
  Var loss = tape.mul(x, x);
  const Var params[] = {x};
  const GradResult g = tape.grad(loss, params);
  CHECK(g.grads[0].item() == 6.0);
  CHECK(g.reached[0]);
}

TEST_CASE("constant loss gives zero gradient and flags the parameter") {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 2}, 1.0), true);
  Var c = tape.leaf(Tensor::scalar(5.0), false);
  const Var params[] = {x};
  const GradResult g = tape.grad(c, params);
  CHECK(g.grads[0].same_shape(tape.value(x)));
  CHECK(frobenius_norm(g.grads[0]) == 0.0);
  CHECK(g.any_unreached());
}

TEST_CASE("non-scalar loss is a contract violation") {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 2}, 1.0), true);
  const Var params[] = {x};
  CHECK_THROWS_AS(tape.grad(tape.scale(x, 2.0), params), Error);
}

TEST_CASE("two-layer MLP gradient agrees with central differences") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  auto rnd = [&](std::size_t r, std::size_t c) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.values()) v = n(rng);
    return t;
  };
  const std::vector<Tensor> inputs = {rnd(5, 4), rnd(4, 6), rnd(1, 6), rnd(6, 3), rnd(1, 3)};
  const std::vector<int> targets = {0, 2, 1, 1, 0};
  const LossBuilder mlp = [targets](Tape& t, std::span<const Var> in) {
    Var h = t.gelu(t.add_rowvec(t.matmul(in[0], in[1]), in[2]));
    Var logits = t.add_rowvec(t.matmul(h, in[3]), in[4]);
    return t.cross_entropy(logits, targets);
  };
  const GradCheckResult r = gradcheck(inputs, mlp);
  CHECK(r.entries == 20 + 24 + 6 + 18 + 3);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("every primitive passes 100 random gradient checks") {
  const auto checks = check_all_primitives(2024, 100);
  CHECK(checks.size() >= 20);
  for (const auto& c : checks) {
    INFO(c.op);
    CHECK(c.cases == 100);
    CHECK(c.max_rel_error < 1e-4);
  }
}

TEST_CASE("cayley of zero is the identity") {
  const Tensor r = kernels::cayley(Tensor::matrix(5, 5));
  CHECK(r.identical(Tensor::identity(5)));
}

TEST_CASE("2x2 cayley is a rotation by 2*atan(a/2)") {
  for (double a : {-3.0, -0.4, 0.0, 0.7, 2.0, 9.0}) {
    Tensor u = Tensor::matrix(2, 2);
    u.at(0, 1) = a;
    const Tensor r = kernels::cayley(u);
    const double th = 2.0 * std::atan(a / 2.0);
    CHECK(r.at(0, 0) == doctest::Approx(std::cos(th)).epsilon(1e-14));
    CHECK(r.at(1, 1) == doctest::Approx(std::cos(th)).epsilon(1e-14));
    CHECK(r.at(0, 1) == doctest::Approx(std::sin(th)).epsilon(1e-14));
    CHECK(r.at(1, 0) == doctest::Approx(-std::sin(th)).epsilon(1e-14));
  }
  Tensor u = Tensor::matrix(2, 2);
  u.at(0, 1) = 2.0;
  const Tensor r = kernels::cayley(u);
  CHECK(max_abs_diff(r, Tensor({2, 2}, {0.0, 1.0, -1.0, 0.0})) < 1e-15);
}

TEST_CASE("cayley output is orthogonal over 1000 random draws") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    Tensor u = Tensor::matrix(16, 16);
    for (double& v : u.values()) v = n(rng);
    const Tensor r = kernels::cayley(u);
    Tensor e = kernels::matmul_tn(r, r);
    for (std::size_t i = 0; i < 16; ++i) e.at(i, i) -= 1.0;
    worst = std::max(worst, frobenius_norm(e));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("singular solve raises a numerical error") {
  Tensor m({2, 2}, {1.0, 2.0, 2.0, 4.0});
  try {
    kernels::solve(m, Tensor::identity(2));
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumerical);
  }
}

TEST_CASE("replay reproduces every node bit-for-bit") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x = Tensor::matrix(4, 6), w = Tensor::matrix(6, 6), u = Tensor::matrix(2, 2);
  for (Tensor* t : {&x, &w, &u})
    for (double& v : t->values()) v = n(rng);
  Tape tape;
  Var xv = tape.borrow(x), wv = tape.leaf(w, true), uv = tape.leaf(u, true);
  Var h = tape.attention(tape.concat_rows(tape.matmul(xv, wv), tape.matmul(xv, wv)),
                         tape.concat_rows(tape.matmul(xv, wv), tape.matmul(xv, wv)), 2, 0);
  Var r = tape.matmul(h, tape.cayley(uv));
  tape.sum(tape.softmax(r));
  const std::vector<Tensor> again = tape.replay();
  REQUIRE(again.size() == tape.size());
  for (std::uint32_t i = 0; i < tape.size(); ++i) CHECK(again[i].identical(tape.value(Var{i})));
}

TEST_CASE("non-finite forward output is rejected") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(1e300), false);
  CHECK_THROWS_AS(tape.mul(x, x), Error);
}

TEST_CASE("window bounds stay ordered inside the unit interval") {
  for (double a : {-20.0, -1.0, 0.0, 3.0, 20.0})
    for (double b : {-20.0, 0.0, 20.0}) {
      const WindowBounds w = squash_bounds(a, b);
      CHECK(w.lo >= 0.0);
      CHECK(w.lo <= w.hi);
      CHECK(w.hi <= 1.0);
    }
}

TEST_CASE("adam moves a quadratic toward its minimum") {
  Tensor p = Tensor::scalar(4.0);
  Adam opt(AdamConfig{0.1});
  for (int i = 0; i < 500; ++i) {
    const Tensor g = Tensor::scalar(2.0 * p.item());
    Tensor* ps[] = {&p};
    opt.step(ps, std::span<const Tensor>(&g, 1));
  }
  CHECK(std::abs(p.item()) < 1e-2);
}
