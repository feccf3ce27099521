#include <doctest.h>

#include <gcrf/autodiff.hpp>
#include <gcrf/random.hpp>

using namespace gcrf;
using namespace gcrf::ad;

namespace {

using UnaryOp = std::function<Var(Var)>;

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = lo + (hi - lo) * rng.uniform();
  return m;
}

// Reduces op(x) to a scalar through a random linear probe and compares the
// tape gradient with central differences. Returns the relative error.
double check_unary(const UnaryOp& op, const Matrix& x, const Matrix& probe) {
  Tape tape;
  const auto leaf = tape.leaf(x);
  const auto y = op(leaf);
  tape.backprop(sum(mul(y, tape.constant(probe))));
  const auto analytic = tape.grad_vector(leaf);

  auto loss = [&](std::span<const double> p) {
    Tape t;
    Matrix xm(x.rows(), x.cols());
    std::copy(p.begin(), p.end(), xm.data().begin());
    return sum(mul(op(t.leaf(xm)), t.constant(probe))).scalar();
  };
  const auto numeric = finite_diff(loss, x.data(), 1e-5);
  return relative_error(analytic, numeric);
}

struct UnaryCase {
  const char* name;
  std::size_t rows, cols, out_rows, out_cols;
  double lo, hi;
  UnaryOp op;
};

}  // namespace

TEST_CASE("trivial derivatives") {
  Tape tape;
  auto x = tape.leaf(Matrix{{3.0}});
  tape.backprop(x * x);
  CHECK(tape.grad(x)(0, 0) == 6.0);

  Tape t2;
  const Matrix row{{0.3, -1.2, 2.0, 0.1}};
  auto r = t2.leaf(row);
  t2.backprop(sum(logsumexp_row(r)));
  const auto sm = softmax(row.data(), 1.0);
  const auto g = t2.grad_vector(r);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(g[i] - sm[i]) < 1e-15);
}

TEST_CASE("every primitive matches finite differences over 100 random trials") {
  Rng rng(2024);
  const std::vector<UnaryCase> cases = {
      {"add", 3, 4, 3, 4, -2, 2, [](Var a) { return add(a, a * a); }},
      {"add row broadcast", 3, 4, 3, 4, -2, 2,
       [](Var a) { return add(a * a, gather_row(a, 1)); }},
      {"sub", 3, 4, 3, 4, -2, 2, [](Var a) { return sub(a * a, gather_row(a, 2)); }},
      {"mul", 3, 4, 3, 4, -2, 2, [](Var a) { return mul(a, a); }},
      {"mul row broadcast", 3, 4, 3, 4, -2, 2, [](Var a) { return mul(a, gather_row(a, 0)); }},
      {"matmul", 3, 3, 3, 3, -2, 2, [](Var a) { return matmul(a, a); }},
      {"matmul transpose", 2, 3, 2, 2, -2, 2, [](Var a) { return matmul(a, transpose(a)); }},
      {"gather_row", 3, 4, 1, 4, -2, 2, [](Var a) { return gather_row(a, 2) * gather_row(a, 1); }},
      {"pick", 3, 4, 1, 1, -2, 2, [](Var a) { return pick(a, 1, 2) * pick(a, 2, 3); }},
      {"concat_cols", 2, 3, 2, 6, -2, 2, [](Var a) { return concat_cols({a, a * a}); }},
      {"concat_rows", 2, 3, 4, 3, -2, 2, [](Var a) {
         const Var parts[] = {a * a, a};
         return concat_rows(parts);
       }},
      {"tanh", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::tanh(a); }},
      {"log", 3, 4, 3, 4, 0.2, 3, [](Var a) { return ad::log(a); }},
      {"exp", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::exp(a); }},
      {"softmax tau=1", 3, 4, 3, 4, -2, 2, [](Var a) { return softmax_with_temperature(a, 1.0); }},
      {"softmax tau=0.5", 3, 4, 3, 4, -2, 2,
       [](Var a) { return softmax_with_temperature(a, 0.5); }},
      {"softmax tau=3", 3, 4, 3, 4, -2, 2, [](Var a) { return softmax_with_temperature(a, 3.0); }},
      {"log_softmax_row", 3, 4, 3, 4, -2, 2, [](Var a) { return log_softmax_row(a); }},
      {"logsumexp_row", 3, 4, 3, 1, -2, 2, [](Var a) { return logsumexp_row(a); }},
      {"max_row", 3, 4, 3, 1, -2, 2, [](Var a) { return max_row(a); }},
      {"transpose", 3, 4, 4, 3, -2, 2, [](Var a) { return transpose(a); }},
      {"reshape", 3, 4, 2, 6, -2, 2, [](Var a) { return reshape(a * a, 2, 6); }},
      {"sum", 3, 4, 1, 1, -2, 2, [](Var a) { return sum(a * a); }},
      {"mean", 3, 4, 1, 1, -2, 2, [](Var a) { return mean(a * a); }},
      {"scalar_scale", 3, 4, 3, 4, -2, 2, [](Var a) { return scalar_scale(a * a, -1.7); }},
      // Hard equal to soft, so the routed adjoint is also the true derivative.
      {"straight_through", 3, 4, 3, 4, -2, 2, [](Var a) {
         const auto sq = a * a;
         return straight_through(a.tape().constant(sq.to_matrix()), sq);
       }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto x = random_matrix(rng, c.rows, c.cols, c.lo, c.hi);
      const auto probe = random_matrix(rng, c.out_rows, c.out_cols);
      worst = std::max(worst, check_unary(c.op, x, probe));
    }
    const std::string name = c.name;
    CAPTURE(name);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("tanh near saturation: absolute error") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_matrix(rng, 2, 3, 8.0, 12.0);
    Tape tape;
    auto leaf = tape.leaf(x);
    tape.backprop(sum(ad::tanh(leaf)));
    const auto analytic = tape.grad_vector(leaf);
    auto loss = [](std::span<const double> p) {
      double s = 0.0;
      for (double v : p) s += std::tanh(v);
      return s;
    };
    const auto numeric = finite_diff(loss, x.data(), 1e-5);
    for (std::size_t i = 0; i < analytic.size(); ++i) CHECK(std::abs(analytic[i] - numeric[i]) < 1e-8);
  }
}

TEST_CASE("random five-node graph") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x0 = random_matrix(rng, 3, 3);
    const auto y0 = random_matrix(rng, 3, 3);
    auto graph = [](Var x, Var y) {
      const auto a = matmul(x, y);
      const auto b = ad::tanh(a);
      const auto c = softmax_with_temperature(b + x, 0.7);
      const auto d = ad::log(c);
      return sum(mul(d, ad::exp(y)));
    };
    Tape tape;
    auto x = tape.leaf(x0), y = tape.leaf(y0);
    tape.backprop(graph(x, y));
    auto analytic = tape.grad_vector(x);
    const auto gy = tape.grad_vector(y);
    analytic.insert(analytic.end(), gy.begin(), gy.end());

    std::vector<double> params(x0.data().begin(), x0.data().end());
    params.insert(params.end(), y0.data().begin(), y0.data().end());
    auto loss = [&](std::span<const double> p) {
      Tape t;
      Matrix xm(3, 3), ym(3, 3);
      std::copy(p.begin(), p.begin() + 9, xm.data().begin());
      std::copy(p.begin() + 9, p.end(), ym.data().begin());
      return graph(t.leaf(xm), t.leaf(ym)).scalar();
    };
    CHECK(relative_error(analytic, finite_diff(loss, params, 1e-5)) < 1e-6);
  }
}

TEST_CASE("straight_through routing") {
  Tape tape;
  const Matrix hard{{0.0, 1.0, 0.0}, {1.0, 0.0, 0.0}};
  const Matrix soft_v{{0.2, 0.7, 0.1}, {0.6, 0.3, 0.1}};
  auto h = tape.leaf(hard);
  auto s = tape.leaf(soft_v);
  auto st = straight_through(h, s);
  CHECK(st.to_matrix() == hard);
  const Matrix w{{1.5, -2.0, 0.25}, {3.0, 0.5, -1.0}};
  tape.backprop(sum(mul(st, tape.constant(w))));
  CHECK(tape.grad(s) == w);
  const auto gh = tape.grad(h);
  for (double v : gh.data()) CHECK(v == 0.0);

  Tape bad;
  CHECK_THROWS_AS(straight_through(bad.constant(Matrix(2, 3)), bad.constant(Matrix(3, 2))),
                  std::invalid_argument);
}

TEST_CASE("backprop: constant and linear losses, unreachable leaves") {
  Tape tape;
  auto x = tape.leaf(Matrix{{1.0, 2.0, 3.0}});
  auto unused = tape.leaf(Matrix{{4.0}});
  tape.backprop(tape.scalar_constant(5.0) + scalar_scale(sum(x), 0.0));
  for (double v : tape.grad_vector(x)) CHECK(v == 0.0);

  const Matrix w{{0.5, -1.0, 2.0}};
  tape.backprop(sum(mul(x, tape.constant(w))));
  CHECK(tape.grad(x) == w);
  CHECK(tape.grad(unused)(0, 0) == 0.0);
}

TEST_CASE("errors name the primitive") {
  Tape tape;
  auto a = tape.leaf(Matrix(2, 3)), b = tape.leaf(Matrix(3, 3));
  CHECK_THROWS_AS(tape.backprop(a), std::invalid_argument);
  auto message = [](auto&& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message([&] { add(a, b); }).find("add") != std::string::npos);
  CHECK(message([&] { mul(a, b); }).find("mul") != std::string::npos);
  CHECK(message([&] { matmul(b, a); }).find("matmul") != std::string::npos);
  CHECK(message([&] { gather_row(a, 5); }).find("gather_row") != std::string::npos);
  CHECK(message([&] { reshape(a, 4, 2); }).find("reshape") != std::string::npos);
  CHECK(message([&] { softmax_with_temperature(a, 0.0); }).find("softmax") != std::string::npos);
}

TEST_CASE("recording is deterministic") {
  auto run = [] {
    Rng rng(3);
    Tape tape;
    auto x = tape.leaf(random_matrix(rng, 4, 4));
    tape.backprop(sum(log_softmax_row(matmul(ad::tanh(x), x))));
    return tape.grad_vector(x);
  };
  CHECK(run() == run());
}
