#include "doctest.h"

#include <cmath>

#include "babymamba/grad_check.hpp"
#include "babymamba/ssm_core.hpp"
#include "test_util.hpp"

using namespace bm;
using namespace bm::ssm;
using bm::testing::random_tensor;

namespace {

struct ScanCase {
  Tensor a_bar, bx, C, D, x;
};

ScanCase random_scan_case(Rng& rng, std::size_t L, std::size_t E, std::size_t N) {
  ScanCase c;
  c.a_bar = random_tensor({L, E, N}, rng, 0.0, 1.0);
  c.bx = random_tensor({L, E, N}, rng);
  c.C = random_tensor({L, N}, rng);
  c.D = random_tensor({E}, rng);
  c.x = random_tensor({L, E}, rng);
  return c;
}

}  // namespace

TEST_CASE("discretize_zoh closed form") {
  const auto [a_bar, b_bar] = discretize_zoh(0.1, -1.0, 2.0);
  CHECK(a_bar == doctest::Approx(0.904837).epsilon(1e-6));
  CHECK(b_bar == doctest::Approx(0.190325).epsilon(1e-6));
  CHECK(a_bar == doctest::Approx(std::exp(-0.1)).epsilon(1e-15));
  CHECK(b_bar == doctest::Approx(2.0 * (1.0 - std::exp(-0.1))).epsilon(1e-14));
}

TEST_CASE("discretize_zoh limits and errors") {
  const auto [a0, b0] = discretize_zoh(1e-12, -3.0, 5.0);
  CHECK(a0 == doctest::Approx(1.0).epsilon(1e-11));
  CHECK(std::abs(b0) < 1e-10);
  for (double delta : {1e-3, 0.1, 2.0}) {
    CHECK(discretize_zoh(delta, -2.5, 0.0).second == 0.0);
  }
  CHECK_THROWS_AS(discretize_zoh(0.0, -1.0, 1.0), ContractError);
  CHECK_THROWS_AS(discretize_zoh(-0.1, -1.0, 1.0), ContractError);
}

TEST_CASE("series and exact ZOH branches agree at the switch") {
  const double a = -1.0;
  for (double x : {0.9e-4, 1.1e-4}) {
    const auto series = zoh_factor(x, a, 1.0);  // forced series
    const auto exact = zoh_factor(x, a, 0.0);   // forced exact
    CHECK(series.drive == doctest::Approx(exact.drive).epsilon(1e-11));
    CHECK(series.d_delta == doctest::Approx(exact.d_delta).epsilon(1e-7));
    CHECK(series.d_a == doctest::Approx(exact.d_a).epsilon(1e-3));
  }
}

TEST_CASE("increasing the step forgets more") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double a = -rng.uniform(0.1, 16.0);
    const double d = rng.uniform(1e-4, 1.0);
    const auto lo = discretize_zoh(d, a, 1.0).first;
    const auto hi = discretize_zoh(d * 1.5, a, 1.0).first;
    CHECK(hi < lo);
    CHECK(lo > 0.0);
    CHECK(lo < 1.0);
  }
}

TEST_CASE("scan_sequential hand recursion") {
  const std::size_t L = 3;
  Tensor a(Shape{L, 1, 1}, 0.5), bx(Shape{L, 1, 1}, 1.0), C(Shape{L, 1}, 1.0), D(Shape{1}, 0.0), x(Shape{L, 1}, 0.0);
  const auto y = scan_sequential(a, bx, C, D, x);
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] == doctest::Approx(1.5));
  CHECK(y[2] == doctest::Approx(1.75));

  // Memoryless when a_bar = 0.
  Rng rng(4);
  auto c = random_scan_case(rng, 6, 2, 3);
  c.a_bar.fill(0.0);
  c.D.fill(0.0);
  c.C.fill(1.0);
  const auto y0 = scan_sequential(c.a_bar, c.bx, c.C, c.D, c.x);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t e = 0; e < 2; ++e) {
      double expect = 0.0;
      for (std::size_t n = 0; n < 3; ++n) expect += c.bx.at(t, e, n);
      CHECK(y0.at(t, e) == doctest::Approx(expect));
    }
}

TEST_CASE("zero input keeps the state at zero") {
  Tensor delta = random_tensor({8, 3}, 2, 0.01, 0.5);
  Tensor A = random_tensor({3, 4}, 3, -5.0, -0.1);
  Tensor Bm = random_tensor({8, 4}, 4);
  Tensor x(Shape{8, 3});
  const auto [a_bar, bx] = discretize_sequence(delta, A, Bm, x);
  const auto y = scan_sequential(a_bar, bx, random_tensor({8, 4}, 5), random_tensor({3}, 6), x);
  CHECK(y.flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scan_parallel matches the sequential oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t L = 1 + rng.below(70), E = 1 + rng.below(6), N = 1 + rng.below(5);
    const auto c = random_scan_case(rng, L, E, N);
    const auto ys = scan_sequential(c.a_bar, c.bx, c.C, c.D, c.x);
    const auto yp = scan_parallel(c.a_bar, c.bx, c.C, c.D, c.x);
    CHECK(max_abs_diff(ys, yp) < 1e-5);
    if (L == 1) CHECK(ys == yp);
  }
}

TEST_CASE("prefix scan with unit decay is a prefix sum") {
  std::vector<ScanElement<double>> elems(13, {1.0, 1.0});
  const auto out = prefix_scan(elems);
  for (std::size_t t = 0; t < out.size(); ++t) CHECK(out[t].b == static_cast<double>(t + 1));
}

TEST_CASE("combine is associative") {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const ScanElement<double> e1{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const ScanElement<double> e2{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const ScanElement<double> e3{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto left = combine(combine(e1, e2), e3);
    const auto right = combine(e1, combine(e2, e3));
    CHECK(std::abs(left.a - right.a) < 1e-12);
    CHECK(std::abs(left.b - right.b) < 1e-12);
  }
}

TEST_CASE("state stays inside the geometric-series bound") {
  auto p = SsmKernelParams::init(6, 4, 1, 42, "k.");
  Rng rng(9);
  Tensor delta = random_tensor({50, 6}, rng, 0.001, 1.0);
  Tensor A(Shape{6, 4});
  for (std::size_t i = 0; i < A.numel(); ++i) A[i] = -std::exp(p.A_log.value()[i]);
  const auto [a_bar, bx] = discretize_sequence(delta, A, random_tensor({50, 4}, rng), random_tensor({50, 6}, rng));
  double max_a = 0.0, max_b = 0.0;
  for (double v : a_bar.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
    max_a = std::max(max_a, v);
  }
  for (double v : bx.data()) max_b = std::max(max_b, std::abs(v));
  // Read out each state on its own by using C = e_n.
  const double bound = max_b / (1.0 - max_a);
  for (std::size_t n = 0; n < 4; ++n) {
    Tensor C(Shape{50, 4});
    for (std::size_t t = 0; t < 50; ++t) C.at(t, n) = 1.0;
    const auto y = scan_sequential(a_bar, bx, C, Tensor(Shape{6}), Tensor(Shape{50, 6}));
    CHECK(y.flat().cwiseAbs().maxCoeff() <= bound + 1e-12);
  }
}

TEST_CASE("kernel initialization") {
  const auto p = SsmKernelParams::init(8, 5, 2, 1, "k.");
  for (std::size_t e = 0; e < 8; ++e)
    for (std::size_t n = 0; n < 5; ++n) CHECK(-std::exp(p.A_log.value().at(e, n)) == doctest::Approx(-(double(n) + 1)));
  for (double b : p.dt_bias.value().data()) {
    const double dt = std::log1p(std::exp(b));
    CHECK(dt >= 1e-3 * (1 - 1e-9));
    CHECK(dt <= 1e-1 * (1 + 1e-9));
  }
  CHECK_THROWS_AS(SsmKernelParams::init(8, 5, 0, 1, "k."), ConfigError);
}

TEST_CASE("selective_params examples") {
  auto p = SsmKernelParams::init(6, 3, 1, 2, "k.");
  p.dt_bias.mutable_value().fill(0.0);
  const auto x0 = Var::constant(Tensor(Shape{1, 4, 6}));
  const auto s = selective_params(x0, p);
  for (double d : s.delta.value().data()) CHECK(d == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(s.B.value().flat().cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.C.value().flat().cwiseAbs().maxCoeff() == 0.0);

  const auto x = Var::constant(random_tensor({1, 4, 6}, 3));
  const auto B1 = selective_params(x, p).B.value();
  p.W_B.mutable_value().flat() *= 2.0;
  const auto B2 = selective_params(x, p).B.value();
  for (std::size_t i = 0; i < B1.numel(); ++i) CHECK(B2[i] == doctest::Approx(2.0 * B1[i]));
  const auto scaled = selective_params(x, p);
  for (double d : scaled.delta.value().data()) CHECK(d > 0.0);
}

TEST_CASE("selective_scan agrees with discretize + sequential scan") {
  Rng rng(10);
  const std::size_t NB = 3, L = 9, E = 4, N = 3;
  const auto u = random_tensor({NB, L, E}, rng);
  const auto delta = random_tensor({NB, L, E}, rng, 0.01, 0.8);
  const auto A_log = random_tensor({E, N}, rng, -1.0, 2.0);
  const auto Bm = random_tensor({NB, L, N}, rng);
  const auto Cm = random_tensor({NB, L, N}, rng);
  const auto D = random_tensor({E}, rng);
  const auto y = selective_scan(Var::constant(u), Var::constant(delta), Var::constant(A_log), Var::constant(Bm),
                                Var::constant(Cm), Var::constant(D))
                     .value();
  Tensor A(Shape{E, N});
  for (std::size_t i = 0; i < A.numel(); ++i) A[i] = -std::exp(A_log[i]);
  for (std::size_t b = 0; b < NB; ++b) {
    auto slice = [&](const Tensor& t, std::size_t cols) {
      Tensor s(Shape{L, cols});
      std::copy_n(t.data().begin() + b * L * cols, L * cols, s.data().begin());
      return s;
    };
    const auto ub = slice(u, E), db = slice(delta, E), Bb = slice(Bm, N), Cb = slice(Cm, N);
    const auto [a_bar, bx] = discretize_sequence(db, A, Bb, ub);
    const auto ref = scan_sequential(a_bar, bx, Cb, D, ub);
    const auto par = scan_parallel(a_bar, bx, Cb, D, ub);
    for (std::size_t i = 0; i < L * E; ++i) {
      CHECK(y[b * L * E + i] == doctest::Approx(ref[i]).epsilon(1e-13));
      CHECK(std::abs(par[i] - ref[i]) < 1e-12);
    }
  }
}

TEST_CASE("selective_scan gradients match finite differences") {
  Rng rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t NB = 1 + rng.below(2), L = 1 + rng.below(5), E = 1 + rng.below(3), N = 1 + rng.below(3);
    Var u = Var::parameter(random_tensor({NB, L, E}, rng));
    Var delta = Var::parameter(random_tensor({NB, L, E}, rng, 0.05, 0.9));
    Var A_log = Var::parameter(random_tensor({E, N}, rng, -0.5, 1.5));
    Var Bm = Var::parameter(random_tensor({NB, L, N}, rng));
    Var Cm = Var::parameter(random_tensor({NB, L, N}, rng));
    Var D = Var::parameter(random_tensor({E}, rng));
    const auto w = bm::testing::projection_weights({NB, L, E}, rng.next_u64());
    Var params[] = {u, delta, A_log, Bm, Cm, D};
    const double err = grad_check([&] { return sum(mul(selective_scan(u, delta, A_log, Bm, Cm, D), Var::constant(w))); },
                                  params, 1e-6);
    CHECK(err < 1e-5);
  }
}
