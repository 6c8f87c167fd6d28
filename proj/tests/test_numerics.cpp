#include <doctest.h>

#include <cmath>
#include <limits>

#include "bct/numerics.hpp"
#include "oracles.hpp"

using bct::Matrix;
using bct::Rng;

TEST_CASE("matmul: identity and hand-checked product") {
  const Matrix<double> a{{1.5, -2.0}, {0.25, 7.0}};
  CHECK(bct::matmul(Matrix<double>::identity(2), a) == a);

  const Matrix<double> lhs{{1, 2}, {3, 4}};
  const Matrix<double> rhs{{5}, {6}};
  CHECK(bct::matmul(lhs, rhs) == Matrix<double>{{17}, {39}});
}

TEST_CASE("matmul: random 7x5 * 5x3 matches triple loop") {
  Rng rng(1);
  const auto a = bct::gaussian_matrix<double>(7, 5, 1.0, rng);
  const auto b = bct::gaussian_matrix<double>(5, 3, 1.0, rng);
  CHECK(oracle::max_abs_diff(bct::matmul(a, b), oracle::matmul(oracle::from(a), oracle::from(b))) <
        1e-12);
  CHECK(oracle::max_abs_diff(bct::matmul_bt(a, bct::transpose(b)),
                             oracle::matmul(oracle::from(a), oracle::from(b))) < 1e-12);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  const Matrix<double> a(2, 3), b(4, 2);
  try {
    (void)bct::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const bct::DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
}

TEST_CASE("matmul: associativity on random triples") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + rng.uniform_int(6), k = 1 + rng.uniform_int(6), m = 1 + rng.uniform_int(6),
               p = 1 + rng.uniform_int(6);
    const auto a = bct::gaussian_matrix<double>(n, k, 1.0, rng);
    const auto b = bct::gaussian_matrix<double>(k, m, 1.0, rng);
    const auto c = bct::gaussian_matrix<double>(m, p, 1.0, rng);
    const auto left = bct::matmul(bct::matmul(a, b), c);
    const auto right = bct::matmul(a, bct::matmul(b, c));
    CHECK(bct::max_rel_diff(left, right) < 1e-9);
  }
}

TEST_CASE("outer: basis vector, annihilation, double-loop oracle") {
  const Matrix<double> u{{1, 0}}, v{{3, 4}};
  CHECK(bct::outer(u, v) == Matrix<double>{{3, 4}, {0, 0}});
  CHECK(bct::outer(Matrix<double>(1, 3), v) == Matrix<double>(3, 2));

  Rng rng(3);
  const auto a = bct::gaussian_matrix<double>(1, 4, 1.0, rng);
  const auto b = bct::gaussian_matrix<double>(1, 6, 1.0, rng);
  CHECK(oracle::max_abs_diff(bct::outer(a, b), oracle::outer(oracle::from(a)[0], oracle::from(b)[0])) ==
        0.0);
  // outer(u, v) == u^T v as a matrix product, exactly.
  CHECK(bct::outer(a, b) == bct::matmul(bct::transpose(a), b));
}

TEST_CASE("outer: non-vector input is a dimension error") {
  CHECK_THROWS_AS(bct::outer(Matrix<double>(2, 2), Matrix<double>(1, 2)), bct::DimensionError);
  CHECK_THROWS_AS(bct::outer(Matrix<double>(1, 2), Matrix<double>(3, 1)), bct::DimensionError);
}

TEST_CASE("softmax_row: uniform and ratio cases") {
  const auto uniform = bct::softmax_row(Matrix<double>(1, 4));
  for (double p : uniform.data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  for (double c : {-1000.0, -3.0, 0.0, 2.5, 700.0}) {
    const auto p = bct::softmax_row(Matrix<double>{{c, c + std::log(2.0)}});
    CHECK(p[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax_row: random 8-vector matches naive oracle") {
  Rng rng(4);
  const auto s = bct::gaussian_matrix<double>(1, 8, 2.0, rng);
  const auto want = oracle::softmax(oracle::from(s)[0]);
  CHECK(oracle::max_abs_diff(bct::softmax_row(s), oracle::Mat{want}) < 1e-12);
}

TEST_CASE("softmax_row: probability vector, shift invariance, overflow guard") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = 1 + rng.uniform_int(40);
    const auto s = bct::gaussian_matrix<double>(1, m, 5.0, rng);
    const auto p = bct::softmax_row(s);
    double sum = 0.0;
    for (double x : p.data()) {
      CHECK(x > 0.0);
      CHECK(x <= 1.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);

    auto shifted = s;
    const double c = 100.0 * (rng.uniform() - 0.5);
    for (auto& x : shifted.data()) x += c;
    CHECK(bct::max_abs_diff(bct::softmax_row(shifted), p) < 1e-12);
  }
  const auto big = bct::softmax_row(Matrix<float>{{1e4f, 1e4f + 1.0f, -1e4f}});
  CHECK(bct::all_finite(big));
}

TEST_CASE("softmax_row: NaN input is a numeric error") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(bct::softmax_row(Matrix<double>{{0.0, nan}}), bct::NumericError);
}

TEST_CASE("Rng: deterministic MT19937-64 stream and sane normals") {
  // Reference value from the C++ standard: the 10000th output of a
  // default-seeded mt19937_64.
  Rng std_seed(5489);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = std_seed.next_u64();
  CHECK(v == 9981545732273789042ULL);

  Rng a(77), b(77);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());

  Rng rng(6);
  const int n = 20000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 4.0 / std::sqrt(double(n)));
  CHECK(std::abs(sq / n - 1.0) < 0.05);

  for (int i = 0; i < 1000; ++i) CHECK(rng.uniform_int(7) < 7);
}
