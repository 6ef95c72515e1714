#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "diffdt/spdgeo.hpp"

using namespace diffdt;
using namespace diffdt::spdgeo;

namespace {

Eigen::MatrixXd to_eigen(const Mat& m) {
  Eigen::MatrixXd e(m.n, m.n);
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j) e(i, j) = m.at(i, j);
  return e;
}

}  // namespace

TEST_CASE("cholesky of [[4,2],[2,5]] is [[2,0],[1,2]]") {
  Mat m(2);
  m.at(0, 0) = 4;
  m.at(0, 1) = 2;
  m.at(1, 0) = 2;
  m.at(1, 1) = 5;
  auto l = cholesky(m);
  CHECK(l.at(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(l.at(0, 1) == 0.0);
  CHECK(l.at(1, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(l.at(1, 1) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("indefinite matrix rejected naming the pivot") {
  Mat m(3);
  m.at(0, 0) = 1;
  m.at(1, 1) = 1;
  m.at(2, 2) = -1;
  CHECK_THROWS_WITH_AS(cholesky(m), doctest::Contains("index 2"), NumericError);
}

TEST_CASE("round-trip fuzz against an independent factorization") {
  Rng rng(123);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 2 + static_cast<int>(rng.integer(7));
    auto m = random_spd(n, rng);
    auto l = cholesky(m);
    // reconstruct(cholesky(m)) == m
    CHECK(max_abs_diff(reconstruct(l), m) < 1e-9);
    // strict upper triangle is exactly zero, diagonal positive
    for (int i = 0; i < n; ++i) {
      CHECK(l.at(i, i) > 0.0);
      for (int j = i + 1; j < n; ++j) CHECK(l.at(i, j) == 0.0);
    }
    // uniqueness: match Eigen's LLT factor entrywise
    Eigen::MatrixXd ref = to_eigen(m).llt().matrixL();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j)
        CHECK(l.at(i, j) == doctest::Approx(ref(i, j)).epsilon(1e-8));
  }
}

TEST_CASE("softplus diagonal yields a valid factor for any raw input") {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 2 + static_cast<int>(rng.integer(6));
    Mat raw(n);
    for (auto& v : raw.a) v = 1.5 * rng.gauss();
    auto l = softplus_diagonal(raw);
    for (int i = 0; i < n; ++i) {
      CHECK(l.at(i, i) > 0.0);
      for (int j = i + 1; j < n; ++j) CHECK(l.at(i, j) == 0.0);
      for (int j = 0; j < i; ++j) CHECK(l.at(i, j) == raw.at(i, j));
    }
    CHECK(is_spd(reconstruct(l)));
  }
}

TEST_CASE("fourier split: linearity, exact partition, symmetry") {
  Rng rng(77);
  const int n = 16;
  for (int rep = 0; rep < 20; ++rep) {
    auto m = random_spd(n, rng);
    auto s = fourier_split(m, 5);
    // exact partition
    CHECK(max_abs_diff(mat_add(s.low, s.high), m) < 1e-12);
    CHECK(is_symmetric(s.low, 1e-9));
    CHECK(is_symmetric(s.high, 1e-9));
    // linearity: split(a + b).low == split(a).low + split(b).low
    auto m2 = random_spd(n, rng);
    auto sum = fourier_split(mat_add(m, m2), 5);
    CHECK(max_abs_diff(sum.low, mat_add(s.low, fourier_split(m2, 5).low)) < 1e-8);
  }
}

TEST_CASE("fourier split threshold edge cases") {
  Rng rng(9);
  auto m = random_spd(8, rng);
  CHECK_THROWS_AS(fourier_split(m, 0), RangeError);
  CHECK_THROWS_AS(fourier_split(m, 8), RangeError);
  // threshold 1 keeps only the DC coefficient: low is a constant matrix
  auto s = fourier_split(m, 1);
  double mean = 0.0;
  for (double v : m.a) mean += v;
  mean /= static_cast<double>(m.a.size());
  for (double v : s.low.a) CHECK(v == doctest::Approx(mean).epsilon(1e-9));
}

TEST_CASE("jitter recovery on a nearly singular matrix") {
  Rng rng(4);
  const int n = 6;
  // rank-deficient: outer product of one vector
  Mat m(n);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.gauss();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m.at(i, j) = v[i] * v[j];
  long events = 0;
  auto fixed = ensure_spd_with_jitter(m, &events);
  CHECK(events == 1);
  CHECK(is_spd(fixed));
  CHECK(max_abs_diff(fixed, m) < 1e-3);  // jitter stays tiny
}

TEST_CASE("jitter is a no-op on an SPD input") {
  Rng rng(8);
  auto m = random_spd(5, rng);
  long events = 0;
  auto out = ensure_spd_with_jitter(m, &events);
  CHECK(events == 0);
  CHECK(max_abs_diff(out, m) == 0.0);
}

TEST_CASE("jacobi eigenvalues match Eigen on random symmetric matrices") {
  Rng rng(31);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 2 + static_cast<int>(rng.integer(9));
    Mat m(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) m.at(i, j) = m.at(j, i) = rng.gauss();
    std::vector<double> w;
    Mat vec;
    jacobi_eigen(m, w, vec);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(m));
    std::vector<double> sorted = w;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < n; ++i)
      CHECK(sorted[i] == doctest::Approx(es.eigenvalues()(i)).epsilon(1e-8).scale(1.0));
    // reconstruction V diag(w) V^T == m
    Mat rec(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int k = 0; k < n; ++k) s += vec.at(i, k) * w[k] * vec.at(j, k);
        rec.at(i, j) = s;
      }
    CHECK(max_abs_diff(rec, m) < 1e-8);
  }
}

TEST_CASE("lambda_min_bisect matches the eigensolver") {
  Rng rng(42);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 2 + static_cast<int>(rng.integer(8));
    Mat m(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) m.at(i, j) = m.at(j, i) = rng.gauss();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(m));
    const double ref = es.eigenvalues()(0);
    CHECK(lambda_min_bisect(m) == doctest::Approx(ref).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("eigendecomposition baseline step stays on the SPD cone") {
  Rng rng(55);
  auto m = random_spd(10, rng);
  for (int step = 0; step < 20; ++step) {
    m = eig_baseline_step(m, 0.1, rng);
    CHECK(is_spd(m));
  }
}

TEST_CASE("is_spd rejects asymmetric and indefinite inputs") {
  Mat a(2);
  a.at(0, 0) = 1;
  a.at(0, 1) = 2;
  a.at(1, 0) = 0;
  a.at(1, 1) = 1;
  CHECK_FALSE(is_spd(a));
  Mat b(2);
  b.at(0, 0) = 1;
  b.at(1, 1) = -1;
  CHECK_FALSE(is_spd(b));
  Rng rng(2);
  CHECK(is_spd(random_spd(4, rng)));
}
