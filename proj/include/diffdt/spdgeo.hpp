#pragma once

// SPD-cone kernel: Cholesky factorization and its inverse map, the
// softplus-diagonal reparameterization, the centered-frequency Fourier split,
// and a tangent-space eigendecomposition diffusion step kept as a runtime
// baseline.

#include <vector>

#include "diffdt/common.hpp"

namespace diffdt::spdgeo {

// Dense square matrix, row-major.
struct Mat {
  int n = 0;
  std::vector<double> a;

  Mat() = default;
  explicit Mat(int dim) : n(dim), a(static_cast<std::size_t>(dim) * dim, 0.0) {}
  double& at(int i, int j) { return a[static_cast<std::size_t>(i) * n + j]; }
  double at(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }
};

using SpdMatrix = Mat;
// Lower-triangular, strictly positive diagonal; upper entries exactly 0.
using CholFactor = Mat;

struct FrequencySplit {
  Mat low;
  Mat high;
  int threshold = 0;
};

Mat identity(int n);
Mat mat_add(const Mat& a, const Mat& b);
Mat mat_sub(const Mat& a, const Mat& b);
Mat mat_scale(const Mat& a, double s);
double max_abs_diff(const Mat& a, const Mat& b);
bool is_symmetric(const Mat& m, double tol);

// Unblocked right-looking Cholesky; throws NumericError naming the pivot
// index when the input is not positive definite.
CholFactor cholesky(const SpdMatrix& m);

// L -> L * L^T.
SpdMatrix reconstruct(const CholFactor& l);

// Copies the strict lower triangle and maps the diagonal through softplus.
CholFactor softplus_diagonal(const Mat& raw);

// true iff symmetric within tol and Cholesky succeeds.
bool is_spd(const Mat& m, double tol = 1e-10);

// Centered 2-D DFT split: low keeps coefficients with max(|u|,|v|) < f.
// low + high == m exactly; both components symmetric for symmetric input.
FrequencySplit fourier_split(const Mat& m, int threshold);

// Adds jitter eps*I (eps from 1e-10, doubled at most 20 times) until the
// matrix passes is_spd; increments *jitter_events when jitter was needed.
SpdMatrix ensure_spd_with_jitter(const Mat& m, long* jitter_events = nullptr);

// Cyclic Jacobi eigendecomposition of a symmetric matrix: m = V diag(w) V^T.
void jacobi_eigen(const Mat& m, std::vector<double>& eigenvalues, Mat& eigenvectors);

// Smallest eigenvalue via bisection on Cholesky success (no eigensolver).
double lambda_min_bisect(const Mat& m, double tol = 1e-9);

// One matrix-log / tangent-noise / matrix-exp diffusion step (the
// eigendecomposition baseline used only for runtime comparison).
SpdMatrix eig_baseline_step(const SpdMatrix& m, double noise_scale, Rng& rng);

// Random SPD matrix L*L^T + eps*I with unit-scale entries (test/bench input).
SpdMatrix random_spd(int n, Rng& rng, double eps = 1e-3);

}  // namespace diffdt::spdgeo
