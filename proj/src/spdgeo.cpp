#include "diffdt/spdgeo.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

namespace diffdt::spdgeo {

Mat identity(int n) {
  Mat m(n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Mat mat_add(const Mat& a, const Mat& b) {
  if (a.n != b.n) throw DimensionError("mat_add: dimension mismatch");
  Mat out(a.n);
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] = a.a[i] + b.a[i];
  return out;
}

Mat mat_sub(const Mat& a, const Mat& b) {
  if (a.n != b.n) throw DimensionError("mat_sub: dimension mismatch");
  Mat out(a.n);
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] = a.a[i] - b.a[i];
  return out;
}

Mat mat_scale(const Mat& a, double s) {
  Mat out(a.n);
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] = a.a[i] * s;
  return out;
}

double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.n != b.n) throw DimensionError("max_abs_diff: dimension mismatch");
  double mx = 0.0;
  for (std::size_t i = 0; i < a.a.size(); ++i)
    mx = std::max(mx, std::fabs(a.a[i] - b.a[i]));
  return mx;
}

bool is_symmetric(const Mat& m, double tol) {
  for (int i = 0; i < m.n; ++i)
    for (int j = i + 1; j < m.n; ++j)
      if (std::fabs(m.at(i, j) - m.at(j, i)) > tol) return false;
  return true;
}

CholFactor cholesky(const SpdMatrix& m) {
  const int n = m.n;
  CholFactor l(n);
  // Work on the lower triangle of a copy; right-looking update.
  Mat w = m;
  for (int k = 0; k < n; ++k) {
    const double pivot = w.at(k, k);
    if (!(pivot > 0.0) || !std::isfinite(pivot)) {
      throw NumericError("cholesky: non-positive pivot at index " +
                         std::to_string(k));
    }
    const double d = std::sqrt(pivot);
    l.at(k, k) = d;
    for (int i = k + 1; i < n; ++i) l.at(i, k) = w.at(i, k) / d;
    for (int j = k + 1; j < n; ++j) {
      const double ljk = l.at(j, k);
      for (int i = j; i < n; ++i) w.at(i, j) -= l.at(i, k) * ljk;
    }
  }
  return l;
}

SpdMatrix reconstruct(const CholFactor& l) {
  const int n = l.n;
  SpdMatrix m(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (int k = 0; k <= j; ++k) acc += l.at(i, k) * l.at(j, k);
      m.at(i, j) = acc;
      m.at(j, i) = acc;
    }
  return m;
}

CholFactor softplus_diagonal(const Mat& raw) {
  const int n = raw.n;
  CholFactor l(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) l.at(i, j) = raw.at(i, j);
    const double x = raw.at(i, i);
    l.at(i, i) = x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
  }
  return l;
}

bool is_spd(const Mat& m, double tol) {
  if (!is_symmetric(m, tol)) return false;
  try {
    cholesky(m);
  } catch (const NumericError&) {
    return false;
  }
  return true;
}

namespace {

using cd = std::complex<double>;

// 1-D DFT along rows (sign -1) or inverse (sign +1, scaled by 1/n) applied to
// each row of an n x n complex array.
void dft_rows(std::vector<cd>& data, int n, int sign) {
  std::vector<cd> row(n);
  std::vector<cd> twiddle(n);
  for (int k = 0; k < n; ++k) {
    const double ang = sign * 2.0 * 3.14159265358979323846 * k / n;
    twiddle[k] = cd(std::cos(ang), std::sin(ang));
  }
  for (int r = 0; r < n; ++r) {
    cd* p = &data[static_cast<std::size_t>(r) * n];
    for (int k = 0; k < n; ++k) {
      cd acc(0.0, 0.0);
      for (int j = 0; j < n; ++j) acc += p[j] * twiddle[static_cast<int>((static_cast<long long>(j) * k) % n)];
      row[k] = acc;
    }
    const double scl = sign > 0 ? 1.0 / n : 1.0;
    for (int k = 0; k < n; ++k) p[k] = row[k] * scl;
  }
}

void transpose_inplace(std::vector<cd>& data, int n) {
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      std::swap(data[static_cast<std::size_t>(i) * n + j],
                data[static_cast<std::size_t>(j) * n + i]);
}

}  // namespace

FrequencySplit fourier_split(const Mat& m, int threshold) {
  const int n = m.n;
  if (threshold <= 0 || threshold >= n)
    throw RangeError("fourier_split: threshold " + std::to_string(threshold) +
                     " out of range (0, " + std::to_string(n) + ")");
  std::vector<cd> spec(m.a.begin(), m.a.end());
  dft_rows(spec, n, -1);
  transpose_inplace(spec, n);
  dft_rows(spec, n, -1);
  transpose_inplace(spec, n);
  // Centered frequency of index k: k <= n/2 ? k : k - n.
  auto centered = [n](int k) { return k <= n / 2 ? k : k - n; };
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) {
      const int cu = std::abs(centered(u));
      const int cv = std::abs(centered(v));
      if (std::max(cu, cv) >= threshold)
        spec[static_cast<std::size_t>(u) * n + v] = cd(0.0, 0.0);
    }
  dft_rows(spec, n, +1);
  transpose_inplace(spec, n);
  dft_rows(spec, n, +1);
  transpose_inplace(spec, n);
  FrequencySplit out;
  out.threshold = threshold;
  out.low = Mat(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      // Real part, symmetrized; imaginary residue is rounding noise.
      const double lij = spec[static_cast<std::size_t>(i) * n + j].real();
      const double lji = spec[static_cast<std::size_t>(j) * n + i].real();
      out.low.at(i, j) = 0.5 * (lij + lji);
    }
  out.high = mat_sub(m, out.low);  // exact complement
  return out;
}

SpdMatrix ensure_spd_with_jitter(const Mat& m, long* jitter_events) {
  constexpr double kTol = 1e-10;
  if (is_spd(m, kTol)) return m;
  double eps = 1e-10;
  Mat jittered = m;
  // Symmetrize once; jitter only fixes the spectrum.
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < i; ++j) {
      const double s = 0.5 * (jittered.at(i, j) + jittered.at(j, i));
      jittered.at(i, j) = s;
      jittered.at(j, i) = s;
    }
  for (int attempt = 0; attempt < 20; ++attempt) {
    for (int i = 0; i < m.n; ++i) jittered.at(i, i) = m.at(i, i) + eps;
    if (is_spd(jittered, kTol)) {
      if (jitter_events) ++*jitter_events;
      return jittered;
    }
    eps *= 2.0;
  }
  throw NumericError("ensure_spd_with_jitter: jitter policy exhausted");
}

void jacobi_eigen(const Mat& m, std::vector<double>& eigenvalues, Mat& eigenvectors) {
  const int n = m.n;
  Mat a = m;
  eigenvectors = identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    if (off < 1e-24) break;
    for (int p = 0; p < n - 1; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = eigenvectors.at(k, p), vkq = eigenvectors.at(k, q);
          eigenvectors.at(k, p) = c * vkp - s * vkq;
          eigenvectors.at(k, q) = s * vkp + c * vkq;
        }
      }
  }
  eigenvalues.assign(n, 0.0);
  for (int i = 0; i < n; ++i) eigenvalues[i] = a.at(i, i);
}

double lambda_min_bisect(const Mat& m, double tol) {
  // Gershgorin bound for the search interval.
  double lo = 0.0, hi = 0.0;
  for (int i = 0; i < m.n; ++i) {
    double radius = 0.0;
    for (int j = 0; j < m.n; ++j)
      if (j != i) radius += std::fabs(m.at(i, j));
    lo = std::min(lo, m.at(i, i) - radius);
    hi = std::max(hi, m.at(i, i) + radius);
  }
  auto pd_with_shift = [&m](double shift) {
    Mat shifted = m;
    for (int i = 0; i < m.n; ++i) shifted.at(i, i) -= shift;
    return is_spd(shifted, 1e-6);
  };
  // lambda_min in [lo, hi]; M - s*I is PD iff s < lambda_min.
  double a = lo - 1.0, b = hi + 1.0;
  if (!pd_with_shift(a)) return a;  // pathological input, report the bound
  while (b - a > tol) {
    const double mid = 0.5 * (a + b);
    if (pd_with_shift(mid))
      a = mid;
    else
      b = mid;
  }
  return 0.5 * (a + b);
}

SpdMatrix eig_baseline_step(const SpdMatrix& m, double noise_scale, Rng& rng) {
  const int n = m.n;
  std::vector<double> w;
  Mat v;
  jacobi_eigen(m, w, v);
  for (double lam : w) {
    if (!(lam > 0.0) || !std::isfinite(lam))
      throw NumericError("eig_baseline_step: non-positive eigenvalue");
  }
  // log(M) in the eigenbasis, symmetric tangent noise, exp back.
  Mat tangent(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += v.at(i, k) * std::log(w[k]) * v.at(j, k);
      tangent.at(i, j) = acc;
    }
  if (noise_scale != 0.0) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) {
        const double z = noise_scale * rng.gauss();
        tangent.at(i, j) += z;
        if (i != j) tangent.at(j, i) += z;
      }
  }
  std::vector<double> wt;
  Mat vt;
  jacobi_eigen(tangent, wt, vt);
  SpdMatrix out(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += vt.at(i, k) * std::exp(wt[k]) * vt.at(j, k);
      out.at(i, j) = acc;
    }
  // Symmetrize to kill rounding skew.
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) {
      const double s = 0.5 * (out.at(i, j) + out.at(j, i));
      out.at(i, j) = s;
      out.at(j, i) = s;
    }
  return out;
}

SpdMatrix random_spd(int n, Rng& rng, double eps) {
  Mat l(n);
  const double scl = 1.0 / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) l.at(i, j) = scl * rng.gauss();
  SpdMatrix m = reconstruct(l);
  for (int i = 0; i < n; ++i) m.at(i, i) += eps;
  return m;
}

}  // namespace diffdt::spdgeo
