#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

// Small dense routines on row-major n x n matrices stored in std::vector<double>.
namespace showcase::linalg {

struct LuResult {
  std::vector<double> lu;           // packed L (unit diagonal) and U
  std::vector<std::size_t> pivots;  // row permutation
  double log_abs_det = 0.0;
  int sign = 1;
  bool nonsingular = true;
};

inline LuResult lu_decompose(std::vector<double> m, std::size_t n) {
  LuResult r;
  r.pivots.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.pivots[i] = i;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    double best = std::abs(m[k * n + k]);
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(m[i * n + k]) > best) {
        best = std::abs(m[i * n + k]);
        p = i;
      }
    }
    if (best == 0.0) {
      r.nonsingular = false;
      r.lu = std::move(m);
      return r;
    }
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m[k * n + j], m[p * n + j]);
      std::swap(r.pivots[k], r.pivots[p]);
      r.sign = -r.sign;
    }
    const double pivot = m[k * n + k];
    if (pivot < 0) r.sign = -r.sign;
    r.log_abs_det += std::log(std::abs(pivot));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = m[i * n + k] / pivot;
      m[i * n + k] = f;
      for (std::size_t j = k + 1; j < n; ++j) m[i * n + j] -= f * m[k * n + j];
    }
  }
  r.lu = std::move(m);
  return r;
}

/// Inverse from an LU factorization (row-major result).
inline std::vector<double> lu_inverse(const LuResult& f, std::size_t n) {
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    // Solve A x = e_c, where P A = L U.
    for (std::size_t i = 0; i < n; ++i) col[i] = f.pivots[i] == c ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) col[i] -= f.lu[i * n + j] * col[j];
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t j = i + 1; j < n; ++j) col[i] -= f.lu[i * n + j] * col[j];
      col[i] /= f.lu[i * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) inv[i * n + c] = col[i];
  }
  return inv;
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, or nullopt
/// when some pivot is not strictly above `min_pivot`.
inline std::optional<std::vector<double>> cholesky(const std::vector<double>& a, std::size_t n, double min_pivot = 0.0) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > min_pivot)) return std::nullopt;
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

/// log det of a symmetric positive-definite matrix, nullopt if not PD.
inline std::optional<double> spd_logdet(const std::vector<double>& a, std::size_t n) {
  if (n == 0) return 0.0;
  auto l = cholesky(a, n);
  if (!l) return std::nullopt;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += 2.0 * std::log((*l)[i * n + i]);
  return s;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
  std::sort(ev.begin(), ev.end());
  return ev;
}

inline double min_eigenvalue(const std::vector<double>& a, std::size_t n) {
  if (n == 0) return 0.0;
  return symmetric_eigenvalues(a, n).front();
}

}  // namespace showcase::linalg
