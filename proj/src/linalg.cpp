#include "mpsae/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "mpsae/errors.hpp"

namespace mpsae {

Matrix orthonormal_basis(RngStream& rng, std::size_t m, std::size_t n) {
  if (n > m) throw DimensionError("orthonormal_basis: n must not exceed m");
  Matrix a(m, n);
  for (auto& v : a.data()) v = rng.normal();

  // Householder QR in place; reflectors stored column by column.
  std::vector<Vector> reflectors;
  reflectors.reserve(n);
  Vector rdiag(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    Vector v(m - k);
    for (std::size_t i = k; i < m; ++i) v[i - k] = a(i, k);
    const double alpha = norm2(v);
    const double sign = v[0] >= 0.0 ? 1.0 : -1.0;
    v[0] += sign * alpha;
    const double vnorm = norm2(v);
    if (vnorm > 0.0)
      for (auto& e : v) e /= vnorm;
    for (std::size_t j = k; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < m; ++i) s += v[i - k] * a(i, j);
      for (std::size_t i = k; i < m; ++i) a(i, j) -= 2.0 * v[i - k] * s;
    }
    rdiag[k] = a(k, k);
    reflectors.push_back(std::move(v));
  }

  // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t kk = n; kk-- > 0;) {
    const Vector& v = reflectors[kk];
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = kk; i < m; ++i) s += v[i - kk] * q(i, j);
      for (std::size_t i = kk; i < m; ++i) q(i, j) -= 2.0 * v[i - kk] * s;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (rdiag[j] < 0.0)
      for (std::size_t i = 0; i < m; ++i) q(i, j) = -q(i, j);
  }
  return q;
}

Vector sym_eigvals(const Matrix& input, const EigOptions& opts) {
  if (input.rows() != input.cols()) throw ShapeError("sym_eigvals: matrix is not square");
  const std::size_t n = input.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > opts.symmetry_tol)
        throw ShapeError("sym_eigvals: matrix is not symmetric within tolerance");

  Matrix a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));

  double total = 0.0;
  for (double v : a.data()) total += v * v;
  const double stop = total * 1e-32;

  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off <= stop) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
      }
    }
  }

  Vector eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  if (opts.psd) {
    for (double& v : eig) {
      if (v < -opts.psd_tol) throw DomainError("sym_eigvals: negative eigenvalue in PSD input");
      if (v < 0.0) v = 0.0;
    }
  }
  return eig;
}

Vector cholesky_solve(const Matrix& a, std::span<const double> b, double rel_tol) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw ShapeError("cholesky_solve: shape mismatch");
  double diag_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag_max = std::max(diag_max, std::abs(a(i, i)));
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > rel_tol * diag_max)) throw SingularError("cholesky_solve: matrix is singular");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  Vector x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

}  // namespace mpsae
