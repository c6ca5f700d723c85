#pragma once

#include <cstddef>
#include <span>

#include "mpsae/matrix.hpp"
#include "mpsae/rng.hpp"

namespace mpsae {

// m×n matrix with orthonormal columns: Householder QR of a Gaussian draw,
// with the sign of each column fixed so R has a positive diagonal.
Matrix orthonormal_basis(RngStream& rng, std::size_t m, std::size_t n);

struct EigOptions {
  // Symmetry tolerance (absolute, per entry).
  double symmetry_tol = 1e-8;
  // Treat the input as positive semidefinite: eigenvalues in [-psd_tol, 0)
  // clamp to 0 and anything below -psd_tol is an error.
  bool psd = false;
  double psd_tol = 1e-8;
  int max_sweeps = 100;
};

// All eigenvalues of a symmetric matrix, descending, by cyclic Jacobi.
Vector sym_eigvals(const Matrix& a, const EigOptions& opts = {});

// Solves the SPD system a x = b by Cholesky. Throws SingularError when a
// pivot falls below rel_tol times the largest diagonal entry.
Vector cholesky_solve(const Matrix& a, std::span<const double> b, double rel_tol = 1e-12);

}  // namespace mpsae
