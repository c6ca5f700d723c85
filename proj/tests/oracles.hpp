#pragma once

// Reference computations used by the unit and acceptance suites. They are
// written from the definitions with plain loops (or Eigen) and do not call
// the library routines they check.

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mpsae/dictionary.hpp"
#include "mpsae/encoders.hpp"
#include "mpsae/matrix.hpp"
#include "mpsae/rng.hpp"
#include "mpsae/training.hpp"

namespace oracle {

using mpsae::Dictionary;
using mpsae::EncoderModel;
using mpsae::Matrix;
using mpsae::RngStream;
using mpsae::Vector;

inline Matrix gaussian(RngStream& rng, std::size_t rows, std::size_t cols) {
  Matrix a(rows, cols);
  for (auto& v : a.data()) v = rng.normal();
  return a;
}

inline Vector gaussian_vec(RngStream& rng, std::size_t n) {
  Vector v(n);
  for (auto& e : v) e = rng.normal();
  return v;
}

// p unit atoms in R^m drawn from a normalized Gaussian.
inline Dictionary unit_dictionary(RngStream& rng, std::size_t m, std::size_t p, Vector pre_bias = {}) {
  Matrix rows = gaussian(rng, p, m);
  for (std::size_t j = 0; j < p; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += rows(j, i) * rows(j, i);
    s = std::sqrt(s);
    for (std::size_t i = 0; i < m; ++i) rows(j, i) /= s;
  }
  if (pre_bias.empty()) pre_bias.assign(m, 0.0);
  return Dictionary::from_atom_rows(std::move(rows), std::move(pre_bias), mpsae::NormMode::kExactUnit);
}

inline double loop_dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct MpOracleStep {
  std::size_t j;
  double coefficient;
};

// Greedy loop written straight from the algorithm listing:
//   r <- x - b_pre
//   repeat T times: j <- argmax_j <D_j, r>; c <- <D_j, r>; z_j += c; r <- r - c D_j
// ties go to the first maximizer.
inline std::vector<MpOracleStep> mp_transcription(const std::vector<std::vector<double>>& atoms,
                                                  const std::vector<double>& b_pre, const std::vector<double>& x,
                                                  std::size_t T) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] - b_pre[i];
  std::vector<MpOracleStep> out;
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t j = 0;
    double best = -1e300;
    for (std::size_t k = 0; k < atoms.size(); ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) s += atoms[k][i] * r[i];
      if (s > best) {
        best = s;
        j = k;
      }
    }
    double c = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) c += atoms[j][i] * r[i];
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= c * atoms[j][i];
    out.push_back({j, c});
  }
  return out;
}

inline std::vector<std::vector<double>> atom_list(const Dictionary& d) {
  std::vector<std::vector<double>> a;
  for (std::size_t j = 0; j < d.size(); ++j) a.emplace_back(d.atom(j).begin(), d.atom(j).end());
  return a;
}

// max over j and over every r-subset S of the other atoms of Σ_{i∈S} |<D_i, D_j>|.
inline double babel_enumerate(const Dictionary& d, std::size_t r) {
  const std::size_t p = d.size();
  double best = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    for (std::uint32_t mask = 0; mask < (1u << p); ++mask) {
      if (mask & (1u << j)) continue;
      if (static_cast<std::size_t>(std::popcount(mask)) != r) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < p; ++i)
        if (mask & (1u << i)) s += std::abs(loop_dot(d.atom(i), d.atom(j)));
      best = std::max(best, s);
    }
  }
  return best;
}

inline Eigen::MatrixXd to_eigen(const Matrix& a) {
  Eigen::MatrixXd e(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) e(r, c) = a(r, c);
  return e;
}

// Descending eigenvalues of a symmetric matrix.
inline std::vector<double> eigen_eigvals(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(a), Eigen::EigenvaluesOnly);
  std::vector<double> v(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(v.rbegin(), v.rend());
  return v;
}

// Squared singular values via divide-and-conquer bidiagonalization, descending.
inline std::vector<double> squared_singular_values(const Matrix& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(to_eigen(a));
  std::vector<double> v;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
    v.push_back(svd.singularValues()(i) * svd.singularValues()(i));
  std::sort(v.rbegin(), v.rend());
  return v;
}

// exp(-Σ q log q) over the normalized eigenvalues of ZᵀZ.
inline double entropy_rank(const Matrix& z) {
  Eigen::MatrixXd e = to_eigen(z);
  Eigen::MatrixXd g = e.transpose() * e;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g, Eigen::EigenvaluesOnly);
  double total = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) total += std::max(0.0, es.eigenvalues()(i));
  double h = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double q = std::max(0.0, es.eigenvalues()(i)) / total;
    if (q > 1e-15) h -= q * std::log(q);
  }
  return std::exp(h);
}

// Pointers to every trainable scalar, in the order flatten() uses.
inline std::vector<double*> parameter_slots(EncoderModel& m) {
  std::vector<double*> s;
  for (double& v : m.dictionary.atom_rows_mut().data()) s.push_back(&v);
  for (double& v : m.encoder_rows.data()) s.push_back(&v);
  for (double& v : m.encoder_bias) s.push_back(&v);
  for (double& v : m.dictionary.pre_bias_mut()) s.push_back(&v);
  return s;
}

inline std::vector<double> flatten(const mpsae::Gradients& g) {
  std::vector<double> f;
  f.insert(f.end(), g.atoms.data().begin(), g.atoms.data().end());
  f.insert(f.end(), g.encoder_rows.data().begin(), g.encoder_rows.data().end());
  f.insert(f.end(), g.encoder_bias.begin(), g.encoder_bias.end());
  f.insert(f.end(), g.pre_bias.begin(), g.pre_bias.end());
  return f;
}

// Central differences of `loss` over every parameter slot.
inline std::vector<double> finite_difference(EncoderModel model, const std::function<double(const EncoderModel&)>& loss,
                                             double h = 1e-5) {
  auto slots = parameter_slots(model);
  std::vector<double> g(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double keep = *slots[i];
    *slots[i] = keep + h;
    const double up = loss(model);
    *slots[i] = keep - h;
    const double down = loss(model);
    *slots[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace oracle
