#include "mpsae/dictionary.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "mpsae/errors.hpp"

namespace mpsae {

Dictionary::Dictionary(const Matrix& atoms, Vector pre_bias, NormMode mode)
    : Dictionary(from_atom_rows(atoms.transpose(), std::move(pre_bias), mode)) {}

Dictionary Dictionary::from_atom_rows(Matrix atom_rows, Vector pre_bias, NormMode mode) {
  if (pre_bias.size() != atom_rows.cols()) throw ShapeError("dictionary: pre_bias length differs from m");
  Dictionary d;
  d.atoms_ = std::move(atom_rows);
  d.pre_bias_ = std::move(pre_bias);
  d.mode_ = mode;
  d.check_norms();
  return d;
}

void Dictionary::project() {
  for (std::size_t j = 0; j < size(); ++j) {
    auto a = atoms_.row(j);
    const double n = norm2(a);
    if (n == 0.0) continue;
    if (mode_ == NormMode::kExactUnit || n > 1.0)
      for (auto& v : a) v /= n;
  }
}

bool Dictionary::norms_ok() const {
  for (std::size_t j = 0; j < size(); ++j) {
    const double n = norm2(atom(j));
    if (!std::isfinite(n)) return false;
    if (mode_ == NormMode::kExactUnit && std::abs(n - 1.0) > kNormTol) return false;
    if (mode_ == NormMode::kUnitBall && n > 1.0 + kNormTol) return false;
  }
  return true;
}

void Dictionary::check_norms() const {
  if (!norms_ok()) {
    throw ContractError(mode_ == NormMode::kExactUnit ? "dictionary: atoms are not unit norm"
                                                       : "dictionary: atoms leave the unit ball");
  }
}

Dictionary Dictionary::subset(std::span<const std::size_t> indices) const {
  Matrix rows(indices.size(), dim());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw DomainError("dictionary subset: index out of range");
    std::copy_n(atom(indices[k]).begin(), dim(), rows.row(k).begin());
  }
  Dictionary d;
  d.atoms_ = std::move(rows);
  d.pre_bias_ = pre_bias_;
  d.mode_ = mode_;
  return d;
}

void LevelMap::validate() const {
  if (parent.size() != level.size()) throw ShapeError("level map: parent/level length mismatch");
  for (std::size_t i = 0; i < level.size(); ++i) {
    if (!parent[i]) continue;
    const std::size_t p = *parent[i];
    if (p >= level.size()) throw ContractError("level map: parent index out of range");
    if (level[p] != level[i] - 1) throw ContractError("level map: parent must be one level up");
  }
}

Matrix gram(const Dictionary& d) {
  const std::size_t p = d.size();
  Matrix g(p, p);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = i; j < p; ++j) {
      const double v = dot(d.atom(i), d.atom(j));
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

namespace {

double babel_from_gram(const Matrix& g, std::size_t r) {
  const std::size_t p = g.rows();
  double best = 0.0;
  Vector col;
  col.reserve(p);
  for (std::size_t j = 0; j < p; ++j) {
    col.clear();
    for (std::size_t i = 0; i < p; ++i)
      if (i != j) col.push_back(std::abs(g(i, j)));
    std::partial_sort(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(r), col.end(),
                      std::greater<>());
    double s = 0.0;
    for (std::size_t k = 0; k < r; ++k) s += col[k];
    best = std::max(best, s);
  }
  return best;
}

void require_unit(const Dictionary& d, const char* what) {
  if (d.norm_mode() != NormMode::kExactUnit) throw ContractError(std::string(what) + ": requires exact-unit atoms");
}

}  // namespace

double babel(const Dictionary& d, std::size_t r) {
  require_unit(d, "babel");
  if (r < 1 || r + 1 > d.size()) throw DomainError("babel: r must lie in [1, p-1]");
  return babel_from_gram(gram(d), r);
}

CoactivatedBabel babel_coactivated(const Dictionary& d,
                                   const std::vector<std::vector<std::size_t>>& supports,
                                   std::size_t r) {
  require_unit(d, "babel_coactivated");
  if (r < 1) throw DomainError("babel_coactivated: r must be >= 1");
  CoactivatedBabel out;
  double sum = 0.0;
  for (const auto& s : supports) {
    if (s.size() < r + 1) {
      ++out.skipped;
      continue;
    }
    sum += babel_from_gram(gram(d.subset(s)), r);
    ++out.used;
  }
  if (out.used == 0) throw EmptyInputError("babel_coactivated: no support has r + 1 atoms");
  out.mean = sum / static_cast<double>(out.used);
  return out;
}

double conditional_orthogonality_violation(const Dictionary& d, const LevelMap& levels) {
  if (levels.size() != d.size()) throw ShapeError("conditional orthogonality: level map does not cover atoms");
  double worst = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = i + 1; j < d.size(); ++j)
      if (levels.level[i] != levels.level[j]) worst = std::max(worst, std::abs(dot(d.atom(i), d.atom(j))));
  return worst;
}

std::vector<std::size_t> hungarian_min(const Matrix& cost) {
  // Potentials-based shortest augmenting path, O(n^2 m). Rows are 1-based
  // inside the loop; index 0 is the virtual source.
  const std::size_t n = cost.rows();
  const std::size_t m = cost.cols();
  if (n > m) throw ShapeError("hungarian: more rows than columns");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Vector u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    Vector minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        // Strict comparison keeps the lowest column index on ties.
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (match[j] != 0) assign[match[j] - 1] = j - 1;
  return assign;
}

Assignment match_to_ground_truth(const Dictionary& learned, const Dictionary& gt) {
  if (learned.dim() != gt.dim()) throw ShapeError("match: ambient dimensions differ");
  if (learned.size() < gt.size()) throw ShapeError("match: learned dictionary smaller than ground truth");
  Matrix cost(gt.size(), learned.size());
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t j = 0; j < learned.size(); ++j) cost(i, j) = -std::abs(cosine(gt.atom(i), learned.atom(j)));
  Assignment a;
  a.mapping = hungarian_min(cost);
  for (std::size_t i = 0; i < gt.size(); ++i) a.score -= cost(i, a.mapping[i]);
  return a;
}

Matrix aligned_learned_gram(const Dictionary& learned, const Dictionary& gt, const Assignment& a) {
  const std::size_t p = gt.size();
  if (a.mapping.size() != p) throw ShapeError("assignment does not cover the ground-truth atoms");
  Vector sign(p);
  for (std::size_t i = 0; i < p; ++i)
    sign[i] = dot(gt.atom(i), learned.atom(a.mapping[i])) < 0.0 ? -1.0 : 1.0;
  Matrix g(p, p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j)
      g(i, j) = sign[i] * sign[j] * cosine(learned.atom(a.mapping[i]), learned.atom(a.mapping[j]));
  return g;
}

double flat_mse(const Dictionary& learned, const Dictionary& gt, const LevelMap& levels, const Assignment& a) {
  if (levels.size() != gt.size()) throw ShapeError("flat_mse: level map does not cover gt atoms");
  const Matrix lg = aligned_learned_gram(learned, gt, a);
  const Matrix gg = gram(gt);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (i == j || levels.level[i] != levels.level[j]) continue;
      const double d = lg(i, j) - gg(i, j);
      sum += d * d;
      ++count;
    }
  }
  if (count == 0) throw EmptyInputError("flat_mse: no same-level pairs");
  return sum / static_cast<double>(count);
}

double hierarchical_mse(const Dictionary& learned, const Dictionary& gt, const LevelMap& levels,
                        const Assignment& a) {
  if (levels.size() != gt.size()) throw ShapeError("hierarchical_mse: level map does not cover gt atoms");
  const Matrix lg = aligned_learned_gram(learned, gt, a);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (levels.level[i] == levels.level[j]) continue;
      sum += lg(i, j) * lg(i, j);
      ++count;
    }
  }
  if (count == 0) throw EmptyInputError("hierarchical_mse: no cross-level pairs");
  return sum / static_cast<double>(count);
}

}  // namespace mpsae
