#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mpsae/matrix.hpp"

namespace mpsae {

enum class NormMode { kExactUnit, kUnitBall };

inline constexpr double kNormTol = 1e-9;

// A set of p atoms in R^m plus the pre-decoding bias b_pre.
//
// Atoms are stored atom-major (p × m, one contiguous row per atom) because
// every consumer iterates over atoms; as_matrix() returns the conventional
// m × p layout.
class Dictionary {
 public:
  Dictionary() = default;
  // atoms: m × p (columns are atoms).
  Dictionary(const Matrix& atoms, Vector pre_bias, NormMode mode);

  static Dictionary from_atom_rows(Matrix atom_rows, Vector pre_bias, NormMode mode);

  std::size_t dim() const { return atoms_.cols(); }
  std::size_t size() const { return atoms_.rows(); }
  NormMode norm_mode() const { return mode_; }

  std::span<const double> atom(std::size_t j) const { return atoms_.row(j); }
  std::span<double> atom_mut(std::size_t j) { return atoms_.row(j); }
  const Matrix& atom_rows() const { return atoms_; }
  Matrix& atom_rows_mut() { return atoms_; }
  Matrix as_matrix() const { return atoms_.transpose(); }

  const Vector& pre_bias() const { return pre_bias_; }
  Vector& pre_bias_mut() { return pre_bias_; }

  // Rescales atoms so the norm invariant holds: exact-unit normalizes every
  // atom, unit-ball shrinks atoms longer than 1. Zero atoms are left alone.
  void project();
  // Throws ContractError when the norm invariant does not hold.
  void check_norms() const;
  bool norms_ok() const;

  // Dictionary restricted to the given atoms, in the given order.
  Dictionary subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dictionary&, const Dictionary&) = default;

 private:
  Matrix atoms_;
  Vector pre_bias_;
  NormMode mode_ = NormMode::kExactUnit;
};

// Hierarchy level per atom plus optional parent links.
struct LevelMap {
  std::vector<int> level;
  std::vector<std::optional<std::size_t>> parent;

  std::size_t size() const { return level.size(); }
  // Parents sit exactly one level above their children; roots have none.
  void validate() const;
};

// gt atom i -> learned atom mapping[i], maximizing total |cos|.
struct Assignment {
  std::vector<std::size_t> mapping;
  double score = 0.0;
};

Matrix gram(const Dictionary& d);

// Cosine similarity; 0 when either vector is zero.
double cosine(std::span<const double> a, std::span<const double> b);

// Babel function mu1(r): for each atom the sum of its r largest absolute
// inner products with the other atoms, maximized over atoms.
double babel(const Dictionary& d, std::size_t r);

struct CoactivatedBabel {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Mean of mu1(r) over sub-dictionaries restricted to each support. Supports
// with fewer than r + 1 atoms are skipped; throws EmptyInputError when all are.
CoactivatedBabel babel_coactivated(const Dictionary& d,
                                   const std::vector<std::vector<std::size_t>>& supports,
                                   std::size_t r);

// max |<D_i, D_j>| over pairs on different levels; 0 if no such pair.
double conditional_orthogonality_violation(const Dictionary& d, const LevelMap& levels);

// Optimal injective matching of gt atoms to learned atoms on |cos|.
Assignment match_to_ground_truth(const Dictionary& learned, const Dictionary& gt);

// Linear assignment: minimizes sum cost(i, assign[i]) for an n × m cost
// matrix with n <= m. Returns the column for each row.
std::vector<std::size_t> hungarian_min(const Matrix& cost);

// Gram of learned atoms reindexed by the assignment, as cosines with each
// learned atom's sign aligned to its gt partner.
Matrix aligned_learned_gram(const Dictionary& learned, const Dictionary& gt, const Assignment& a);

// Mean squared Gram deviation over ordered same-level pairs (i != j).
double flat_mse(const Dictionary& learned, const Dictionary& gt, const LevelMap& levels,
                const Assignment& a);
// Mean squared learned Gram entry over ordered cross-level pairs.
double hierarchical_mse(const Dictionary& learned, const Dictionary& gt, const LevelMap& levels,
                        const Assignment& a);

}  // namespace mpsae
