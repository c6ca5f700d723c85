#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "mpsae/dictionary.hpp"
#include "mpsae/matrix.hpp"
#include "mpsae/rng.hpp"

namespace mpsae {

enum class NodeKind { kRoot, kInternalParent, kLeafParent, kChild };

// Hierarchical generative process. Node 0 is the root (zero vector, never
// active); every other node i owns ground-truth atom i - 1.
//
// Exactly one parent-kind node fires per sample; an internal parent may
// additionally fire at most one of its children.
struct TreeSpec {
  std::size_t dim = 0;
  std::vector<std::optional<std::size_t>> parent;
  std::vector<NodeKind> kind;
  // Parents: marginal probability. Children: probability given the parent.
  std::vector<double> activation_prob;
  std::vector<double> magnitude_mean;
  std::vector<double> magnitude_sd;
  // Raw perturbation strength applied to every sibling group.
  double correlation_eps = 0.0;
  // When set, overrides correlation_eps: each group gets the eps that makes
  // its realized sibling cosine equal this target.
  std::optional<double> target_correlation;
  // Treat the childless parents (siblings under the root) as a group.
  bool inject_leaf_group = true;
  // Every active node fires at magnitude_mean (perfectly correlated firings).
  bool fixed_magnitudes = false;

  std::size_t nodes() const { return parent.size(); }
  std::size_t concepts() const { return nodes() - 1; }
  std::vector<std::size_t> children_of(std::size_t node) const;
  std::vector<std::size_t> parent_nodes() const;
  // Groups of concept nodes that receive intra-level correlation injection.
  std::vector<std::vector<std::size_t>> sibling_groups() const;
  // Σ_parents P(parent) (1 + Σ_children P(child | parent)).
  double expected_l0() const;
  void validate() const;

  friend bool operator==(const TreeSpec&, const TreeSpec&) = default;
};

// The 21-node benchmark tree: root 0; internal parents 1, 5, 9 (p = 0.2)
// with children 2-4, 6-8, 10-12 (p = 0.2 given the parent); childless
// parents 13-20 (p = 0.05); magnitudes N(1.5, 1/4^2); ambient dim 20.
TreeSpec default_tree();

// Same tree with magnitudes fixed at their means.
TreeSpec perfectly_correlated_mode(TreeSpec spec);

// Concept index (atom column) of a non-root node.
inline std::size_t atom_of(std::size_t node) { return node - 1; }

struct GroundTruth {
  Dictionary dictionary;  // concepts() exact-unit atoms, zero pre-bias
  LevelMap levels;        // depth per atom; parents of children as atom indices
  std::vector<std::vector<std::size_t>> groups;  // node ids per sibling group
  std::vector<double> group_eps;
  std::vector<double> group_cosine;  // realized mean sibling cosine per group
};

GroundTruth build_gt_dictionary(const TreeSpec& spec, RngStream& rng);

// Mean pairwise cosine within a group of `size` orthonormal vectors after
// the sibling perturbation with strength eps, computed by direct construction.
double sibling_cosine(std::size_t size, double eps);
// eps in [0, 1/2] with sibling_cosine(size, eps) == target, by bisection.
double calibrate_eps(std::size_t size, double target, double tol = 1e-12);

struct SampleBatch {
  Matrix inputs;  // n × dim
  Matrix codes;   // n × concepts()
};

SampleBatch sample_batch(const TreeSpec& spec, const Dictionary& gt, std::size_t n, RngStream& rng);

// n samples with `parent_node` forced active and `child_node` either forced
// active (when given) or forced silent. Magnitudes follow the spec.
SampleBatch sample_conditioned(const TreeSpec& spec, const Dictionary& gt, std::size_t parent_node,
                               std::optional<std::size_t> child_node, std::size_t n, RngStream& rng);

}  // namespace mpsae
