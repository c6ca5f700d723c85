#include "mpsae/generator.hpp"

#include <algorithm>
#include <cmath>

#include "mpsae/errors.hpp"
#include "mpsae/linalg.hpp"

namespace mpsae {

std::vector<std::size_t> TreeSpec::children_of(std::size_t node) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes(); ++i)
    if (parent[i] && *parent[i] == node && kind[i] == NodeKind::kChild) out.push_back(i);
  return out;
}

std::vector<std::size_t> TreeSpec::parent_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes(); ++i)
    if (kind[i] == NodeKind::kInternalParent || kind[i] == NodeKind::kLeafParent) out.push_back(i);
  return out;
}

std::vector<std::vector<std::size_t>> TreeSpec::sibling_groups() const {
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < nodes(); ++i) {
    if (kind[i] != NodeKind::kInternalParent) continue;
    auto c = children_of(i);
    if (c.size() >= 2) groups.push_back(std::move(c));
  }
  if (inject_leaf_group) {
    std::vector<std::size_t> leaves;
    for (std::size_t i = 0; i < nodes(); ++i)
      if (kind[i] == NodeKind::kLeafParent) leaves.push_back(i);
    if (leaves.size() >= 2) groups.push_back(std::move(leaves));
  }
  return groups;
}

double TreeSpec::expected_l0() const {
  double l0 = 0.0;
  for (std::size_t p : parent_nodes()) {
    double child_mass = 0.0;
    for (std::size_t c : children_of(p)) child_mass += activation_prob[c];
    l0 += activation_prob[p] * (1.0 + child_mass);
  }
  return l0;
}

void TreeSpec::validate() const {
  const std::size_t n = nodes();
  if (n < 2) throw ConfigError("tree: needs a root and at least one concept node");
  if (kind.size() != n || activation_prob.size() != n || magnitude_mean.size() != n || magnitude_sd.size() != n)
    throw ConfigError("tree: per-node arrays have inconsistent lengths");
  if (kind[0] != NodeKind::kRoot || parent[0]) throw ConfigError("tree: node 0 must be the root");
  if (activation_prob[0] != 0.0) throw ConfigError("tree: root activation probability must be 0");
  if (dim < n - 1) throw ConfigError("tree: dim must be at least the number of concept nodes");
  if (!(correlation_eps >= 0.0 && correlation_eps < 1.0)) throw ConfigError("tree: correlation_eps outside [0, 1)");
  if (target_correlation && !(*target_correlation >= 0.0 && *target_correlation < 1.0))
    throw ConfigError("tree: target_correlation outside [0, 1)");
  double parent_mass = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    if (kind[i] == NodeKind::kRoot) throw ConfigError("tree: only node 0 may be the root");
    if (!parent[i] || *parent[i] >= n) throw ConfigError("tree: non-root node without a valid parent");
    const NodeKind pk = kind[*parent[i]];
    if (kind[i] == NodeKind::kChild) {
      if (pk != NodeKind::kInternalParent) throw ConfigError("tree: child must hang off an internal parent");
    } else if (pk != NodeKind::kRoot) {
      throw ConfigError("tree: parent-kind nodes must hang off the root");
    }
    if (!(activation_prob[i] >= 0.0 && activation_prob[i] <= 1.0)) throw ConfigError("tree: probability outside [0, 1]");
    if (!(magnitude_sd[i] > 0.0)) throw ConfigError("tree: magnitude_sd must be positive");
    if (kind[i] != NodeKind::kChild) parent_mass += activation_prob[i];
  }
  if (std::abs(parent_mass - 1.0) > 1e-9) throw ConfigError("tree: parent activation probabilities must sum to 1");
  for (std::size_t p : parent_nodes()) {
    double child_mass = 0.0;
    for (std::size_t c : children_of(p)) child_mass += activation_prob[c];
    if (child_mass > 1.0 + 1e-12) throw ConfigError("tree: children of one parent exceed probability 1");
    if (kind[p] == NodeKind::kLeafParent && !children_of(p).empty())
      throw ConfigError("tree: leaf parent has children");
  }
}

TreeSpec default_tree() {
  TreeSpec t;
  t.dim = 20;
  const std::size_t n = 21;
  t.parent.assign(n, std::nullopt);
  t.kind.assign(n, NodeKind::kLeafParent);
  t.activation_prob.assign(n, 0.05);
  t.magnitude_mean.assign(n, 1.5);
  t.magnitude_sd.assign(n, 0.25);
  t.kind[0] = NodeKind::kRoot;
  t.activation_prob[0] = 0.0;
  t.magnitude_mean[0] = 0.0;
  t.magnitude_sd[0] = 1.0;  // unused
  for (std::size_t i = 1; i < n; ++i) t.parent[i] = 0;
  for (std::size_t p : {1u, 5u, 9u}) {
    t.kind[p] = NodeKind::kInternalParent;
    t.activation_prob[p] = 0.2;
    for (std::size_t c = p + 1; c <= p + 3; ++c) {
      t.kind[c] = NodeKind::kChild;
      t.parent[c] = p;
      t.activation_prob[c] = 0.2;
    }
  }
  return t;
}

TreeSpec perfectly_correlated_mode(TreeSpec spec) {
  spec.fixed_magnitudes = true;
  return spec;
}

namespace {

// In-place sibling perturbation of the listed atoms followed by renormalization.
void perturb_group(Matrix& atoms, const std::vector<std::size_t>& cols, double eps) {
  const std::size_t m = atoms.cols();
  Vector sum(m, 0.0);
  for (std::size_t c : cols) axpy(1.0, atoms.row(c), sum);
  std::vector<Vector> updated;
  updated.reserve(cols.size());
  for (std::size_t c : cols) {
    Vector v(m);
    const auto a = atoms.row(c);
    // (1 - eps) D_i + eps Σ_{j≠i} D_j = (1 - 2 eps) D_i + eps Σ_j D_j
    for (std::size_t k = 0; k < m; ++k) v[k] = (1.0 - eps) * a[k] + eps * (sum[k] - a[k]);
    const double n = norm2(v);
    for (auto& e : v) e /= n;
    updated.push_back(std::move(v));
  }
  for (std::size_t i = 0; i < cols.size(); ++i) std::copy(updated[i].begin(), updated[i].end(), atoms.row(cols[i]).begin());
}

double mean_pairwise_cosine(const Matrix& atoms, const std::vector<std::size_t>& cols) {
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < cols.size(); ++i)
    for (std::size_t j = i + 1; j < cols.size(); ++j) {
      s += cosine(atoms.row(cols[i]), atoms.row(cols[j]));
      ++count;
    }
  return count ? s / static_cast<double>(count) : 0.0;
}

}  // namespace

double sibling_cosine(std::size_t size, double eps) {
  if (size < 2) return 0.0;
  Matrix atoms = Matrix::identity(size);
  std::vector<std::size_t> cols(size);
  for (std::size_t i = 0; i < size; ++i) cols[i] = i;
  perturb_group(atoms, cols, eps);
  return mean_pairwise_cosine(atoms, cols);
}

double calibrate_eps(std::size_t size, double target, double tol) {
  if (!(target >= 0.0 && target < 1.0)) throw DomainError("calibrate_eps: target outside [0, 1)");
  if (target == 0.0 || size < 2) return 0.0;
  // The sibling cosine rises from 0 at eps = 0 to 1 at eps = 1/2.
  double lo = 0.0, hi = 0.5;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double c = sibling_cosine(size, mid);
    if (std::abs(c - target) <= tol) return mid;
    (c < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

GroundTruth build_gt_dictionary(const TreeSpec& spec, RngStream& rng) {
  const std::size_t p = spec.nodes() > 0 ? spec.concepts() : 0;
  if (spec.dim < p) throw DimensionError("gt dictionary: dim smaller than concept count");
  spec.validate();
  Matrix atoms = orthonormal_basis(rng, spec.dim, p).transpose();

  GroundTruth gt;
  for (const auto& group : spec.sibling_groups()) {
    std::vector<std::size_t> cols;
    for (std::size_t node : group) cols.push_back(atom_of(node));
    const double eps = spec.target_correlation ? calibrate_eps(group.size(), *spec.target_correlation)
                                               : spec.correlation_eps;
    if (eps > 0.0) perturb_group(atoms, cols, eps);
    gt.groups.push_back(group);
    gt.group_eps.push_back(eps);
    gt.group_cosine.push_back(mean_pairwise_cosine(atoms, cols));
  }
  gt.dictionary = Dictionary::from_atom_rows(std::move(atoms), Vector(spec.dim, 0.0), NormMode::kExactUnit);

  gt.levels.level.assign(p, 1);
  gt.levels.parent.assign(p, std::nullopt);
  for (std::size_t node = 1; node < spec.nodes(); ++node) {
    int depth = 0;
    for (auto cur = spec.parent[node]; cur; cur = spec.parent[*cur]) ++depth;
    gt.levels.level[atom_of(node)] = depth;
    const std::size_t par = *spec.parent[node];
    if (par != 0) gt.levels.parent[atom_of(node)] = atom_of(par);
  }
  gt.levels.validate();
  return gt;
}

namespace {

double draw_magnitude(const TreeSpec& spec, std::size_t node, RngStream& rng) {
  if (spec.fixed_magnitudes) return spec.magnitude_mean[node];
  return sample_truncated_gaussian(rng, spec.magnitude_mean[node], spec.magnitude_sd[node]);
}

void emit_row(const Dictionary& gt, SampleBatch& out, std::size_t row, std::size_t node, double z) {
  out.codes(row, atom_of(node)) = z;
  axpy(z, gt.atom(atom_of(node)), out.inputs.row(row));
}

}  // namespace

SampleBatch sample_batch(const TreeSpec& spec, const Dictionary& gt, std::size_t n, RngStream& rng) {
  if (gt.size() != spec.concepts() || gt.dim() != spec.dim) throw ShapeError("sample_batch: dictionary does not match tree");
  const auto parents = spec.parent_nodes();
  std::vector<std::vector<std::size_t>> kids(spec.nodes());
  for (std::size_t p : parents) kids[p] = spec.children_of(p);

  SampleBatch out{Matrix(n, spec.dim), Matrix(n, spec.concepts())};
  for (std::size_t row = 0; row < n; ++row) {
    // Single categorical draw over parent-kind nodes.
    double u = rng.uniform();
    std::size_t chosen = parents.back();
    for (std::size_t p : parents) {
      if (u < spec.activation_prob[p]) {
        chosen = p;
        break;
      }
      u -= spec.activation_prob[p];
    }
    emit_row(gt, out, row, chosen, draw_magnitude(spec, chosen, rng));
    if (kids[chosen].empty()) continue;
    // Mutually exclusive children: categorical over {child_1..child_k, none}.
    double v = rng.uniform();
    for (std::size_t c : kids[chosen]) {
      if (v < spec.activation_prob[c]) {
        emit_row(gt, out, row, c, draw_magnitude(spec, c, rng));
        break;
      }
      v -= spec.activation_prob[c];
    }
  }
  return out;
}

SampleBatch sample_conditioned(const TreeSpec& spec, const Dictionary& gt, std::size_t parent_node,
                               std::optional<std::size_t> child_node, std::size_t n, RngStream& rng) {
  if (parent_node == 0 || parent_node >= spec.nodes()) throw DomainError("sample_conditioned: bad parent node");
  if (child_node && (*child_node >= spec.nodes() || spec.parent[*child_node] != parent_node))
    throw DomainError("sample_conditioned: child does not belong to parent");
  SampleBatch out{Matrix(n, spec.dim), Matrix(n, spec.concepts())};
  for (std::size_t row = 0; row < n; ++row) {
    emit_row(gt, out, row, parent_node, draw_magnitude(spec, parent_node, rng));
    if (child_node) emit_row(gt, out, row, *child_node, draw_magnitude(spec, *child_node, rng));
  }
  return out;
}

}  // namespace mpsae
