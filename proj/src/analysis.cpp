#include "mpsae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mpsae/errors.hpp"
#include "mpsae/linalg.hpp"

namespace mpsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

double effective_rank(const Matrix& z) {
  if (z.rows() == 0 || z.cols() == 0) throw EmptyInputError("effective_rank: empty code matrix");
  if (std::all_of(z.data().begin(), z.data().end(), [](double v) { return v == 0.0; }))
    throw DomainError("effective_rank: all-zero code matrix");
  // Z Zᵀ and ZᵀZ share their nonzero spectrum; use the smaller one.
  const Matrix g = z.rows() < z.cols() ? matmul(z, z.transpose()) : matmul_tn(z, z);
  EigOptions opts;
  opts.psd = true;
  opts.psd_tol = 1e-8 * std::max(1.0, *std::max_element(g.data().begin(), g.data().end()));
  opts.symmetry_tol = opts.psd_tol;
  const Vector lambda = sym_eigvals(g, opts);
  const double total = std::accumulate(lambda.begin(), lambda.end(), 0.0);
  double h = 0.0;
  for (double l : lambda) {
    const double q = l / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return std::exp(h);
}

double r_squared(const Matrix& xs, const Matrix& x_hat) {
  require_same_shape(xs, x_hat, "r_squared");
  if (xs.rows() < 2) throw DomainError("r_squared: need at least two rows");
  Vector mean(xs.cols(), 0.0);
  for (std::size_t n = 0; n < xs.rows(); ++n)
    for (std::size_t i = 0; i < xs.cols(); ++i) mean[i] += xs(n, i);
  for (auto& v : mean) v /= static_cast<double>(xs.rows());
  double sse = 0.0, sst = 0.0;
  for (std::size_t n = 0; n < xs.rows(); ++n)
    for (std::size_t i = 0; i < xs.cols(); ++i) {
      const double e = xs(n, i) - x_hat(n, i);
      const double d = xs(n, i) - mean[i];
      sse += e * e;
      sst += d * d;
    }
  if (sst == 0.0) throw DomainError("r_squared: zero total variance");
  return 1.0 - sse / sst;
}

NormalizedMse normalized_mse(const Matrix& xs, const Matrix& x_hat) {
  require_same_shape(xs, x_hat, "normalized_mse");
  NormalizedMse out;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t n = 0; n < xs.rows(); ++n) {
    const double denom = squared_norm(xs.row(n));
    if (denom == 0.0) {
      ++out.skipped;
      continue;
    }
    double num = 0.0;
    for (std::size_t i = 0; i < xs.cols(); ++i) {
      const double e = x_hat(n, i) - xs(n, i);
      num += e * e;
    }
    sum += num / denom;
    ++used;
  }
  if (used == 0) throw EmptyInputError("normalized_mse: every row has zero norm");
  out.value = sum / static_cast<double>(used);
  return out;
}

ModalityScores modality_score(const Matrix& z, std::span<const Modality> labels,
                              std::optional<double> text_energy_scale) {
  if (labels.size() != z.rows()) throw ShapeError("modality_score: one label per row required");
  std::size_t n_img = 0, n_txt = 0;
  for (auto l : labels) (l == Modality::kImage ? n_img : n_txt)++;
  if (n_img == 0 || n_txt == 0) throw DomainError("modality_score: both modalities must be present");
  ModalityScores out;
  out.text_energy_scale =
      text_energy_scale ? *text_energy_scale : static_cast<double>(n_txt) / static_cast<double>(n_img);
  if (!(out.text_energy_scale > 0.0)) throw DomainError("modality_score: text_energy_scale must be positive");

  Vector img(z.cols(), 0.0), txt(z.cols(), 0.0);
  for (std::size_t n = 0; n < z.rows(); ++n) {
    Vector& acc = labels[n] == Modality::kImage ? img : txt;
    for (std::size_t i = 0; i < z.cols(); ++i) acc[i] += z(n, i);
  }
  out.score.resize(z.cols());
  for (std::size_t i = 0; i < z.cols(); ++i) {
    const double a = img[i] / static_cast<double>(n_img);
    const double b = out.text_energy_scale * txt[i] / static_cast<double>(n_txt);
    if (a + b == 0.0) {
      out.score[i] = kNaN;
      out.inactive.push_back(i);
    } else {
      out.score[i] = a / (a + b);
    }
  }
  return out;
}

Evaluation evaluate(const EncoderModel& model, const Matrix& xs) {
  Evaluation ev;
  const auto codes = encode_batch(model, xs);
  ev.x_hat = Matrix(xs.rows(), xs.cols());
  ev.codes = Matrix(xs.rows(), model.latents());
  std::size_t total = 0;
  for (std::size_t n = 0; n < xs.rows(); ++n) {
    const Vector xh = decode(model, codes[n]);
    std::copy(xh.begin(), xh.end(), ev.x_hat.row(n).begin());
    std::copy(codes[n].values.begin(), codes[n].values.end(), ev.codes.row(n).begin());
    ev.supports.push_back(codes[n].support);
    total += codes[n].l0();
  }
  ev.mean_l0 = xs.rows() ? static_cast<double>(total) / static_cast<double>(xs.rows()) : 0.0;
  return ev;
}

AbsorptionResult absorption_score(const EncoderModel& model, const TreeSpec& spec, const Dictionary& gt,
                                  RngStream& rng, std::size_t samples) {
  const auto& atoms = model.dictionary.atom_rows().data();
  if (std::all_of(atoms.begin(), atoms.end(), [](double v) { return v == 0.0; }))
    throw DomainError("absorption_score: every learned atom is zero");
  if (model.latents() < 2) throw DomainError("absorption_score: need at least two learned atoms");

  auto mean_abs_activation = [&](const Matrix& xs) {
    const auto codes = encode_batch(model, xs);
    Vector m(model.latents(), 0.0);
    for (const auto& c : codes)
      for (std::size_t j : c.support) m[j] += std::abs(c.values[j]);
    for (auto& v : m) v /= static_cast<double>(xs.rows());
    return m;
  };
  auto argmax_excluding = [](const Vector& v, std::optional<std::size_t> skip) {
    std::size_t best = skip == 0 ? 1 : 0;
    for (std::size_t j = 0; j < v.size(); ++j)
      if (j != skip && v[j] > v[best]) best = j;
    return best;
  };

  AbsorptionResult out;
  for (std::size_t c = 0; c < spec.nodes(); ++c) {
    if (spec.kind[c] != NodeKind::kChild) continue;
    const std::size_t parent = *spec.parent[c];
    RngStream r = rng.split(c);
    const Matrix parent_only = sample_conditioned(spec, gt, parent, std::nullopt, samples, r).inputs;
    const Matrix child_on = sample_conditioned(spec, gt, parent, c, samples, r).inputs;
    const Vector act_parent = mean_abs_activation(parent_only);
    const Vector act_child = mean_abs_activation(child_on);
    const std::size_t parent_atom = argmax_excluding(act_parent, std::nullopt);
    const std::size_t child_atom = argmax_excluding(act_child, parent_atom);
    out.child_nodes.push_back(c);
    if (act_child[child_atom] < 10.0 * act_parent[child_atom] || act_child[child_atom] == 0.0) {
      out.per_child.push_back(kNaN);
      ++out.unrecovered;
    } else {
      out.per_child.push_back(
          std::abs(cosine(model.dictionary.atom(child_atom), gt.atom(atom_of(parent)))));
    }
  }
  if (out.child_nodes.empty()) throw DomainError("absorption_score: tree has no children");
  double sum = 0.0;
  std::size_t used = 0;
  for (double v : out.per_child)
    if (!std::isnan(v)) {
      sum += v;
      ++used;
    }
  out.mean = used ? sum / static_cast<double>(used) : kNaN;
  return out;
}

SweepResult sweep_inference_k(const EncoderModel& model, const Matrix& xs, std::span<const std::size_t> k_values,
                              std::size_t babel_r) {
  SweepResult out;
  out.row_error = Matrix(k_values.size(), xs.rows());
  for (std::size_t i = 0; i < k_values.size(); ++i) {
    const std::size_t k = k_values[i];
    Matrix x_hat(xs.rows(), xs.cols());
    Matrix codes(xs.rows(), model.latents());
    std::vector<std::vector<std::size_t>> supports;
    for (std::size_t n = 0; n < xs.rows(); ++n) {
      const Reconstruction rec = reconstruct_at_k(model, xs.row(n), k);
      std::copy(rec.x_hat.begin(), rec.x_hat.end(), x_hat.row(n).begin());
      std::copy(rec.code.values.begin(), rec.code.values.end(), codes.row(n).begin());
      supports.push_back(rec.code.support);
      const double denom = squared_norm(xs.row(n));
      out.row_error(i, n) = denom == 0.0 ? kNaN : rec.squared_error / denom;
    }
    SweepPoint p;
    p.k = k;
    p.r2 = r_squared(xs, x_hat);
    p.normalized_mse = normalized_mse(xs, x_hat).value;
    try {
      p.effective_rank = effective_rank(codes);
    } catch (const DomainError&) {
      p.effective_rank = kNaN;
    }
    try {
      p.babel_coactivated = babel_coactivated(model.dictionary, supports, babel_r).mean;
    } catch (const EmptyInputError&) {
      p.babel_coactivated = kNaN;
    } catch (const ContractError&) {
      p.babel_coactivated = kNaN;
    }
    out.points.push_back(p);
  }
  return out;
}

std::vector<ParetoRow> pareto_sweep(const std::vector<TrainConfig>& configs, const BatchSource& source,
                                    const Matrix& held_out) {
  if (configs.empty()) throw EmptyInputError("pareto_sweep: no configurations");
  std::vector<ParetoRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    ParetoRow row;
    row.index = i;
    row.variant = to_string(configs[i].variant);
    row.latents = configs[i].latents;
    try {
      TrainState state = init_state(configs[i], source.dim());
      train(state, source, configs[i]);
      const Evaluation ev = evaluate(state.model, held_out);
      row.mean_l0 = ev.mean_l0;
      row.r2 = r_squared(held_out, ev.x_hat);
    } catch (const Error& e) {
      row.failed = true;
      row.error = e.what();
      row.mean_l0 = kNaN;
      row.r2 = kNaN;
    }
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ParetoRow& a, const ParetoRow& b) {
    if (a.failed != b.failed) return !a.failed;
    if (a.failed) return a.index < b.index;
    return a.mean_l0 < b.mean_l0;
  });
  return rows;
}

}  // namespace mpsae
