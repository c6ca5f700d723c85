#include "mpsae/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mpsae/errors.hpp"
#include "mpsae/linalg.hpp"

namespace mpsae {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kRelu: return "relu";
    case Variant::kTopK: return "topk";
    case Variant::kBatchTopK: return "batch-topk";
    case Variant::kMatryoshka: return "matryoshka";
    case Variant::kMp: return "mp";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& s) {
  if (s == "relu" || s == "vanilla") return Variant::kRelu;
  if (s == "topk") return Variant::kTopK;
  if (s == "batch-topk" || s == "batchtopk") return Variant::kBatchTopK;
  if (s == "matryoshka") return Variant::kMatryoshka;
  if (s == "mp") return Variant::kMp;
  throw ConfigError("unknown variant '" + s + "'");
}

void MpStopRule::validate() const {
  if (max_steps == 0) throw ConfigError("mp stop rule: max_steps must be at least 1");
  if (residual_threshold < 0.0) throw ConfigError("mp stop rule: negative residual threshold");
}

void EncoderModel::validate() const {
  const std::size_t p = latents();
  if (encoder_bias.size() != p) throw ShapeError("encoder: bias length differs from latent count");
  if (!tied && (encoder_rows.rows() != p || encoder_rows.cols() != dim()))
    throw ShapeError("encoder: weight shape differs from dictionary");
  switch (variant) {
    case Variant::kMp:
      if (!tied) throw ContractError("encoder: mp requires tied weights");
      if (dictionary.norm_mode() != NormMode::kExactUnit) throw ContractError("encoder: mp requires exact-unit atoms");
      stop.validate();
      break;
    case Variant::kTopK:
      if (k < 1 || k > static_cast<double>(p) || k != std::floor(k)) throw DomainError("encoder: topk k must be an integer in [1, p]");
      break;
    case Variant::kBatchTopK:
      if (!(k > 0.0) || k > static_cast<double>(p)) throw DomainError("encoder: batch-topk k must lie in (0, p]");
      break;
    case Variant::kMatryoshka:
      if (prefixes.empty()) throw ConfigError("encoder: matryoshka needs prefixes");
      for (std::size_t i = 0; i < prefixes.size(); ++i)
        if (prefixes[i] == 0 || (i > 0 && prefixes[i] <= prefixes[i - 1]))
          throw ConfigError("encoder: matryoshka prefixes must be strictly increasing and positive");
      if (prefixes.back() != p) throw ConfigError("encoder: last matryoshka prefix must equal p");
      break;
    case Variant::kRelu: break;
  }
}

SparseCode SparseCode::from_dense(Vector values) {
  SparseCode z;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] != 0.0) z.support.push_back(i);
  z.values = std::move(values);
  return z;
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Vector pre_activations(const EncoderModel& model, std::span<const double> x) {
  const std::size_t m = model.dim();
  if (x.size() != m) throw ShapeError("encode: input dimension differs from model");
  Vector centered(m);
  for (std::size_t i = 0; i < m; ++i) centered[i] = x[i] - model.dictionary.pre_bias()[i];
  Vector pre(model.latents());
  for (std::size_t j = 0; j < pre.size(); ++j) pre[j] = dot(model.encoder_row(j), centered) + model.encoder_bias[j];
  return pre;
}

namespace {

Vector relu(Vector v) {
  for (auto& e : v) e = std::max(0.0, e);
  return v;
}

SparseCode keep_indices(const Vector& values, const std::vector<std::size_t>& keep) {
  Vector out(values.size(), 0.0);
  for (std::size_t j : keep) out[j] = values[j];
  return SparseCode::from_dense(std::move(out));
}

}  // namespace

SparseCode encode_relu(const EncoderModel& model, std::span<const double> x) {
  return SparseCode::from_dense(relu(pre_activations(model, x)));
}

SparseCode encode_topk(const EncoderModel& model, std::span<const double> x) {
  const auto k = static_cast<std::size_t>(model.k);
  if (model.k < 1 || k > model.latents()) throw DomainError("encode_topk: k must lie in [1, p]");
  const Vector act = relu(pre_activations(model, x));
  return keep_indices(act, top_k_indices(act, k));
}

std::vector<SparseCode> encode_batch_topk(const EncoderModel& model, const Matrix& xs) {
  const std::size_t n = xs.rows();
  const std::size_t p = model.latents();
  if (n == 0) throw DomainError("encode_batch_topk: empty batch");
  if (model.k * static_cast<double>(n) > static_cast<double>(n * p)) throw DomainError("encode_batch_topk: k n exceeds n p");
  const auto keep = static_cast<std::size_t>(std::llround(model.k * static_cast<double>(n)));

  Vector all(n * p);
  for (std::size_t r = 0; r < n; ++r) {
    const Vector act = relu(pre_activations(model, xs.row(r)));
    std::copy(act.begin(), act.end(), all.begin() + static_cast<std::ptrdiff_t>(r * p));
  }
  const auto top = top_k_indices(all, keep);
  Vector masked(n * p, 0.0);
  for (std::size_t f : top) masked[f] = all[f];
  std::vector<SparseCode> out;
  out.reserve(n);
  for (std::size_t r = 0; r < n; ++r)
    out.push_back(SparseCode::from_dense(Vector(masked.begin() + static_cast<std::ptrdiff_t>(r * p),
                                                masked.begin() + static_cast<std::ptrdiff_t>((r + 1) * p))));
  return out;
}

namespace {

std::size_t select_atom(const Dictionary& d, std::span<const double> r, Selection sel,
                        const std::vector<char>* excluded = nullptr) {
  std::size_t best = d.size();
  double best_val = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (excluded && (*excluded)[j]) continue;
    double v = dot(d.atom(j), r);
    if (sel == Selection::kAbsolute) v = std::abs(v);
    if (v > best_val) {
      best_val = v;
      best = j;
    }
  }
  return best;
}

}  // namespace

std::pair<SparseCode, MpTrace> encode_mp(const EncoderModel& model, std::span<const double> x) {
  return encode_mp(model, x, model.stop);
}

std::pair<SparseCode, MpTrace> encode_mp(const EncoderModel& model, std::span<const double> x,
                                         const MpStopRule& stop) {
  const Dictionary& d = model.dictionary;
  if (!d.norms_ok() || d.norm_mode() != NormMode::kExactUnit) throw ContractError("encode_mp: dictionary atoms must be unit norm");
  const std::size_t m = d.dim();
  if (x.size() != m) throw ShapeError("encode_mp: input dimension differs from model");

  Vector r(m);
  for (std::size_t i = 0; i < m; ++i) r[i] = x[i] - d.pre_bias()[i];
  Vector z(d.size(), 0.0);
  std::vector<char> in_support(d.size(), 0);
  MpTrace trace;
  double rnorm = norm2(r);
  trace.initial_residual_norm = rnorm;

  for (std::size_t t = 0; t < stop.max_steps; ++t) {
    if (stop.residual_threshold > 0.0 && rnorm < stop.residual_threshold) break;
    const std::size_t j = select_atom(d, r, stop.selection);
    const double c = dot(d.atom(j), r);
    axpy(-c, d.atom(j), r);
    z[j] += c;
    const double next = norm2(r);
    trace.steps.push_back({j, c, next});
    const bool support_unchanged = in_support[j] != 0;
    in_support[j] = 1;
    const double decrease = rnorm - next;
    rnorm = next;
    if (stop.stop_on_stable_support && support_unchanged && decrease < stop.stable_decrease_tol) break;
  }
  return {SparseCode::from_dense(std::move(z)), std::move(trace)};
}

SparseCode encode_omp(const EncoderModel& model, std::span<const double> x, std::size_t k) {
  const Dictionary& d = model.dictionary;
  if (!d.norms_ok() || d.norm_mode() != NormMode::kExactUnit) throw ContractError("encode_omp: dictionary atoms must be unit norm");
  if (k > std::min(d.dim(), d.size())) throw DomainError("encode_omp: k exceeds min(m, p)");
  const std::size_t m = d.dim();
  if (x.size() != m) throw ShapeError("encode_omp: input dimension differs from model");

  Vector target(m);
  for (std::size_t i = 0; i < m; ++i) target[i] = x[i] - d.pre_bias()[i];
  Vector r = target;
  std::vector<std::size_t> support;
  std::vector<char> selected(d.size(), 0);
  Vector coef;
  for (std::size_t step = 0; step < k; ++step) {
    const std::size_t j = select_atom(d, r, model.stop.selection, &selected);
    selected[j] = 1;
    support.push_back(j);
    const std::size_t s = support.size();
    Matrix g(s, s);
    Vector rhs(s);
    for (std::size_t a = 0; a < s; ++a) {
      rhs[a] = dot(d.atom(support[a]), target);
      for (std::size_t b = 0; b < s; ++b) g(a, b) = dot(d.atom(support[a]), d.atom(support[b]));
    }
    coef = cholesky_solve(g, rhs, 1e-10);
    r = target;
    for (std::size_t a = 0; a < s; ++a) axpy(-coef[a], d.atom(support[a]), r);
  }
  Vector z(d.size(), 0.0);
  for (std::size_t a = 0; a < support.size(); ++a) z[support[a]] = coef[a];
  return SparseCode::from_dense(std::move(z));
}

SparseCode encode(const EncoderModel& model, std::span<const double> x) {
  switch (model.variant) {
    case Variant::kRelu:
    case Variant::kMatryoshka: return encode_relu(model, x);
    case Variant::kTopK: return encode_topk(model, x);
    case Variant::kBatchTopK: {
      Matrix one(1, x.size(), Vector(x.begin(), x.end()));
      return std::move(encode_batch_topk(model, one).front());
    }
    case Variant::kMp: return encode_mp(model, x).first;
  }
  throw ContractError("encode: unknown variant");
}

std::vector<SparseCode> encode_batch(const EncoderModel& model, const Matrix& xs) {
  if (model.variant == Variant::kBatchTopK) return encode_batch_topk(model, xs);
  std::vector<SparseCode> out;
  out.reserve(xs.rows());
  for (std::size_t r = 0; r < xs.rows(); ++r) out.push_back(encode(model, xs.row(r)));
  return out;
}

Vector decode(const EncoderModel& model, const SparseCode& z) {
  if (z.values.size() != model.latents()) throw ShapeError("decode: code length differs from latent count");
  Vector out = model.dictionary.pre_bias();
  for (std::size_t j : z.support) axpy(z.values[j], model.dictionary.atom(j), out);
  return out;
}

Vector decode_prefix(const EncoderModel& model, const SparseCode& z, std::size_t prefix_len) {
  if (model.variant != Variant::kMatryoshka) throw DomainError("decode_prefix: model is not matryoshka");
  if (std::find(model.prefixes.begin(), model.prefixes.end(), prefix_len) == model.prefixes.end())
    throw DomainError("decode_prefix: prefix not declared");
  if (z.values.size() != model.latents()) throw ShapeError("decode_prefix: code length differs from latent count");
  Vector out = model.dictionary.pre_bias();
  for (std::size_t j : z.support)
    if (j < prefix_len) axpy(z.values[j], model.dictionary.atom(j), out);
  return out;
}

Reconstruction reconstruct_at_k(const EncoderModel& model, std::span<const double> x, std::size_t k) {
  Reconstruction rec;
  if (k == 0) {
    rec.code = SparseCode::from_dense(Vector(model.latents(), 0.0));
  } else if (model.variant == Variant::kMp) {
    MpStopRule fixed;
    fixed.max_steps = k;
    fixed.stop_on_stable_support = false;
    fixed.selection = model.stop.selection;
    rec.code = encode_mp(model, x, fixed).first;
  } else {
    const Vector act = relu(pre_activations(model, x));
    Vector mag(act.size());
    for (std::size_t j = 0; j < act.size(); ++j) mag[j] = std::abs(act[j]);
    Vector kept(act.size(), 0.0);
    for (std::size_t j : top_k_indices(mag, k))
      if (act[j] != 0.0) kept[j] = act[j];
    rec.code = SparseCode::from_dense(std::move(kept));
  }
  rec.x_hat = decode(model, rec.code);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = x[i] - rec.x_hat[i];
    rec.squared_error += e * e;
  }
  return rec;
}

}  // namespace mpsae
