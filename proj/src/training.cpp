#include "mpsae/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include "mpsae/errors.hpp"

namespace mpsae {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: adam betas must lie in [0, 1)");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (latents == 0) throw ConfigError("train: latents must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
  if (l1_weight < 0.0) throw ConfigError("train: l1_weight must be non-negative");
  if (revive_eps < 0.0) throw ConfigError("train: revive_eps must be non-negative");
  if (variant == Variant::kMatryoshka) {
    if (matryoshka_prefixes.empty()) throw ConfigError("train: matryoshka needs prefixes");
    for (std::size_t i = 1; i < matryoshka_prefixes.size(); ++i)
      if (matryoshka_prefixes[i] <= matryoshka_prefixes[i - 1]) throw ConfigError("train: matryoshka prefixes must increase");
    if (matryoshka_prefixes.front() == 0 || matryoshka_prefixes.back() != latents)
      throw ConfigError("train: matryoshka prefixes must be positive and end at the latent count");
  }
  if (variant == Variant::kTopK && (topk_k < 1 || topk_k > static_cast<double>(latents) || topk_k != std::floor(topk_k)))
    throw ConfigError("train: topk_k must be an integer in [1, latents]");
  if (variant == Variant::kBatchTopK && !(sparsity_target > 0.0 && batch_topk_warm_k > 0.0))
    throw ConfigError("train: batch-topk sparsity must be positive");
  if (variant == Variant::kMp) mp_stop.validate();
  if (lr_schedule.kind == LrSchedule::Kind::kCosine && lr_schedule.floor > learning_rate)
    throw ConfigError("train: cosine floor exceeds the learning rate");
}

double loss_mse(std::span<const double> x, std::span<const double> x_hat) {
  if (x.size() != x_hat.size()) throw ShapeError("loss_mse: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - x_hat[i];
    s += d * d;
  }
  return s;
}

double loss_matryoshka(const EncoderModel& model, std::span<const double> x, const SparseCode& z) {
  if (model.prefixes.empty()) throw DomainError("loss_matryoshka: empty prefix set");
  double s = 0.0;
  for (std::size_t len : model.prefixes) s += loss_mse(x, decode_prefix(model, z, len));
  return s;
}

double adaptive_l1_controller(double current_l0, double target_l0, double l1_weight, double gain, double deadband,
                              double floor) {
  if (l1_weight < 0.0) throw DomainError("l1 controller: negative weight");
  double w = l1_weight;
  if (std::abs(current_l0 - target_l0) > deadband) w *= current_l0 > target_l0 ? (1.0 + gain) : (1.0 - gain);
  return std::max(w, floor);
}

Gradients Gradients::zeros_like(const EncoderModel& model) {
  Gradients g;
  g.atoms = Matrix(model.latents(), model.dim());
  if (!model.tied) g.encoder_rows = Matrix(model.latents(), model.dim());
  g.encoder_bias.assign(model.latents(), 0.0);
  g.pre_bias.assign(model.dim(), 0.0);
  return g;
}

double Gradients::norm() const {
  double s = squared_norm(atoms.data()) + squared_norm(encoder_rows.data()) + squared_norm(encoder_bias) +
             squared_norm(pre_bias);
  return std::sqrt(s);
}

void Gradients::scale(double s) {
  for (auto& v : atoms.data()) v *= s;
  for (auto& v : encoder_rows.data()) v *= s;
  for (auto& v : encoder_bias) v *= s;
  for (auto& v : pre_bias) v *= s;
}

void Gradients::add(const Gradients& o) {
  axpy(1.0, o.atoms.data(), atoms.data());
  axpy(1.0, o.encoder_rows.data(), encoder_rows.data());
  axpy(1.0, o.encoder_bias, encoder_bias);
  axpy(1.0, o.pre_bias, pre_bias);
}

namespace {

// Rows per gradient chunk. Fixed so the reduction order (and the result) does
// not depend on the thread count.
constexpr std::size_t kChunkRows = 32;

struct ChunkResult {
  double loss = 0.0;
  double mse = 0.0;
  double l0 = 0.0;
  double worst_err = -1.0;
  std::size_t worst_row = 0;
  std::vector<char> active;
  std::vector<std::size_t> usage;
  Gradients grad;
  bool with_grad = true;
};

// Relu-family row: z = keep ∘ relu(W^T (x - b_pre) + b).
void relu_family_row(const EncoderModel& model, std::span<const double> x, const std::vector<char>& keep,
                     const LossSpec& spec, ChunkResult& out) {
  const Dictionary& d = model.dictionary;
  const std::size_t m = model.dim();
  const std::size_t p = model.latents();
  Vector c(m);
  for (std::size_t i = 0; i < m; ++i) c[i] = x[i] - d.pre_bias()[i];
  Vector z(p, 0.0);
  double l1 = 0.0;
  std::size_t l0 = 0;
  for (std::size_t j = 0; j < p; ++j) {
    if (!keep[j]) continue;
    const double pre = dot(model.encoder_row(j), c) + model.encoder_bias[j];
    if (pre > 0.0) {
      z[j] = pre;
      l1 += pre;
      ++l0;
      out.active[j] = 1;
      ++out.usage[j];
    }
  }

  // Prefix boundaries; plain SAEs have the single prefix p.
  std::vector<std::size_t> bounds =
      model.variant == Variant::kMatryoshka ? model.prefixes : std::vector<std::size_t>{p};
  const std::size_t nb = bounds.size();
  std::vector<Vector> err(nb, Vector(m));
  Vector partial = d.pre_bias();
  std::size_t start = 0;
  double loss = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t j = start; j < bounds[b]; ++j)
      if (z[j] != 0.0) axpy(z[j], d.atom(j), partial);
    for (std::size_t i = 0; i < m; ++i) err[b][i] = partial[i] - x[i];
    loss += squared_norm(err[b]);
    start = bounds[b];
  }
  const double mse = squared_norm(err.back());
  out.loss += loss + spec.l1_weight * l1;
  out.mse += mse;
  out.l0 += static_cast<double>(l0);
  if (mse > out.worst_err) out.worst_err = mse;
  if (!out.with_grad) return;

  // suffix[b] = Σ_{b' >= b} err[b']: latent j in segment b feeds every
  // prefix from b onward.
  std::vector<Vector> suffix(nb, Vector(m, 0.0));
  for (std::size_t b = nb; b-- > 0;) {
    suffix[b] = err[b];
    if (b + 1 < nb) axpy(1.0, suffix[b + 1], suffix[b]);
  }
  Gradients& g = out.grad;
  axpy(2.0, suffix[0], g.pre_bias);
  Vector dc(m, 0.0);
  std::size_t seg = 0;
  for (std::size_t j = 0; j < p; ++j) {
    while (j >= bounds[seg]) ++seg;
    if (z[j] == 0.0) continue;
    const double dz = 2.0 * dot(d.atom(j), suffix[seg]) + spec.l1_weight;
    axpy(2.0 * z[j], suffix[seg], g.atoms.row(j));
    // d pre_j = dz on the active set.
    auto enc_grad = model.tied ? g.atoms.row(j) : g.encoder_rows.row(j);
    axpy(dz, c, enc_grad);
    g.encoder_bias[j] += dz;
    axpy(dz, model.encoder_row(j), dc);
  }
  axpy(-1.0, dc, g.pre_bias);
}

// Unrolled MP row with per-step residuals retained for the reverse pass.
void mp_row(const EncoderModel& model, std::span<const double> x, const LossSpec& spec, ChunkResult& out) {
  const Dictionary& d = model.dictionary;
  const MpStopRule& stop = model.stop;
  const std::size_t m = model.dim();
  std::vector<Vector> rs;
  std::vector<std::size_t> js;
  Vector cs;
  rs.emplace_back(m);
  for (std::size_t i = 0; i < m; ++i) rs[0][i] = x[i] - d.pre_bias()[i];
  std::vector<char> in_support(model.latents(), 0);
  double rnorm = norm2(rs[0]);
  for (std::size_t t = 0; t < stop.max_steps; ++t) {
    const Vector& r = rs.back();
    if (stop.residual_threshold > 0.0 && rnorm < stop.residual_threshold) break;
    std::size_t best = 0;
    double best_val = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < model.latents(); ++j) {
      double v = dot(d.atom(j), r);
      if (stop.selection == Selection::kAbsolute) v = std::abs(v);
      if (v > best_val) {
        best_val = v;
        best = j;
      }
    }
    const double coef = dot(d.atom(best), r);
    Vector next = r;
    axpy(-coef, d.atom(best), next);
    const double nn = norm2(next);
    const bool unchanged = in_support[best] != 0;
    in_support[best] = 1;
    const double decrease = rnorm - nn;
    rnorm = nn;
    js.push_back(best);
    cs.push_back(coef);
    rs.push_back(std::move(next));
    if (stop.stop_on_stable_support && unchanged && decrease < stop.stable_decrease_tol) break;
  }
  const std::size_t steps = js.size();

  Vector z(model.latents(), 0.0);
  for (std::size_t t = 0; t < steps; ++t) z[js[t]] += cs[t];
  std::size_t l0 = 0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (z[j] != 0.0) {
      ++l0;
      out.active[j] = 1;
    }
  }
  for (std::size_t j : js) ++out.usage[j];

  const bool inter = spec.mp_intermediate && steps > 0;
  const double w = inter ? 1.0 / static_cast<double>(steps) : 1.0;
  double loss = 0.0;
  if (inter) {
    for (std::size_t t = 1; t <= steps; ++t) loss += w * squared_norm(rs[t]);
  } else {
    loss = squared_norm(rs.back());
  }
  const double mse = squared_norm(rs.back());
  out.loss += loss;
  out.mse += mse;
  out.l0 += static_cast<double>(l0);
  if (mse > out.worst_err) out.worst_err = mse;
  if (!out.with_grad) return;

  // Reverse sweep: r_{t+1} = r_t - c_t d, c_t = <d, r_t>, d = D_{j_t}.
  Gradients& g = out.grad;
  Vector gr(m);
  for (std::size_t i = 0; i < m; ++i) gr[i] = 2.0 * w * rs.back()[i];
  for (std::size_t t = steps; t-- > 0;) {
    const auto atom = d.atom(js[t]);
    const double gc = -dot(atom, gr);
    auto ga = g.atoms.row(js[t]);
    axpy(-cs[t], gr, ga);
    axpy(gc, rs[t], ga);
    axpy(gc, atom, gr);
    if (inter && t >= 1) axpy(2.0 * w, rs[t], gr);
  }
  axpy(-1.0, gr, g.pre_bias);
}

template <typename Fn>
void parallel_chunks(std::size_t chunks, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t c = t; c < chunks; c += threads) fn(c);
    });
  for (auto& th : pool) th.join();
}

BatchResult run_batch(const EncoderModel& model, const Matrix& batch, const LossSpec& spec, std::size_t threads,
                      bool with_grad) {
  const std::size_t n = batch.rows();
  const std::size_t p = model.latents();
  if (n == 0) throw DomainError("backward: empty batch");
  if (batch.cols() != model.dim()) throw ShapeError("backward: batch dimension differs from model");

  // Selection masks for the relu family. Batch top-k is a batch-level barrier.
  std::vector<std::vector<char>> masks;
  if (model.variant != Variant::kMp) {
    masks.assign(n, std::vector<char>(p, 1));
    if (model.variant == Variant::kTopK || model.variant == Variant::kBatchTopK) {
      EncoderModel sel = model;
      if (model.variant == Variant::kBatchTopK && spec.batch_k > 0.0) sel.k = spec.batch_k;
      const auto codes = model.variant == Variant::kTopK ? encode_batch(sel, batch) : encode_batch_topk(sel, batch);
      for (std::size_t r = 0; r < n; ++r) {
        std::fill(masks[r].begin(), masks[r].end(), 0);
        for (std::size_t j : codes[r].support) masks[r][j] = 1;
      }
    }
  }

  const std::size_t chunks = (n + kChunkRows - 1) / kChunkRows;
  std::vector<ChunkResult> parts(chunks);
  parallel_chunks(chunks, threads, [&](std::size_t ci) {
    ChunkResult& part = parts[ci];
    part.with_grad = with_grad;
    part.active.assign(p, 0);
    part.usage.assign(p, 0);
    if (with_grad) part.grad = Gradients::zeros_like(model);
    const std::size_t end = std::min(n, (ci + 1) * kChunkRows);
    for (std::size_t r = ci * kChunkRows; r < end; ++r) {
      const double before = part.worst_err;
      if (model.variant == Variant::kMp)
        mp_row(model, batch.row(r), spec, part);
      else
        relu_family_row(model, batch.row(r), masks[r], spec, part);
      if (part.worst_err > before) part.worst_row = r;
    }
  });

  BatchResult res;
  res.active.assign(p, 0);
  res.usage.assign(p, 0);
  if (with_grad) res.grad = Gradients::zeros_like(model);
  double worst = -1.0;
  for (auto& part : parts) {
    res.loss += part.loss;
    res.mse += part.mse;
    res.mean_l0 += part.l0;
    for (std::size_t j = 0; j < p; ++j) {
      res.active[j] |= part.active[j];
      res.usage[j] += part.usage[j];
    }
    if (with_grad) res.grad.add(part.grad);
    if (part.worst_err > worst) {
      worst = part.worst_err;
      res.worst_row = part.worst_row;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  res.loss *= inv;
  res.mse *= inv;
  res.mean_l0 *= inv;
  if (with_grad) res.grad.scale(inv);
  return res;
}

}  // namespace

BatchResult backward(const EncoderModel& model, const Matrix& batch, const LossSpec& loss, std::size_t threads) {
  return run_batch(model, batch, loss, threads, true);
}

double batch_loss(const EncoderModel& model, const Matrix& batch, const LossSpec& loss) {
  return run_batch(model, batch, loss, 1, false).loss;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  const LrSchedule& s = cfg.lr_schedule;
  if (s.kind == LrSchedule::Kind::kConstant) return cfg.learning_rate;
  if (step < s.warmup)
    return s.floor + (cfg.learning_rate - s.floor) * static_cast<double>(step + 1) / static_cast<double>(s.warmup);
  const std::size_t decay = cfg.steps > s.warmup + 1 ? cfg.steps - s.warmup - 1 : 1;
  const double progress = std::min(1.0, static_cast<double>(step - s.warmup) / static_cast<double>(decay));
  return s.floor + 0.5 * (cfg.learning_rate - s.floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(Gradients& g, double max_norm) {
  const double n = g.norm();
  if (n > max_norm) g.scale(max_norm / n);
  return n;
}

namespace {

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 double lr, const TrainConfig& cfg, double bc1, double bc2, bool decay) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps);
    if (decay) upd += cfg.weight_decay * param[i];
    param[i] -= lr * upd;
  }
}

bool relu_family(Variant v) { return v != Variant::kMp; }

}  // namespace

EncoderModel init_model(const TrainConfig& cfg, std::size_t dim) {
  RngStream rng = RngStream(cfg.seed).split(0x1417);
  const std::size_t p = cfg.latents;
  Matrix atoms(p, dim);
  for (std::size_t j = 0; j < p; ++j) {
    auto a = atoms.row(j);
    for (auto& v : a) v = rng.normal();
    const double n = norm2(a);
    for (auto& v : a) v /= n;
  }
  EncoderModel model;
  model.variant = cfg.variant;
  const NormMode mode = cfg.variant == Variant::kMp ? NormMode::kExactUnit : NormMode::kUnitBall;
  model.tied = cfg.variant == Variant::kMp;
  if (!model.tied) model.encoder_rows = atoms;
  model.dictionary = Dictionary::from_atom_rows(std::move(atoms), Vector(dim, 0.0), mode);
  model.encoder_bias.assign(p, 0.0);
  switch (cfg.variant) {
    case Variant::kTopK: model.k = cfg.topk_k; break;
    case Variant::kBatchTopK: model.k = cfg.batch_topk_warm_steps > 0 ? cfg.batch_topk_warm_k : cfg.sparsity_target; break;
    case Variant::kMatryoshka: model.prefixes = cfg.matryoshka_prefixes; break;
    case Variant::kMp: model.stop = cfg.mp_stop; break;
    case Variant::kRelu: break;
  }
  model.validate();
  return model;
}

TrainState init_state(const TrainConfig& cfg, std::size_t dim) {
  cfg.validate();
  TrainState st;
  st.model = init_model(cfg, dim);
  st.adam.m = Gradients::zeros_like(st.model);
  st.adam.v = Gradients::zeros_like(st.model);
  st.l1_weight = cfg.l1_weight;
  st.usage.assign(cfg.latents, 0);
  return st;
}

StepRecord train_step(TrainState& state, const Matrix& batch, const TrainConfig& cfg) {
  EncoderModel& model = state.model;
  const std::size_t s = state.step;
  if (model.variant == Variant::kBatchTopK)
    model.k = s < cfg.batch_topk_warm_steps ? cfg.batch_topk_warm_k : cfg.sparsity_target;

  LossSpec spec;
  if (model.variant == Variant::kRelu || model.variant == Variant::kMatryoshka) spec.l1_weight = state.l1_weight;
  spec.mp_intermediate = cfg.mp_intermediate_loss;
  BatchResult res = backward(model, batch, spec, cfg.threads);
  if (!std::isfinite(res.loss) || !std::isfinite(res.grad.norm())) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << s << " (loss=" << res.loss << ", mse=" << res.mse
        << ", mean_l0=" << res.mean_l0 << ", l1_weight=" << state.l1_weight << ")";
    throw NumericAbort(msg.str());
  }

  if (cfg.tangent_atom_grads && model.dictionary.norm_mode() == NormMode::kExactUnit) {
    for (std::size_t j = 0; j < model.latents(); ++j) {
      auto g = res.grad.atoms.row(j);
      axpy(-dot(g, model.dictionary.atom(j)), model.dictionary.atom(j), g);
    }
  }
  clip_global_norm(res.grad, cfg.grad_clip_norm);

  AdamState& adam = state.adam;
  ++adam.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
  const double lr = learning_rate_at(cfg, s);
  const bool decay = cfg.weight_decay > 0.0;
  adam_update(model.dictionary.atom_rows_mut().data(), res.grad.atoms.data(), adam.m.atoms.data(),
              adam.v.atoms.data(), lr, cfg, bc1, bc2, decay);
  if (!model.tied)
    adam_update(model.encoder_rows.data(), res.grad.encoder_rows.data(), adam.m.encoder_rows.data(),
                adam.v.encoder_rows.data(), lr, cfg, bc1, bc2, decay);
  adam_update(model.encoder_bias, res.grad.encoder_bias, adam.m.encoder_bias, adam.v.encoder_bias, lr, cfg, bc1,
              bc2, false);
  adam_update(model.dictionary.pre_bias_mut(), res.grad.pre_bias, adam.m.pre_bias, adam.v.pre_bias, lr, cfg, bc1,
              bc2, false);

  model.dictionary.project();

  if (relu_family(model.variant) && cfg.revive_eps > 0.0) {
    for (std::size_t j = 0; j < model.latents(); ++j)
      if (!res.active[j]) model.encoder_bias[j] += cfg.revive_eps;
  }

  if (model.variant == Variant::kMp) {
    for (std::size_t j = 0; j < model.latents(); ++j) state.usage[j] += res.usage[j];
    if (cfg.mp_reseed_dead && cfg.mp_reseed_interval > 0 && (s + 1) % cfg.mp_reseed_interval == 0) {
      auto [code, trace] = encode_mp(model, batch.row(res.worst_row));
      Vector resid(batch.row(res.worst_row).begin(), batch.row(res.worst_row).end());
      const Vector recon = decode(model, code);
      for (std::size_t i = 0; i < resid.size(); ++i) resid[i] -= recon[i];
      const double rn = norm2(resid);
      if (rn > 0.0) {
        for (std::size_t j = 0; j < model.latents(); ++j) {
          if (state.usage[j] != 0) continue;
          auto a = model.dictionary.atom_mut(j);
          for (std::size_t i = 0; i < a.size(); ++i) a[i] = resid[i] / rn;
        }
      }
      std::fill(state.usage.begin(), state.usage.end(), 0);
    }
  }

  if ((model.variant == Variant::kRelu || model.variant == Variant::kMatryoshka) && s >= cfg.l1_warmup_steps)
    state.l1_weight = adaptive_l1_controller(res.mean_l0, cfg.sparsity_target, state.l1_weight, cfg.l1_gain,
                                             cfg.l1_deadband, cfg.l1_floor);

  StepRecord rec{res.loss, res.mse, res.mean_l0, state.l1_weight};
  state.history.push_back(rec);
  ++state.step;
  return rec;
}

void train(TrainState& state, const BatchSource& source, const TrainConfig& cfg, std::size_t until,
           const std::function<void(const TrainState&)>& on_step) {
  if (until == 0) until = cfg.steps;
  while (state.step < until) {
    const Matrix batch = source.batch(state.step, cfg.batch_size);
    train_step(state, batch, cfg);
    if (on_step) on_step(state);
  }
}

SyntheticSource::SyntheticSource(TreeSpec spec, Dictionary gt, std::uint64_t seed)
    : spec_(std::move(spec)), gt_(std::move(gt)), base_(RngStream(seed).split(0xda7a)) {}

Matrix SyntheticSource::batch(std::size_t step, std::size_t n) const {
  RngStream rng = base_.split(step);
  return sample_batch(spec_, gt_, n, rng).inputs;
}

MatrixSource::MatrixSource(std::shared_ptr<const Matrix> data, std::uint64_t seed)
    : data_(std::move(data)), base_(RngStream(seed).split(0xda7a)) {
  if (!data_ || data_->rows() == 0) throw DomainError("matrix source: empty data");
}

Matrix MatrixSource::batch(std::size_t step, std::size_t n) const {
  RngStream rng = base_.split(step);
  Matrix out(n, data_->cols());
  for (std::size_t r = 0; r < n; ++r) {
    const auto src = data_->row(rng.uniform_index(data_->rows()));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace mpsae
