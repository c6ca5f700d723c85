#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpsae/encoders.hpp"
#include "mpsae/generator.hpp"
#include "mpsae/matrix.hpp"
#include "mpsae/rng.hpp"

namespace mpsae {

struct LrSchedule {
  enum class Kind { kConstant, kCosine };
  Kind kind = Kind::kConstant;
  // Cosine: linear warmup from floor to the base rate, then cosine decay
  // back to floor at the final step.
  std::size_t warmup = 0;
  double floor = 0.0;

  friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

struct TrainConfig {
  Variant variant = Variant::kMp;
  std::size_t latents = 20;
  std::size_t steps = 15000;
  std::size_t batch_size = 200;
  double learning_rate = 3e-2;
  LrSchedule lr_schedule;
  double beta1 = 0.5;
  double beta2 = 0.9375;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip_norm = 1.0;

  // Mean l0 target: drives the l1 controller (relu, matryoshka) and is the
  // post-warmup k of batch-topk.
  double sparsity_target = 1.36;
  double l1_weight = 1e-3;
  std::size_t l1_warmup_steps = 3000;
  double l1_gain = 0.003;
  double l1_deadband = 0.01;
  double l1_floor = 1e-8;

  double topk_k = 1;
  std::size_t batch_topk_warm_steps = 1000;
  double batch_topk_warm_k = 3;

  std::vector<std::size_t> matryoshka_prefixes;

  MpStopRule mp_stop;
  // Drop the radial part of each atom gradient before the optimizer step
  // (exact-unit dictionaries only); renormalization would discard it anyway,
  // but Adam's per-coordinate scaling would otherwise leak it sideways.
  bool tangent_atom_grads = true;
  bool mp_intermediate_loss = false;
  bool mp_reseed_dead = false;
  std::size_t mp_reseed_interval = 1000;

  double revive_eps = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Squared l2 distance.
double loss_mse(std::span<const double> x, std::span<const double> x_hat);
// Σ over declared prefixes of ||x - x̂^(prefix)||^2.
double loss_matryoshka(const EncoderModel& model, std::span<const double> x, const SparseCode& z);

// Multiplicative l1 update: ×(1 + gain) above target, ×(1 - gain) below,
// unchanged inside the deadband; floored.
double adaptive_l1_controller(double current_l0, double target_l0, double l1_weight, double gain = 0.003,
                              double deadband = 0.01, double floor = 1e-8);

struct LossSpec {
  double l1_weight = 0.0;          // relu-family sparsity penalty on Σ z
  bool mp_intermediate = false;    // average ||r_t||^2 over all steps
  // Per-forward override of the batch-topk k (warm schedule); <= 0 uses model.k.
  double batch_k = 0.0;
};

// Gradient buffers laid out like the model parameters.
struct Gradients {
  Matrix atoms;        // p × m
  Matrix encoder_rows; // p × m, empty when tied
  Vector encoder_bias;
  Vector pre_bias;

  static Gradients zeros_like(const EncoderModel& model);
  double norm() const;
  void scale(double s);
  void add(const Gradients& other);
  friend bool operator==(const Gradients&, const Gradients&) = default;
};

struct BatchResult {
  double loss = 0.0;  // mean over rows, including the penalty
  double mse = 0.0;   // mean reconstruction error ||x - x̂||^2
  double mean_l0 = 0.0;
  std::vector<char> active;  // latent fired at least once in the batch
  std::vector<std::size_t> usage;  // selections per latent
  Gradients grad;
  std::size_t worst_row = 0;  // row with the largest reconstruction error
};

// Forward pass and exact reverse-mode gradients of the mean batch loss with
// respect to D, W, b and b_pre. Discrete selections (top-k supports, batch
// top-k supports, MP argmax indices) are constants of the forward pass; every
// continuous path, including MP's recursive residual dependence on D, is
// differentiated.
BatchResult backward(const EncoderModel& model, const Matrix& batch, const LossSpec& loss, std::size_t threads = 1);

// Loss only (no gradients); the same forward used by backward().
double batch_loss(const EncoderModel& model, const Matrix& batch, const LossSpec& loss);

struct AdamState {
  std::uint64_t step = 0;
  Gradients m;
  Gradients v;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

double learning_rate_at(const TrainConfig& cfg, std::size_t step);

// Scales g in place so that its global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(Gradients& g, double max_norm);

struct StepRecord {
  double loss;
  double mse;
  double mean_l0;
  double l1_weight;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

// Supplies the training batch for a given step; must be a pure function of
// the step so resumed runs see identical data.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::size_t dim() const = 0;
  virtual Matrix batch(std::size_t step, std::size_t n) const = 0;
};

class SyntheticSource : public BatchSource {
 public:
  SyntheticSource(TreeSpec spec, Dictionary gt, std::uint64_t seed);
  std::size_t dim() const override { return spec_.dim; }
  Matrix batch(std::size_t step, std::size_t n) const override;

 private:
  TreeSpec spec_;
  Dictionary gt_;
  RngStream base_;
};

// Uniform row sampling (with replacement) from an in-memory matrix.
class MatrixSource : public BatchSource {
 public:
  MatrixSource(std::shared_ptr<const Matrix> data, std::uint64_t seed);
  std::size_t dim() const override { return data_->cols(); }
  Matrix batch(std::size_t step, std::size_t n) const override;

 private:
  std::shared_ptr<const Matrix> data_;
  RngStream base_;
};

struct TrainState {
  EncoderModel model;
  AdamState adam;
  std::size_t step = 0;  // completed steps
  double l1_weight = 0.0;
  std::vector<StepRecord> history;
  std::vector<std::size_t> usage;  // MP selections since the last reseed

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

// Unit-normalized Gaussian decoder, encoder initialized to the decoder
// transpose (untied except for MP), zero biases.
EncoderModel init_model(const TrainConfig& cfg, std::size_t dim);
TrainState init_state(const TrainConfig& cfg, std::size_t dim);

// One optimization step: forward, backward, clip, Adam, norm projection,
// revival and sparsity-controller updates. Throws NumericAbort on a
// non-finite loss.
StepRecord train_step(TrainState& state, const Matrix& batch, const TrainConfig& cfg);

// Runs until state.step == until (or cfg.steps). The callback, if set, is
// invoked after every step.
void train(TrainState& state, const BatchSource& source, const TrainConfig& cfg, std::size_t until = 0,
           const std::function<void(const TrainState&)>& on_step = {});

struct Checkpoint {
  TrainConfig config;
  TrainState state;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mpsae
