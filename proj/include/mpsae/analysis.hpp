#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpsae/dictionary.hpp"
#include "mpsae/encoders.hpp"
#include "mpsae/generator.hpp"
#include "mpsae/io.hpp"
#include "mpsae/matrix.hpp"
#include "mpsae/rng.hpp"
#include "mpsae/training.hpp"

namespace mpsae {

// exp of the Shannon entropy of the normalized spectrum of ZᵀZ.
double effective_rank(const Matrix& z);

// 1 - SSE / SST with the per-coordinate mean of xs as the baseline.
double r_squared(const Matrix& xs, const Matrix& x_hat);

struct NormalizedMse {
  double value = 0.0;
  std::size_t skipped = 0;  // zero-norm rows
};

// Mean over rows of ||x̂ - x||² / ||x||².
NormalizedMse normalized_mse(const Matrix& xs, const Matrix& x_hat);

struct ModalityScores {
  std::vector<double> score;          // NaN for latents silent in both modalities
  std::vector<std::size_t> inactive;
  double text_energy_scale = 1.0;
};

// E_image[z_i] / (E_image[z_i] + scale · E_text[z_i]). The default scale is
// (#text rows) / (#image rows).
ModalityScores modality_score(const Matrix& z, std::span<const Modality> labels,
                              std::optional<double> text_energy_scale = std::nullopt);

struct AbsorptionResult {
  std::vector<std::size_t> child_nodes;
  std::vector<double> per_child;  // NaN where the child feature was not recovered
  double mean = 0.0;              // over recovered children; NaN if none
  std::size_t unrecovered = 0;
};

// For each child c of parent q: the parent atom is the learned atom with the
// highest mean |activation| on parent-only samples; the child atom is the
// highest on child-active samples, excluding the parent atom. The score is
// |cos(child atom, gt parent)|, or NaN when the child atom fires less than
// 10x more on child-active than on parent-only samples.
AbsorptionResult absorption_score(const EncoderModel& model, const TreeSpec& spec, const Dictionary& gt,
                                  RngStream& rng, std::size_t samples = 1000);

struct SweepPoint {
  std::size_t k = 0;
  double r2 = 0.0;
  double normalized_mse = 0.0;
  double effective_rank = 0.0;     // NaN when every code is zero
  double babel_coactivated = 0.0;  // NaN when no support has r + 1 atoms
};

struct SweepResult {
  std::vector<SweepPoint> points;
  // row_error(i, n): ||x̂_n - x_n||² / ||x_n||² at k_values[i]; NaN for zero rows.
  Matrix row_error;
};

SweepResult sweep_inference_k(const EncoderModel& model, const Matrix& xs, std::span<const std::size_t> k_values,
                              std::size_t babel_r = 1);

struct ParetoRow {
  std::size_t index = 0;  // position in the config list
  std::string variant;
  std::size_t latents = 0;
  double mean_l0 = 0.0;
  double r2 = 0.0;
  bool failed = false;
  std::string error;
};

// Trains every config on `source` and evaluates on `held_out`. Rows are
// sorted by mean l0 (ties by index); failed runs come last.
std::vector<ParetoRow> pareto_sweep(const std::vector<TrainConfig>& configs, const BatchSource& source,
                                    const Matrix& held_out);

// Mean l0 and decoded reconstructions of every row.
struct Evaluation {
  Matrix x_hat;
  Matrix codes;
  std::vector<std::vector<std::size_t>> supports;
  double mean_l0 = 0.0;
};
Evaluation evaluate(const EncoderModel& model, const Matrix& xs);

}  // namespace mpsae
