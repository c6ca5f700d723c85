#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpsae/dictionary.hpp"
#include "mpsae/matrix.hpp"

namespace mpsae {

enum class Variant { kRelu, kTopK, kBatchTopK, kMatryoshka, kMp };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

// How MP picks the next atom: signed argmax <D_j, r> as written in the
// algorithm, or argmax |<D_j, r>| as in classical matching pursuit.
enum class Selection { kSigned, kAbsolute };

struct MpStopRule {
  std::size_t max_steps = 1;
  // Stop before a step once ||r|| < residual_threshold; 0 disables.
  double residual_threshold = 0.0;
  // Stop once a step leaves the support unchanged while reducing ||r|| by
  // less than stable_decrease_tol.
  bool stop_on_stable_support = true;
  double stable_decrease_tol = 1e-9;
  Selection selection = Selection::kSigned;

  void validate() const;
  friend bool operator==(const MpStopRule&, const MpStopRule&) = default;
};

// z = Π(W^T (x - b_pre) + b), x̂ = D z + b_pre.
//
// encoder_rows holds W^T (p × m, one row per latent). When tied, it is
// empty and the dictionary atoms are used directly; MP is always tied.
struct EncoderModel {
  Variant variant = Variant::kRelu;
  Dictionary dictionary;
  Matrix encoder_rows;
  Vector encoder_bias;
  bool tied = false;
  // topk: integer k. batch-topk: mean active latents per row (may be fractional).
  double k = 0.0;
  std::vector<std::size_t> prefixes;  // matryoshka
  MpStopRule stop;                    // mp

  std::size_t dim() const { return dictionary.dim(); }
  std::size_t latents() const { return dictionary.size(); }
  std::span<const double> encoder_row(std::size_t j) const {
    return tied ? dictionary.atom(j) : encoder_rows.row(j);
  }
  void validate() const;

  friend bool operator==(const EncoderModel&, const EncoderModel&) = default;
};

struct SparseCode {
  Vector values;
  std::vector<std::size_t> support;  // sorted; exactly the nonzero entries

  static SparseCode from_dense(Vector values);
  std::size_t l0() const { return support.size(); }
};

struct MpStep {
  std::size_t index;
  double coefficient;
  double residual_norm;  // after the update
};

struct MpTrace {
  double initial_residual_norm = 0.0;
  std::vector<MpStep> steps;
};

// Pre-activations W^T (x - b_pre) + b, before any projection.
Vector pre_activations(const EncoderModel& model, std::span<const double> x);

SparseCode encode_relu(const EncoderModel& model, std::span<const double> x);
SparseCode encode_topk(const EncoderModel& model, std::span<const double> x);
// Global top round(k n) post-ReLU activations over the whole batch.
std::vector<SparseCode> encode_batch_topk(const EncoderModel& model, const Matrix& xs);
std::pair<SparseCode, MpTrace> encode_mp(const EncoderModel& model, std::span<const double> x);
// MP with an explicit stop rule (ignores model.stop).
std::pair<SparseCode, MpTrace> encode_mp(const EncoderModel& model, std::span<const double> x,
                                         const MpStopRule& stop);
// Orthogonal matching pursuit reference: k greedy selections, each followed
// by a least-squares refit on the accumulated support.
SparseCode encode_omp(const EncoderModel& model, std::span<const double> x, std::size_t k);

// Variant-dispatched encoding of a single input (batch-topk uses a batch of one).
SparseCode encode(const EncoderModel& model, std::span<const double> x);
std::vector<SparseCode> encode_batch(const EncoderModel& model, const Matrix& xs);

Vector decode(const EncoderModel& model, const SparseCode& z);
Vector decode_prefix(const EncoderModel& model, const SparseCode& z, std::size_t prefix_len);

struct Reconstruction {
  Vector x_hat;
  double squared_error = 0.0;
  SparseCode code;
};

// Inference at sparsity k: k MP steps for mp; otherwise ReLU activations
// truncated to their k largest-magnitude entries.
Reconstruction reconstruct_at_k(const EncoderModel& model, std::span<const double> x, std::size_t k);

// Indices of the k largest values, ties to the lowest index; result sorted.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

}  // namespace mpsae
