#pragma once

#include <array>
#include <cstdint>

namespace mpsae {

// Counter-based random stream built on Philox4x32-10.
//
// The 64-bit seed is the Philox key and the 64-bit stream id fills the upper
// half of the 128-bit counter, so (seed, stream) fully determines the
// sequence on every platform. Independent streams are obtained with split().
class RngStream {
 public:
  static constexpr const char* kAlgorithm = "philox4x32-10";

  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  // Child stream with a stream id derived from (this stream, child_id).
  // Splitting does not advance the parent.
  RngStream split(std::uint64_t child_id) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in (0, 1].
  double uniform_open0();
  // Uniform integer in [0, n), n > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  // Standard normal by Box-Muller (two uniforms per draw).
  double normal();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  // Number of 64-bit words consumed so far.
  std::uint64_t position() const { return position_; }

  // Restore an exact stream state (used by checkpoints).
  static RngStream at(std::uint64_t seed, std::uint64_t stream, std::uint64_t position);

  // Raw Philox4x32-10 block for (key, counter), exposed for known-answer tests.
  static std::array<std::uint32_t, 4> philox_block(std::array<std::uint32_t, 2> key,
                                                    std::array<std::uint32_t, 4> ctr);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t position_ = 0;
};

// SplitMix64 finalizer; used to derive stream ids.
std::uint64_t mix64(std::uint64_t x);

// Truncated-positive Gaussian N(mean, sd^2) conditioned on x > 0, sampled by
// rejection. Throws RejectionBudgetError when mean + 6 sd <= 0.
double sample_truncated_gaussian(RngStream& rng, double mean, double sd);

}  // namespace mpsae
