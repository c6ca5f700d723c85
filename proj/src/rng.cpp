#include "mpsae/rng.hpp"

#include <cmath>
#include <numbers>

#include "mpsae/errors.hpp"

namespace mpsae {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

// Bound on rejection attempts; at the 6-sigma reachability floor the
// acceptance rate is ~1e-9, so budgeted failure is only hit by pathology.
constexpr int kMaxRejections = 1 << 20;

}  // namespace

std::array<std::uint32_t, 4> RngStream::philox_block(std::array<std::uint32_t, 2> key,
                                                      std::array<std::uint32_t, 4> ctr) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

RngStream RngStream::split(std::uint64_t child_id) const {
  return RngStream(seed_, mix64(stream_ ^ mix64(child_id + 0x632be59bd9b4e019ull)));
}

RngStream RngStream::at(std::uint64_t seed, std::uint64_t stream, std::uint64_t position) {
  RngStream r(seed, stream);
  r.position_ = position;
  return r;
}

std::uint64_t RngStream::next_u64() {
  // Each Philox block yields two 64-bit words; block index = position / 2.
  const std::uint64_t block = position_ >> 1;
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                            static_cast<std::uint32_t>(seed_ >> 32)};
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
      static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
  const auto out = philox_block(key, ctr);
  const unsigned lane = static_cast<unsigned>(position_ & 1u);
  ++position_;
  return (static_cast<std::uint64_t>(out[2 * lane + 1]) << 32) | out[2 * lane];
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform_open0() {
  return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t n) {
  // Lemire's multiply-shift with rejection of the biased low band.
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  std::uint64_t low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double RngStream::normal() {
  // Only the cosine branch is used so the stream state stays (seed, stream,
  // position) with no cached spare.
  const double u1 = uniform_open0();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double sample_truncated_gaussian(RngStream& rng, double mean, double sd) {
  if (!(sd > 0.0)) throw DomainError("truncated gaussian: sd must be positive");
  if (mean + 6.0 * sd <= 0.0) {
    throw RejectionBudgetError("truncated gaussian: positive half unreachable (mean + 6 sd <= 0)");
  }
  for (int i = 0; i < kMaxRejections; ++i) {
    const double v = mean + sd * rng.normal();
    if (v > 0.0) return v;
  }
  throw RejectionBudgetError("truncated gaussian: rejection budget exhausted");
}

}  // namespace mpsae
