#pragma once

#include <cstdint>
#include <vector>

namespace mlab {

/// Counter-based generator built on the SplitMix64 finaliser.
///
/// Draw i of stream s under seed k is mix(key(k, s) + (i + 1) * golden), so a
/// stream is a pure function of (seed, stream id, counter). Each tensor of a
/// generated instance gets its own named stream id; grid cells derive their
/// seed from (master seed, cell index) with `derive_seed`. Nothing depends on
/// the order in which streams are consumed.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();
  /// Uniform on (0, 1); never returns 0 or 1.
  double uniform();
  /// Standard normal via Box-Muller (both variates are used).
  double normal();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// Fisher-Yates shuffle of 0..n-1.
std::vector<int> random_permutation(int n, CounterRng& rng);

// Stream ids used by the generators.
namespace stream {
inline constexpr std::uint64_t features = 1;
inline constexpr std::uint64_t teacher = 2;
inline constexpr std::uint64_t student = 3;
inline constexpr std::uint64_t test_inputs = 4;
inline constexpr std::uint64_t batches = 5;
inline constexpr std::uint64_t init = 6;
}  // namespace stream

}  // namespace mlab
