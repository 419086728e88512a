#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace textrefiner {

// xoshiro256** with splitmix64 seeding. The standard library distributions
// are implementation-defined, so checkpointable runs need a generator whose
// every draw is pinned down here. State round-trips exactly through
// save_state()/restore_state().
class Rng {
 public:
  struct State {
    std::array<std::uint64_t, 4> words{};
    bool has_gauss_spare = false;
    std::uint64_t gauss_spare_bits = 0;

    bool operator==(const State&) const = default;
  };

  explicit Rng(std::uint64_t seed);
  explicit Rng(const State& state);

  std::uint64_t next_u64();

  // Uniform in [0, 1), 53-bit resolution.
  double next_double();

  // Uniform integer in [0, bound) via bitmask rejection.
  std::uint64_t next_below(std::uint64_t bound);

  // Standard normal, Box-Muller with cached spare.
  double next_gaussian();

  // Fisher-Yates permutation of {0..n-1}.
  std::vector<std::size_t> permutation(std::size_t n);

  State save_state() const;
  void restore_state(const State& state);

 private:
  State state_;
};

}  // namespace textrefiner
