#include "textrefiner/rng.hpp"

#include <bit>
#include <cmath>
#include <numbers>

#include "textrefiner/errors.hpp"

namespace textrefiner {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& w : state_.words) {
    w = splitmix64(x);
  }
}

Rng::Rng(const State& state) : state_(state) {}

std::uint64_t Rng::next_u64() {
  auto& s = state_.words;
  const std::uint64_t result = std::rotl(s[1] * 5, 7) * 9;
  const std::uint64_t t = s[1] << 17;
  s[2] ^= s[0];
  s[3] ^= s[1];
  s[1] ^= s[2];
  s[0] ^= s[3];
  s[2] ^= t;
  s[3] = std::rotl(s[3], 45);
  return result;
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::next_below(std::uint64_t bound) {
  if (bound == 0) {
    throw ConfigError("Rng::next_below: bound must be positive");
  }
  if (bound == 1) {
    return 0;
  }
  std::uint64_t mask = ~std::uint64_t{0} >> std::countl_zero(bound - 1);
  std::uint64_t draw;
  do {
    draw = next_u64() & mask;
  } while (draw >= bound);
  return draw;
}

double Rng::next_gaussian() {
  if (state_.has_gauss_spare) {
    state_.has_gauss_spare = false;
    return std::bit_cast<double>(state_.gauss_spare_bits);
  }
  const double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
  const double u2 = next_double();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  const double spare = radius * std::sin(angle);
  state_.gauss_spare_bits = std::bit_cast<std::uint64_t>(spare);
  state_.has_gauss_spare = true;
  return radius * std::cos(angle);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) {
    perm[i] = i;
  }
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(next_below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

Rng::State Rng::save_state() const {
  return state_;
}

void Rng::restore_state(const State& state) {
  state_ = state;
}

}  // namespace textrefiner
