#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace gcrf {

// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

// Seeded generator with platform-independent draws. Standard library
// distributions are avoided because their output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller.
  double normal();
  std::size_t uniform_index(std::size_t n);
  // Inverse-CDF draw from unnormalized nonnegative weights.
  std::size_t categorical(std::span<const double> weights);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

}  // namespace gcrf
