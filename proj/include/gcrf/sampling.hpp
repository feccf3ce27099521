#pragma once

// Samplers over a linear-chain CRF: exact forward-filtering backward-sampling
// (FFBS), its Gumbel-Softmax relaxation, and Perturb-and-MAP with relaxed
// Viterbi back-tracking.
//
// Noise layout. Every sampler here consumes one K-vector of standard Gumbel
// noise per position, drawn back to front (position T-1 first, position 0
// last). FFBS, Gumbelized FFBS, and Perturb-and-MAP therefore see the same
// noise under a shared seed, and FFBS and Gumbelized FFBS return the same hard
// path.

#include <cstdint>
#include <optional>
#include <vector>

#include "gcrf/crf.hpp"
#include "gcrf/random.hpp"

namespace gcrf {

class GumbelNoiseStream {
 public:
  static constexpr double kClamp = 1e-12;

  explicit GumbelNoiseStream(std::uint64_t seed) : rng_(seed) {}

  // Stream for worker `index` derived from a master seed.
  static GumbelNoiseStream derived(std::uint64_t master_seed, std::uint64_t index) {
    return GumbelNoiseStream(mix_seed(master_seed, index));
  }
  // Every draw returns exactly 0.
  static GumbelNoiseStream zeros() {
    GumbelNoiseStream s(0);
    s.zero_ = true;
    return s;
  }
  // Replays `values` in order, then throws std::out_of_range.
  static GumbelNoiseStream replay(std::vector<double> values) {
    GumbelNoiseStream s(0);
    s.replay_ = std::move(values);
    return s;
  }

  // g = -log(-log U) with U clamped into [1e-12, 1 - 1e-12].
  double draw();
  std::vector<double> draw_vector(std::size_t n);

  // Appends every value handed out to `sink` (nullptr disables recording).
  void record_into(std::vector<double>* sink) { sink_ = sink; }

 private:
  Rng rng_;
  bool zero_ = false;
  std::optional<std::vector<double>> replay_;
  std::size_t replay_pos_ = 0;
  std::vector<double>* sink_ = nullptr;
};

struct GumbelSoftmaxSample {
  std::vector<double> soft;
  std::size_t hard = 0;
};

struct RelaxedPath {
  HardPath hard;
  Matrix soft;  // T x K, row-stochastic
  double tau = 1.0;
};

// Relaxed Viterbi tables. back[t](i, j) is the tempered softmax weight of
// predecessor j for state i at position t; back[0] is unused and empty.
struct RelaxedViterbiTrellis {
  Matrix score;  // T x K max-scores
  std::vector<Matrix> back;
};

struct PerturbOptions {
  bool perturb_transitions = false;
};

std::size_t gumbel_max(std::span<const double> log_pi, GumbelNoiseStream& noise);
GumbelSoftmaxSample gumbel_softmax(std::span<const double> log_pi, GumbelNoiseStream& noise,
                                   double tau);

// Normalized log p(z_t | z_{t+1} = next, x). For t = T-1 `next` is ignored and
// the result is log p(z_T | x).
std::vector<double> backward_conditional(const PotentialTable& pot,
                                         const ForwardTrellis& trellis, std::size_t t,
                                         std::size_t next);

HardPath ffbs(const PotentialTable& pot, const ForwardTrellis& trellis,
              GumbelNoiseStream& noise);
RelaxedPath gumbelized_ffbs(const PotentialTable& pot, const ForwardTrellis& trellis,
                            GumbelNoiseStream& noise, double tau);

// Adds Gumbel noise to every emission entry (and, optionally, to a per-step
// copy of the transitions) and returns the Viterbi path.
HardPath perturb_and_map(const PotentialTable& pot, GumbelNoiseStream& noise,
                         PerturbOptions options = {});
// Emission-only perturbation in the shared noise layout.
PotentialTable perturb_emissions(const PotentialTable& pot, GumbelNoiseStream& noise);

RelaxedViterbiTrellis relaxed_viterbi_trellis(const PotentialTable& pot, double tau);
RelaxedPath relaxed_viterbi(const PotentialTable& pot, double tau);

// Max-norm distance of each soft row from the one-hot of its hard state.
double max_onehot_deviation(const RelaxedPath& path);

}  // namespace gcrf
