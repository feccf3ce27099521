#pragma once

// Synthetic sequences from a seeded ground-truth HMM whose exact likelihood is
// available through the forward algorithm.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "gcrf/crf.hpp"
#include "gcrf/vae.hpp"

namespace gcrf {

struct HmmGenerator {
  std::size_t num_states = 0;  // K
  std::size_t vocab = 0;       // V
  Matrix transition;           // K x K, rows sum to one
  Matrix emission;             // K x V, rows sum to one
  std::vector<double> initial;  // K, the stationary distribution of `transition`

  void validate() const;
  // The CRF whose partition function is p(x): log A, log B[:, x_t], log pi.
  PotentialTable posterior_table(const vae::Sentence& x) const;
  double log_likelihood(const vae::Sentence& x) const;
  // Mean -log p(x) over `data`.
  double mean_nll(const std::vector<vae::Sentence>& data) const;
};

void to_json(nlohmann::json& j, const HmmGenerator& g);
void from_json(const nlohmann::json& j, HmmGenerator& g);

// Stationary distribution of a row-stochastic matrix by power iteration.
std::vector<double> stationary_distribution(const Matrix& transition);

struct HmmDatasetSpec {
  std::size_t num_states = 5;
  std::size_t vocab = 20;
  std::size_t seq_len = 10;
  std::size_t train_size = 2000;
  std::size_t val_size = 200;
  std::size_t test_size = 200;
  double emission_mass = 0.9;  // probability a state emits one of its own words
  std::uint64_t seed = 1;
};

struct HmmDataset {
  HmmDatasetSpec spec;
  HmmGenerator generator;
  std::vector<vae::Sentence> train, val, test;
  std::vector<HardPath> train_states;  // hidden states of the training split
};

// Word v belongs to state v % K; each state puts `emission_mass` on its own
// words. Splits use streams derived from the seed.
HmmGenerator make_hmm_generator(std::size_t K, std::size_t V, double emission_mass,
                                std::uint64_t seed);
HmmDataset generate_hmm_dataset(const HmmDatasetSpec& spec);

// One sequence of length T from `g`, returning words and hidden states.
std::pair<vae::Sentence, HardPath> sample_hmm(const HmmGenerator& g, std::size_t T, Rng& rng);

void to_json(nlohmann::json& j, const HmmDataset& d);

}  // namespace gcrf
