#include "gcrf/dataset.hpp"

#include <cmath>
#include <stdexcept>

namespace gcrf {

namespace {

void require_stochastic(const Matrix& m, const char* name) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (double v : m.row(r)) {
      if (!(v >= 0.0) || !std::isfinite(v))
        throw std::invalid_argument(std::string(name) + ": entries must be finite probabilities");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(name) + ": rows must sum to one");
  }
}

std::vector<double> normalized(std::vector<double> w) {
  double s = 0.0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return w;
}

}  // namespace

void HmmGenerator::validate() const {
  if (num_states == 0 || vocab == 0) throw std::invalid_argument("hmm: K and V must be positive");
  if (transition.rows() != num_states || transition.cols() != num_states)
    throw std::invalid_argument("hmm: transition must be K x K");
  if (emission.rows() != num_states || emission.cols() != vocab)
    throw std::invalid_argument("hmm: emission must be K x V");
  if (initial.size() != num_states) throw std::invalid_argument("hmm: initial must have K entries");
  require_stochastic(transition, "hmm transition");
  require_stochastic(emission, "hmm emission");
  require_stochastic(Matrix(1, num_states, initial), "hmm initial");
}

PotentialTable HmmGenerator::posterior_table(const vae::Sentence& x) const {
  const std::size_t K = num_states, T = x.size();
  PotentialTable pot(K, T);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) pot.log_transition(i, j) = std::log(transition(i, j));
  for (std::size_t t = 0; t < T; ++t) {
    if (x[t] >= vocab) throw std::invalid_argument("hmm: word id out of vocabulary");
    for (std::size_t k = 0; k < K; ++k) pot.log_emission(t, k) = std::log(emission(k, x[t]));
  }
  for (std::size_t k = 0; k < K; ++k) pot.log_initial[k] = std::log(initial[k]);
  return pot;
}

double HmmGenerator::log_likelihood(const vae::Sentence& x) const {
  return forward(posterior_table(x)).log_Z;
}

double HmmGenerator::mean_nll(const std::vector<vae::Sentence>& data) const {
  if (data.empty()) return 0.0;
  CompensatedSum s;
  for (const auto& x : data) s.add(-log_likelihood(x));
  return s.value() / static_cast<double>(data.size());
}

void to_json(nlohmann::json& j, const HmmGenerator& g) {
  auto rows = [](const Matrix& m) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) out.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return out;
  };
  j = nlohmann::json{{"num_states", g.num_states},
                     {"vocab", g.vocab},
                     {"transition", rows(g.transition)},
                     {"emission", rows(g.emission)},
                     {"initial", g.initial}};
}

void from_json(const nlohmann::json& j, HmmGenerator& g) {
  g.num_states = j.at("num_states").get<std::size_t>();
  g.vocab = j.at("vocab").get<std::size_t>();
  auto read = [&](const char* key, std::size_t R, std::size_t C) {
    const auto rows = j.at(key).get<std::vector<std::vector<double>>>();
    if (rows.size() != R) throw std::invalid_argument(std::string("hmm: bad row count in ") + key);
    Matrix m(R, C);
    for (std::size_t r = 0; r < R; ++r) {
      if (rows[r].size() != C) throw std::invalid_argument(std::string("hmm: bad column count in ") + key);
      for (std::size_t c = 0; c < C; ++c) m(r, c) = rows[r][c];
    }
    return m;
  };
  g.transition = read("transition", g.num_states, g.num_states);
  g.emission = read("emission", g.num_states, g.vocab);
  g.initial = j.at("initial").get<std::vector<double>>();
  g.validate();
}

std::vector<double> stationary_distribution(const Matrix& transition) {
  const std::size_t K = transition.rows();
  std::vector<double> pi(K, 1.0 / static_cast<double>(K)), next(K);
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) next[j] += pi[i] * transition(i, j);
    next = normalized(next);
    double diff = 0.0;
    for (std::size_t k = 0; k < K; ++k) diff = std::max(diff, std::abs(next[k] - pi[k]));
    pi.swap(next);
    if (diff < 1e-16) break;
  }
  return pi;
}

HmmGenerator make_hmm_generator(std::size_t K, std::size_t V, double emission_mass, std::uint64_t seed) {
  if (K == 0 || V == 0) throw std::invalid_argument("hmm: K and V must be positive");
  if (!(emission_mass > 0.0 && emission_mass <= 1.0))
    throw std::invalid_argument("hmm: emission_mass must lie in (0, 1]");
  Rng rng(seed);
  HmmGenerator g;
  g.num_states = K;
  g.vocab = V;
  g.transition = Matrix(K, K);
  for (std::size_t i = 0; i < K; ++i) {
    std::vector<double> w(K);
    for (double& v : w) v = std::exp(rng.normal());
    w = normalized(w);
    for (std::size_t j = 0; j < K; ++j) g.transition(i, j) = w[j];
  }
  g.emission = Matrix(K, V);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> own(V, 0.0), other(V, 0.0);
    double own_total = 0.0, other_total = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const double w = std::exp(0.5 * rng.normal());
      if (v % K == k) {
        own[v] = w;
        own_total += w;
      } else {
        other[v] = w;
        other_total += w;
      }
    }
    // States without own words spread all their mass over the rest.
    const double mass = own_total > 0.0 ? (other_total > 0.0 ? emission_mass : 1.0) : 0.0;
    for (std::size_t v = 0; v < V; ++v)
      g.emission(k, v) = own[v] > 0.0 ? mass * own[v] / own_total : (1.0 - mass) * other[v] / other_total;
  }
  g.initial = stationary_distribution(g.transition);
  g.validate();
  return g;
}

std::pair<vae::Sentence, HardPath> sample_hmm(const HmmGenerator& g, std::size_t T, Rng& rng) {
  vae::Sentence x(T);
  HardPath z(T);
  for (std::size_t t = 0; t < T; ++t) {
    z[t] = t == 0 ? rng.categorical(g.initial) : rng.categorical(g.transition.row(z[t - 1]));
    x[t] = rng.categorical(g.emission.row(z[t]));
  }
  return {x, z};
}

HmmDataset generate_hmm_dataset(const HmmDatasetSpec& spec) {
  if (spec.seq_len == 0) throw std::invalid_argument("hmm dataset: seq_len must be positive");
  HmmDataset d;
  d.spec = spec;
  d.generator = make_hmm_generator(spec.num_states, spec.vocab, spec.emission_mass, mix_seed(spec.seed, 0));
  auto draw = [&](std::size_t n, std::uint64_t stream, std::vector<vae::Sentence>& out,
                  std::vector<HardPath>* states) {
    Rng rng(mix_seed(spec.seed, stream));
    for (std::size_t i = 0; i < n; ++i) {
      auto [x, z] = sample_hmm(d.generator, spec.seq_len, rng);
      out.push_back(std::move(x));
      if (states) states->push_back(std::move(z));
    }
  };
  draw(spec.train_size, 1, d.train, &d.train_states);
  draw(spec.val_size, 2, d.val, nullptr);
  draw(spec.test_size, 3, d.test, nullptr);
  return d;
}

void to_json(nlohmann::json& j, const HmmDataset& d) {
  j = nlohmann::json{{"num_states", d.spec.num_states},
                     {"vocab", d.spec.vocab},
                     {"seq_len", d.spec.seq_len},
                     {"seed", d.spec.seed},
                     {"emission_mass", d.spec.emission_mass},
                     {"generator", d.generator},
                     {"train", d.train},
                     {"train_states", d.train_states},
                     {"val", d.val},
                     {"test", d.test}};
}

}  // namespace gcrf
