#include "gcrf/crf_tape.hpp"

namespace gcrf {

using ad::Var;

TapePotentials record_potentials(ad::Tape& tape, const PotentialTable& pot) {
  pot.validate();
  return {pot.num_states, pot.seq_len, tape.leaf(pot.log_transition), tape.leaf(pot.log_emission),
          tape.leaf(Matrix::row_vector(pot.log_initial))};
}

PotentialTable table_values(const TapePotentials& pot) {
  PotentialTable out(pot.num_states, pot.seq_len);
  out.log_transition = pot.transition.to_matrix();
  out.log_emission = pot.emission.to_matrix();
  out.log_initial = pot.initial.value();
  return out;
}

std::size_t potential_param_count(std::size_t K, std::size_t T) { return K * K + T * K + K; }

std::vector<double> flatten_potentials(const PotentialTable& pot) {
  std::vector<double> flat;
  flat.reserve(potential_param_count(pot.num_states, pot.seq_len));
  flat.insert(flat.end(), pot.log_transition.data().begin(), pot.log_transition.data().end());
  flat.insert(flat.end(), pot.log_emission.data().begin(), pot.log_emission.data().end());
  flat.insert(flat.end(), pot.log_initial.begin(), pot.log_initial.end());
  return flat;
}

PotentialTable unflatten_potentials(std::span<const double> flat, std::size_t K, std::size_t T) {
  if (flat.size() != potential_param_count(K, T))
    throw std::invalid_argument("unflatten_potentials: wrong parameter count");
  PotentialTable pot(K, T);
  auto it = flat.begin();
  std::copy(it, it + K * K, pot.log_transition.data().begin());
  it += K * K;
  std::copy(it, it + T * K, pot.log_emission.data().begin());
  it += T * K;
  std::copy(it, it + K, pot.log_initial.begin());
  return pot;
}

std::vector<double> flat_gradient(const ad::Tape& tape, const TapePotentials& pot) {
  std::vector<double> flat = tape.grad_vector(pot.transition);
  const auto e = tape.grad_vector(pot.emission);
  const auto i = tape.grad_vector(pot.initial);
  flat.insert(flat.end(), e.begin(), e.end());
  flat.insert(flat.end(), i.begin(), i.end());
  return flat;
}

TapeTrellis tape_forward(const TapePotentials& pot) {
  TapeTrellis out;
  const std::size_t K = pot.num_states;
  out.transition_t = ad::transpose(pot.transition);
  out.log_alpha.reserve(pot.seq_len);
  out.log_alpha.push_back(ad::add(pot.initial, ad::gather_row(pot.emission, 0)));
  for (std::size_t t = 1; t < pot.seq_len; ++t) {
    // Row j holds log_transition(i, j) + log_alpha_{t-1}(i) over i.
    Var scores = ad::add(out.transition_t, out.log_alpha.back());
    Var lse = ad::reshape(ad::logsumexp_row(scores), 1, K);
    out.log_alpha.push_back(ad::add(lse, ad::gather_row(pot.emission, t)));
  }
  out.log_Z = ad::logsumexp_row(out.log_alpha.back());
  return out;
}

Var tape_path_score(const TapePotentials& pot, const HardPath& path) {
  if (path.size() != pot.seq_len) throw std::invalid_argument("tape_path_score: length mismatch");
  Var s = ad::add(ad::pick(pot.initial, 0, path[0]), ad::pick(pot.emission, 0, path[0]));
  for (std::size_t t = 1; t < path.size(); ++t) {
    s = ad::add(s, ad::pick(pot.transition, path[t - 1], path[t]));
    s = ad::add(s, ad::pick(pot.emission, t, path[t]));
  }
  return s;
}

Var tape_path_log_prob(const TapePotentials& pot, const TapeTrellis& trellis,
                       const HardPath& path) {
  return ad::sub(tape_path_score(pot, path), trellis.log_Z);
}

Var tape_entropy(const TapePotentials& pot, const TapeTrellis& trellis) {
  ad::Tape& tape = pot.transition.tape();
  const std::size_t K = pot.num_states;
  Var ones = tape.constant(K, 1, std::vector<double>(K, 1.0));
  Var h = tape.constant(1, K, std::vector<double>(K, 0.0));
  for (std::size_t t = 0; t + 1 < pot.seq_len; ++t) {
    // Row j: log w(i, j) over predecessors i, a normalized distribution.
    Var log_w = ad::log_softmax_row(ad::add(trellis.transition_t, trellis.log_alpha[t]));
    Var w = ad::exp(log_w);
    Var weighted = ad::mul(w, ad::sub(log_w, h));  // w (log w - H_t(i))
    h = ad::scalar_scale(ad::reshape(ad::matmul(weighted, ones), 1, K), -1.0);
  }
  Var log_p = ad::log_softmax_row(trellis.log_alpha.back());
  return ad::sum(ad::mul(ad::exp(log_p), ad::sub(h, log_p)));
}

TapeRelaxedPath tape_gumbelized_ffbs(const TapePotentials& pot, const TapeTrellis& trellis,
                                     GumbelNoiseStream& noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbelized_ffbs: tau must be positive");
  ad::Tape& tape = pot.transition.tape();
  const std::size_t T = pot.seq_len, K = pot.num_states;
  TapeRelaxedPath out{HardPath(T), {}, tau};
  std::vector<Var> rows(T);
  std::size_t next = 0;
  for (std::size_t t = T; t-- > 0;) {
    Var logits = trellis.log_alpha[t];
    if (t + 1 < T) logits = ad::add(logits, ad::gather_row(trellis.transition_t, next));
    Var log_pi = ad::log_softmax_row(logits);
    Var perturbed = ad::add(log_pi, tape.constant(1, K, noise.draw_vector(K)));
    rows[t] = ad::softmax_with_temperature(perturbed, tau);
    out.hard[t] = argmax(perturbed.value());
    next = out.hard[t];
  }
  out.soft = ad::concat_rows(rows);
  return out;
}

TapePotentials tape_perturb_emissions(const TapePotentials& pot, GumbelNoiseStream& noise) {
  ad::Tape& tape = pot.transition.tape();
  const std::size_t T = pot.seq_len, K = pot.num_states;
  Matrix g(T, K);
  for (std::size_t t = T; t-- > 0;)
    for (double& v : g.row(t)) v = noise.draw();
  TapePotentials out = pot;
  out.emission = ad::add(pot.emission, tape.constant(g));
  return out;
}

TapeRelaxedPath tape_relaxed_viterbi(const TapePotentials& pot, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("relaxed_viterbi: tau must be positive");
  const std::size_t T = pot.seq_len, K = pot.num_states;
  Var trans_t = ad::transpose(pot.transition);
  std::vector<Var> score{ad::add(pot.initial, ad::gather_row(pot.emission, 0))};
  std::vector<Var> cand(T), back(T);
  for (std::size_t t = 1; t < T; ++t) {
    // Row i: score_{t-1}(j) + log_transition(j, i) over predecessors j.
    cand[t] = ad::add(trans_t, score.back());
    back[t] = ad::softmax_with_temperature(cand[t], tau);
    score.push_back(ad::add(ad::reshape(ad::max_row(cand[t]), 1, K), ad::gather_row(pot.emission, t)));
  }
  TapeRelaxedPath out{HardPath(T), {}, tau};
  std::vector<Var> rows(T);
  rows[T - 1] = ad::softmax_with_temperature(score.back(), tau);
  out.hard[T - 1] = argmax(score.back().value());
  for (std::size_t t = T - 1; t > 0; --t) {
    const std::size_t next = out.hard[t];
    rows[t - 1] = ad::gather_row(back[t], next);
    const auto& cv = cand[t].value();
    out.hard[t - 1] = argmax(std::span<const double>(cv.data() + next * K, K));
  }
  out.soft = ad::concat_rows(rows);
  return out;
}

Matrix onehot_matrix(const HardPath& path, std::size_t K) {
  Matrix m(path.size(), K, 0.0);
  for (std::size_t t = 0; t < path.size(); ++t) {
    if (path[t] >= K) throw std::invalid_argument("onehot: state out of range");
    m(t, path[t]) = 1.0;
  }
  return m;
}

Var onehot(ad::Tape& tape, const HardPath& path, std::size_t K) {
  return tape.constant(onehot_matrix(path, K));
}

}  // namespace gcrf
