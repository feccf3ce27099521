#include "gcrf/sampling.hpp"

#include <algorithm>
#include <cassert>

namespace gcrf {

double GumbelNoiseStream::draw() {
  double g = 0.0;
  if (zero_) {
    g = 0.0;
  } else if (replay_) {
    if (replay_pos_ >= replay_->size())
      throw std::out_of_range("GumbelNoiseStream: replay buffer exhausted");
    g = (*replay_)[replay_pos_++];
  } else {
    const double u = std::clamp(rng_.uniform(), kClamp, 1.0 - kClamp);
    g = -std::log(-std::log(u));
  }
  if (sink_) sink_->push_back(g);
  return g;
}

std::vector<double> GumbelNoiseStream::draw_vector(std::size_t n) {
  std::vector<double> out(n);
  for (double& g : out) g = draw();
  return out;
}

namespace {

void require_tau(double tau, const char* who) {
  if (!(tau > 0.0)) throw std::invalid_argument(std::string(who) + ": tau must be positive");
}

std::vector<double> perturbed_logits(std::span<const double> log_pi, GumbelNoiseStream& noise) {
  bool any_finite = false;
  for (double v : log_pi) any_finite = any_finite || v != kNegInf;
  if (!any_finite) throw std::invalid_argument("gumbel_max: every log-probability is -inf");
  std::vector<double> out(log_pi.begin(), log_pi.end());
  for (double& v : out) v += noise.draw();
  return out;
}

}  // namespace

std::size_t gumbel_max(std::span<const double> log_pi, GumbelNoiseStream& noise) {
  return argmax(perturbed_logits(log_pi, noise));
}

GumbelSoftmaxSample gumbel_softmax(std::span<const double> log_pi, GumbelNoiseStream& noise,
                                   double tau) {
  require_tau(tau, "gumbel_softmax");
  const auto logits = perturbed_logits(log_pi, noise);
  return {softmax(logits, tau), argmax(logits)};
}

std::vector<double> backward_conditional(const PotentialTable& pot,
                                         const ForwardTrellis& trellis, std::size_t t,
                                         std::size_t next) {
  const std::size_t K = pot.num_states;
  std::vector<double> logits(K);
  for (std::size_t i = 0; i < K; ++i) {
    logits[i] = trellis.log_alpha(t, i);
    if (t + 1 < pot.seq_len) logits[i] += pot.log_transition(i, next);
  }
  const double norm = logsumexp(logits);
  for (double& v : logits) v -= norm;
  return logits;
}

HardPath ffbs(const PotentialTable& pot, const ForwardTrellis& trellis,
              GumbelNoiseStream& noise) {
  const std::size_t T = pot.seq_len;
  HardPath path(T);
  std::size_t next = 0;
  for (std::size_t t = T; t-- > 0;) {
    path[t] = gumbel_max(backward_conditional(pot, trellis, t, next), noise);
    next = path[t];
  }
  return path;
}

RelaxedPath gumbelized_ffbs(const PotentialTable& pot, const ForwardTrellis& trellis,
                            GumbelNoiseStream& noise, double tau) {
  require_tau(tau, "gumbelized_ffbs");
  const std::size_t T = pot.seq_len, K = pot.num_states;
  RelaxedPath out{HardPath(T), Matrix(T, K), tau};
  std::size_t next = 0;
  for (std::size_t t = T; t-- > 0;) {
    auto sample = gumbel_softmax(backward_conditional(pot, trellis, t, next), noise, tau);
    std::copy(sample.soft.begin(), sample.soft.end(), out.soft.row(t).begin());
    out.hard[t] = sample.hard;
    next = sample.hard;
  }
  return out;
}

PotentialTable perturb_emissions(const PotentialTable& pot, GumbelNoiseStream& noise) {
  PotentialTable out = pot;
  for (std::size_t t = pot.seq_len; t-- > 0;)
    for (double& v : out.log_emission.row(t)) v += noise.draw();
  return out;
}

HardPath perturb_and_map(const PotentialTable& pot, GumbelNoiseStream& noise,
                         PerturbOptions options) {
  PotentialTable perturbed = perturb_emissions(pot, noise);
  if (!options.perturb_transitions) return viterbi(perturbed);

  // Per-step transition copies, drawn after the emission noise, back to front.
  const std::size_t K = pot.num_states, T = pot.seq_len;
  std::vector<Matrix> trans(T);
  for (std::size_t t = T; t-- > 1;) {
    trans[t] = pot.log_transition;
    for (double& v : trans[t].data()) v += noise.draw();
  }
  Matrix score(T, K);
  std::vector<std::size_t> back(T * K, 0);
  for (std::size_t j = 0; j < K; ++j)
    score(0, j) = perturbed.log_initial[j] + perturbed.log_emission(0, j);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t i = 0; i < K; ++i) {
      std::size_t best = 0;
      double best_v = score(t - 1, 0) + trans[t](0, i);
      for (std::size_t j = 1; j < K; ++j) {
        const double v = score(t - 1, j) + trans[t](j, i);
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      score(t, i) = best_v + perturbed.log_emission(t, i);
      back[t * K + i] = best;
    }
  }
  HardPath path(T);
  path[T - 1] = argmax(score.row(T - 1));
  for (std::size_t t = T - 1; t > 0; --t) path[t - 1] = back[t * K + path[t]];
  return path;
}

RelaxedViterbiTrellis relaxed_viterbi_trellis(const PotentialTable& pot, double tau) {
  require_tau(tau, "relaxed_viterbi");
  const std::size_t K = pot.num_states, T = pot.seq_len;
  RelaxedViterbiTrellis out{Matrix(T, K), std::vector<Matrix>(T)};
  for (std::size_t j = 0; j < K; ++j) out.score(0, j) = pot.log_initial[j] + pot.log_emission(0, j);
  std::vector<double> cand(K);
  for (std::size_t t = 1; t < T; ++t) {
    out.back[t] = Matrix(K, K);
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) cand[j] = out.score(t - 1, j) + pot.log_transition(j, i);
      out.score(t, i) = cand[argmax(cand)] + pot.log_emission(t, i);
      const auto w = softmax(cand, tau);
      std::copy(w.begin(), w.end(), out.back[t].row(i).begin());
    }
  }
  return out;
}

RelaxedPath relaxed_viterbi(const PotentialTable& pot, double tau) {
  const auto trellis = relaxed_viterbi_trellis(pot, tau);
  const std::size_t K = pot.num_states, T = pot.seq_len;
  RelaxedPath out{HardPath(T), Matrix(T, K), tau};
  const auto last = softmax(trellis.score.row(T - 1), tau);
  std::copy(last.begin(), last.end(), out.soft.row(T - 1).begin());
  out.hard[T - 1] = argmax(trellis.score.row(T - 1));
  std::vector<double> cand(K);
  for (std::size_t t = T - 1; t > 0; --t) {
    const std::size_t next = out.hard[t];
    auto soft = trellis.back[t].row(next);
    std::copy(soft.begin(), soft.end(), out.soft.row(t - 1).begin());
    // Hard back-pointer from the untempered candidates, matching viterbi().
    for (std::size_t j = 0; j < K; ++j)
      cand[j] = trellis.score(t - 1, j) + pot.log_transition(j, next);
    out.hard[t - 1] = argmax(cand);
  }
  return out;
}

double max_onehot_deviation(const RelaxedPath& path) {
  double dev = 0.0;
  for (std::size_t t = 0; t < path.hard.size(); ++t) {
    const auto row = path.soft.row(t);
    for (std::size_t i = 0; i < row.size(); ++i)
      dev = std::max(dev, std::abs(row[i] - (i == path.hard[t] ? 1.0 : 0.0)));
  }
  return dev;
}

}  // namespace gcrf
