#include "gcrf/crf.hpp"

#include <cassert>
#include <fstream>
#include <sstream>

namespace gcrf {

namespace {

void check_finite_or_neg_inf(double v, const char* what) {
  if (std::isnan(v)) throw std::invalid_argument(std::string(what) + ": NaN log-factor");
  if (v == std::numeric_limits<double>::infinity())
    throw std::invalid_argument(std::string(what) + ": +inf log-factor");
}

nlohmann::json factor_to_json(double v) {
  if (v == kNegInf) return "-inf";
  return v;
}

double factor_from_json(const nlohmann::json& j) {
  if (j.is_null()) return kNegInf;
  if (j.is_string()) {
    if (j.get<std::string>() == "-inf") return kNegInf;
    throw std::invalid_argument("PotentialTable: unexpected string factor '" +
                                j.get<std::string>() + "'");
  }
  return j.get<double>();
}

Matrix matrix_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols,
                        const char* key) {
  if (!j.is_array() || j.size() != rows)
    throw std::invalid_argument(std::string("PotentialTable: '") + key + "' has wrong row count");
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw std::invalid_argument(std::string("PotentialTable: '") + key +
                                  "' has wrong column count");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = factor_from_json(j[r][c]);
  }
  return m;
}

}  // namespace

void PotentialTable::validate() const {
  if (num_states == 0) throw std::invalid_argument("PotentialTable: K must be positive");
  if (seq_len == 0) throw std::invalid_argument("PotentialTable: T must be positive");
  if (log_transition.rows() != num_states || log_transition.cols() != num_states)
    throw std::invalid_argument("PotentialTable: log_transition must be K x K");
  if (log_emission.rows() != seq_len || log_emission.cols() != num_states)
    throw std::invalid_argument("PotentialTable: log_emission must be T x K");
  if (log_initial.size() != num_states)
    throw std::invalid_argument("PotentialTable: log_initial must have K entries");
  for (double v : log_transition.data()) check_finite_or_neg_inf(v, "log_transition");
  for (double v : log_emission.data()) check_finite_or_neg_inf(v, "log_emission");
  for (double v : log_initial) check_finite_or_neg_inf(v, "log_initial");
}

void PotentialTable::shift_step(std::size_t t, double c) {
  for (double& v : log_emission.row(t)) v += c;
}

void to_json(nlohmann::json& j, const PotentialTable& pot) {
  auto mat = [](const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (double v : m.row(r)) row.push_back(factor_to_json(v));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  nlohmann::json init = nlohmann::json::array();
  for (double v : pot.log_initial) init.push_back(factor_to_json(v));
  j = nlohmann::json{{"K", pot.num_states},
                     {"T", pot.seq_len},
                     {"log_transition", mat(pot.log_transition)},
                     {"log_emission", mat(pot.log_emission)},
                     {"log_initial", std::move(init)}};
}

void from_json(const nlohmann::json& j, PotentialTable& pot) {
  for (const char* key : {"K", "T", "log_transition", "log_emission", "log_initial"})
    if (!j.contains(key))
      throw std::invalid_argument(std::string("PotentialTable: missing key '") + key + "'");
  const auto K = j.at("K").get<std::size_t>();
  const auto T = j.at("T").get<std::size_t>();
  PotentialTable out(K, T);
  out.log_transition = matrix_from_json(j.at("log_transition"), K, K, "log_transition");
  out.log_emission = matrix_from_json(j.at("log_emission"), T, K, "log_emission");
  const auto& init = j.at("log_initial");
  if (!init.is_array() || init.size() != K)
    throw std::invalid_argument("PotentialTable: 'log_initial' must have K entries");
  for (std::size_t i = 0; i < K; ++i) out.log_initial[i] = factor_from_json(init[i]);
  out.validate();
  pot = std::move(out);
}

PotentialTable read_potential_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open potential table '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed potential table '" + path + "': " + e.what());
  }
  try {
    return j.get<PotentialTable>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed potential table '" + path + "': " + e.what());
  }
}

void write_potential_table(const std::string& path, const PotentialTable& pot) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write potential table '" + path + "'");
  out << nlohmann::json(pot).dump(2) << "\n";
}

std::size_t ExactPosterior::index_of(const HardPath& path) const {
  std::size_t idx = 0;
  for (std::size_t s : path) idx = idx * num_states + s;
  return idx;
}

void check_path(const PotentialTable& pot, const HardPath& path) {
  if (path.size() != pot.seq_len)
    throw std::invalid_argument("path length " + std::to_string(path.size()) +
                                " does not match T=" + std::to_string(pot.seq_len));
  for (std::size_t s : path)
    if (s >= pot.num_states) throw std::invalid_argument("path state out of range");
}

ForwardTrellis forward(const PotentialTable& pot) {
  const std::size_t K = pot.num_states, T = pot.seq_len;
  ForwardTrellis out;
  out.log_alpha = Matrix(T, K);
  for (std::size_t j = 0; j < K; ++j)
    out.log_alpha(0, j) = pot.log_initial[j] + pot.log_emission(0, j);
  std::vector<double> scratch(K);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      for (std::size_t i = 0; i < K; ++i)
        scratch[i] = out.log_alpha(t - 1, i) + pot.log_transition(i, j);
      out.log_alpha(t, j) = pot.log_emission(t, j) + logsumexp(scratch);
    }
  }
  out.log_Z = logsumexp(out.log_alpha.row(T - 1));
  assert(!std::isnan(out.log_Z));
  return out;
}

BackwardTrellis backward(const PotentialTable& pot) {
  const std::size_t K = pot.num_states, T = pot.seq_len;
  BackwardTrellis out;
  out.log_beta = Matrix(T, K, 0.0);
  std::vector<double> scratch(K);
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j)
        scratch[j] = pot.log_transition(i, j) + pot.log_emission(t + 1, j) +
                     out.log_beta(t + 1, j);
      out.log_beta(t, i) = logsumexp(scratch);
    }
  }
  return out;
}

double path_score(const PotentialTable& pot, const HardPath& path) {
  check_path(pot, path);
  double s = pot.log_initial[path[0]] + pot.log_emission(0, path[0]);
  for (std::size_t t = 1; t < path.size(); ++t)
    s += pot.log_transition(path[t - 1], path[t]) + pot.log_emission(t, path[t]);
  return s;
}

double path_log_prob(const PotentialTable& pot, const ForwardTrellis& trellis,
                     const HardPath& path) {
  return path_score(pot, path) - trellis.log_Z;
}

double path_log_prob(const PotentialTable& pot, const HardPath& path) {
  check_path(pot, path);
  return path_log_prob(pot, forward(pot), path);
}

Matrix marginals(const PotentialTable& pot) {
  const auto fw = forward(pot);
  if (fw.log_Z == kNegInf) throw std::domain_error("marginals: table has zero partition");
  const auto bw = backward(pot);
  Matrix out(pot.seq_len, pot.num_states);
  for (std::size_t t = 0; t < pot.seq_len; ++t)
    for (std::size_t i = 0; i < pot.num_states; ++i)
      out(t, i) = std::exp(fw.log_alpha(t, i) + bw.log_beta(t, i) - fw.log_Z);
  return out;
}

double entropy(const PotentialTable& pot) { return entropy(pot, forward(pot)); }

double entropy(const PotentialTable& pot, const ForwardTrellis& fw) {
  const std::size_t K = pot.num_states, T = pot.seq_len;
  if (fw.log_Z == kNegInf) throw std::domain_error("entropy: table has zero partition");
  // H_t(j): entropy of z_{1:t-1} given z_t = j.
  std::vector<double> H(K, 0.0), next(K);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      const double denom = fw.log_alpha(t + 1, j);
      double h = 0.0;
      if (denom != kNegInf) {
        for (std::size_t i = 0; i < K; ++i) {
          const double log_w = fw.log_alpha(t, i) + pot.log_transition(i, j) +
                               pot.log_emission(t + 1, j) - denom;
          if (log_w == kNegInf) continue;
          h += std::exp(log_w) * (H[i] - log_w);
        }
      }
      next[j] = h;
    }
    H.swap(next);
  }
  double out = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    const double log_p = fw.log_alpha(T - 1, j) - fw.log_Z;
    if (log_p == kNegInf) continue;
    out += std::exp(log_p) * (H[j] - log_p);
  }
  return out;
}

HardPath viterbi(const PotentialTable& pot) {
  const std::size_t K = pot.num_states, T = pot.seq_len;
  Matrix score(T, K);
  std::vector<std::size_t> back(T * K, 0);
  for (std::size_t j = 0; j < K; ++j) score(0, j) = pot.log_initial[j] + pot.log_emission(0, j);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t i = 0; i < K; ++i) {
      std::size_t best = 0;
      double best_v = score(t - 1, 0) + pot.log_transition(0, i);
      for (std::size_t j = 1; j < K; ++j) {
        const double v = score(t - 1, j) + pot.log_transition(j, i);
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      score(t, i) = best_v + pot.log_emission(t, i);
      back[t * K + i] = best;
    }
  }
  HardPath path(T);
  path[T - 1] = argmax(score.row(T - 1));
  for (std::size_t t = T - 1; t > 0; --t) path[t - 1] = back[t * K + path[t]];
  return path;
}

std::size_t path_count(std::size_t K, std::size_t T) {
  std::size_t n = 1;
  for (std::size_t t = 0; t < T; ++t) {
    if (n > std::numeric_limits<std::size_t>::max() / K)
      return std::numeric_limits<std::size_t>::max();
    n *= K;
  }
  return n;
}

HardPath decode_path(std::size_t index, std::size_t K, std::size_t T) {
  HardPath path(T);
  for (std::size_t t = T; t-- > 0;) {
    path[t] = index % K;
    index /= K;
  }
  return path;
}

ExactPosterior enumerate_posterior(const PotentialTable& pot, std::size_t cap) {
  pot.validate();
  const std::size_t n = path_count(pot.num_states, pot.seq_len);
  if (n > cap) {
    std::ostringstream msg;
    msg << "enumerate_posterior: K^T=" << pot.num_states << "^" << pot.seq_len
        << " exceeds the enumeration cap of " << cap
        << " paths; use oracle-scale inputs (small K and T)";
    throw std::length_error(msg.str());
  }
  ExactPosterior post;
  post.num_states = pot.num_states;
  post.seq_len = pot.seq_len;
  post.paths.reserve(n);
  std::vector<double> scores(n);
  for (std::size_t k = 0; k < n; ++k) {
    post.paths.push_back(decode_path(k, pot.num_states, pot.seq_len));
    scores[k] = path_score(pot, post.paths.back());
  }
  const double log_z = logsumexp(scores);
  if (log_z == kNegInf) throw std::domain_error("enumerate_posterior: every path is forbidden");
  post.probs.resize(n);
  for (std::size_t k = 0; k < n; ++k) post.probs[k] = std::exp(scores[k] - log_z);
  return post;
}

Matrix posterior_marginals(const ExactPosterior& post) {
  Matrix out(post.seq_len, post.num_states);
  for (std::size_t k = 0; k < post.paths.size(); ++k)
    for (std::size_t t = 0; t < post.seq_len; ++t) out(t, post.paths[k][t]) += post.probs[k];
  return out;
}

double posterior_entropy(const ExactPosterior& post) {
  double h = 0.0;
  for (double p : post.probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

HardPath posterior_argmax(const ExactPosterior& post) {
  return post.paths[argmax(post.probs)];
}

}  // namespace gcrf
