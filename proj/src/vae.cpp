#include "gcrf/vae.hpp"

#include <chrono>
#include <fstream>
#include <numeric>
#include <thread>

namespace gcrf::vae {

using ad::Var;

namespace {

template <class P>
std::vector<Matrix*> matrices(P& p) {
  std::vector<Matrix*> out;
  P::visit(p, [&](const char*, Matrix& m) { out.push_back(&m); });
  return out;
}

template <class P>
std::vector<const Matrix*> matrices(const P& p) {
  std::vector<const Matrix*> out;
  P::visit(p, [&](const char*, const Matrix& m) { out.push_back(&m); });
  return out;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale) {
  Matrix m(r, c);
  if (scale != 0.0)
    for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

template <class P, class V>
V record_as(ad::Tape& tape, const P& params, bool leaves) {
  V vars;
  std::vector<Var*> out;
  V::visit(vars, [&](const char*, Var& v) { out.push_back(&v); });
  const auto in = matrices(params);
  for (std::size_t i = 0; i < in.size(); ++i) *out[i] = leaves ? tape.leaf(*in[i]) : tape.constant(*in[i]);
  return vars;
}

template <class P, class V>
P gradient_as(const ad::Tape& tape, const V& vars) {
  P out;
  std::vector<const Var*> in;
  V::visit(vars, [&](const char*, const Var& v) { in.push_back(&v); });
  const auto dst = matrices(out);
  for (std::size_t i = 0; i < in.size(); ++i) *dst[i] = tape.grad(*in[i]);
  return out;
}

template <class P>
std::size_t count_of(const P& p) {
  std::size_t n = 0;
  for (const auto* m : matrices(p)) n += m->size();
  return n;
}

template <class P>
std::vector<double> flatten_as(const P& p) {
  std::vector<double> out;
  out.reserve(count_of(p));
  for (const auto* m : matrices(p)) out.insert(out.end(), m->data().begin(), m->data().end());
  return out;
}

template <class P>
void unflatten_as(P& p, std::span<const double> flat) {
  if (flat.size() != count_of(p)) throw std::invalid_argument("unflatten: size mismatch");
  std::size_t k = 0;
  for (auto* m : matrices(p))
    for (double& v : m->data()) v = flat[k++];
}

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r)
    rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Matrix matrix_from(const nlohmann::json& j, const std::string& name) {
  try {
    const std::size_t R = j.at("rows").get<std::size_t>(), C = j.at("cols").get<std::size_t>();
    const auto& data = j.at("data");
    if (data.size() != R) throw std::invalid_argument("row count");
    Matrix m(R, C);
    for (std::size_t r = 0; r < R; ++r) {
      if (data[r].size() != C) throw std::invalid_argument("column count");
      for (std::size_t c = 0; c < C; ++c) m(r, c) = data[r][c].get<double>();
    }
    return m;
  } catch (const std::exception& e) {
    throw std::invalid_argument("parameter '" + name + "': " + e.what());
  }
}

template <class P>
nlohmann::json bundle_json(const P& p) {
  nlohmann::json j = nlohmann::json::object();
  P::visit(p, [&](const char* name, const Matrix& m) { j[name] = matrix_json(m); });
  return j;
}

template <class P>
void bundle_from(const nlohmann::json& j, P& p) {
  P::visit(p, [&](const char* name, Matrix& m) {
    if (!j.contains(name)) throw std::invalid_argument(std::string("missing parameter '") + name + "'");
    m = matrix_from(j.at(name), name);
  });
}

void require_shape(const Matrix& m, std::size_t r, std::size_t c, const char* name) {
  if (m.rows() != r || m.cols() != c)
    throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(r) + "x" +
                                std::to_string(c) + ", got " + std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()));
  for (double v : m.data())
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(name) + ": non-finite entry");
}

void check_sentence(const Sentence& x, std::size_t V) {
  if (x.empty()) throw std::invalid_argument("sentence is empty");
  for (auto w : x)
    if (w >= V) throw std::invalid_argument("word id " + std::to_string(w) + " out of vocabulary");
}

GenerativeVars constants(ad::Tape& tape, const GenerativeParams& theta) {
  return record_as<GenerativeParams, GenerativeVars>(tape, theta, false);
}

InferenceVars constants(ad::Tape& tape, const InferenceParams& phi) {
  return record_as<InferenceParams, InferenceVars>(tape, phi, false);
}

// Shared decoder loop; `state(t, state_log_probs)` returns the embedding of z_t
// and its log-probability term.
template <class StateFn>
Var decode(const GenerativeVars& theta, const Sentence& x, const DropMask& drop, StateFn&& state) {
  ad::Tape& tape = theta.word_embed.tape();
  const std::size_t d = theta.word_embed.cols(), h = theta.cell_recurrent.rows();
  check_sentence(x, theta.word_embed.rows());
  if (!drop.empty() && drop.size() != x.size())
    throw std::invalid_argument("joint_log_prob: dropout mask length mismatch");
  const Var zero_embed = tape.constant(Matrix(1, d));
  Var z_prev = zero_embed, h_prev = tape.constant(Matrix(1, h));
  Var total = tape.scalar_constant(0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    const bool dropped = !drop.empty() && drop[t];
    const Var x_prev = (t == 0 || dropped) ? zero_embed : ad::gather_row(theta.word_embed, x[t - 1]);
    const Var input = ad::concat_cols({z_prev, x_prev});
    const Var hidden = ad::tanh(ad::add(
        ad::add(ad::matmul(input, theta.cell_input), ad::matmul(h_prev, theta.cell_recurrent)),
        theta.cell_bias));
    const Var state_lp =
        ad::log_softmax_row(ad::add(ad::matmul(hidden, theta.state_head), theta.state_bias));
    const auto [z_embed, state_term] = state(t, state_lp);
    const Var word_logits = ad::add(ad::matmul(ad::concat_cols({z_embed, hidden}), theta.word_head),
                                    theta.word_bias);
    const Var word_term = ad::pick(ad::log_softmax_row(word_logits), 0, x[t]);
    total = ad::add(total, state_term);
    total = ad::add(total, word_term);
    z_prev = z_embed;
    h_prev = hidden;
  }
  return total;
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
}

template <class P>
void add_scaled(P& dst, const P& src, double scale) {
  auto d = matrices(dst);
  const auto s = matrices(src);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < d[i]->size(); ++k) d[i]->data()[k] += scale * s[i]->data()[k];
}

template <class P>
P zeros_like(const P& p) {
  P out;
  const auto src = matrices(p);
  const auto dst = matrices(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Matrix(src[i]->rows(), src[i]->cols());
  return out;
}

template <class P>
double squared_norm(const P& p) {
  double s = 0.0;
  for (const auto* m : matrices(p))
    for (double v : m->data()) s += v * v;
  return s;
}

template <class P>
bool all_finite(const P& p) {
  for (const auto* m : matrices(p))
    for (double v : m->data())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

GenerativeParams init_generative(const ModelDims& dims, Rng& rng, double scale) {
  const std::size_t K = dims.num_states, V = dims.vocab, d = dims.embed, h = dims.hidden;
  if (K == 0 || V == 0 || d == 0 || h == 0) throw std::invalid_argument("init_generative: zero dimension");
  GenerativeParams p;
  p.word_embed = random_matrix(V, d, rng, scale);
  p.state_embed = random_matrix(K, d, rng, scale);
  p.cell_input = random_matrix(2 * d, h, rng, scale);
  p.cell_recurrent = random_matrix(h, h, rng, scale);
  p.cell_bias = Matrix(1, h);
  p.state_head = random_matrix(h, K, rng, scale);
  p.state_bias = Matrix(1, K);
  p.word_head = random_matrix(d + h, V, rng, scale);
  p.word_bias = Matrix(1, V);
  return p;
}

InferenceParams init_inference(const ModelDims& dims, Rng& rng, double scale) {
  const std::size_t K = dims.num_states, V = dims.vocab, d = dims.embed, e = dims.encoder;
  if (K == 0 || V == 0 || d == 0 || e == 0) throw std::invalid_argument("init_inference: zero dimension");
  InferenceParams p;
  p.word_embed = random_matrix(V, d, rng, scale);
  p.enc_weight = random_matrix(3 * d, e, rng, scale);
  p.enc_bias = Matrix(1, e);
  p.emit_weight = random_matrix(e, K, rng, scale);
  p.emit_bias = Matrix(1, K);
  p.transition = random_matrix(K, K, rng, scale);
  p.initial = Matrix(1, K);
  return p;
}

ModelDims dims_of(const GenerativeParams& theta, const InferenceParams& phi) {
  ModelDims d;
  d.num_states = theta.state_embed.rows();
  d.vocab = theta.word_embed.rows();
  d.embed = theta.word_embed.cols();
  d.hidden = theta.cell_recurrent.rows();
  d.encoder = phi.enc_weight.cols();
  return d;
}

void validate(const GenerativeParams& p) {
  const std::size_t V = p.word_embed.rows(), d = p.word_embed.cols(), K = p.state_embed.rows(),
                    h = p.cell_recurrent.rows();
  if (V == 0 || d == 0 || K == 0 || h == 0) throw std::invalid_argument("generative params: zero dimension");
  require_shape(p.word_embed, V, d, "word_embed");
  require_shape(p.state_embed, K, d, "state_embed");
  require_shape(p.cell_input, 2 * d, h, "cell_input");
  require_shape(p.cell_recurrent, h, h, "cell_recurrent");
  require_shape(p.cell_bias, 1, h, "cell_bias");
  require_shape(p.state_head, h, K, "state_head");
  require_shape(p.state_bias, 1, K, "state_bias");
  require_shape(p.word_head, d + h, V, "word_head");
  require_shape(p.word_bias, 1, V, "word_bias");
}

void validate(const InferenceParams& p) {
  const std::size_t V = p.word_embed.rows(), d = p.word_embed.cols(), e = p.enc_weight.cols(),
                    K = p.transition.rows();
  if (V == 0 || d == 0 || e == 0 || K == 0) throw std::invalid_argument("inference params: zero dimension");
  require_shape(p.word_embed, V, d, "word_embed");
  require_shape(p.enc_weight, 3 * d, e, "enc_weight");
  require_shape(p.enc_bias, 1, e, "enc_bias");
  require_shape(p.emit_weight, e, K, "emit_weight");
  require_shape(p.emit_bias, 1, K, "emit_bias");
  require_shape(p.transition, K, K, "transition");
  require_shape(p.initial, 1, K, "initial");
}

GenerativeVars record(ad::Tape& tape, const GenerativeParams& theta) {
  return record_as<GenerativeParams, GenerativeVars>(tape, theta, true);
}
InferenceVars record(ad::Tape& tape, const InferenceParams& phi) {
  return record_as<InferenceParams, InferenceVars>(tape, phi, true);
}
GenerativeParams gradient(const ad::Tape& tape, const GenerativeVars& vars) {
  return gradient_as<GenerativeParams>(tape, vars);
}
InferenceParams gradient(const ad::Tape& tape, const InferenceVars& vars) {
  return gradient_as<InferenceParams>(tape, vars);
}

std::size_t param_count(const GenerativeParams& p) { return count_of(p); }
std::size_t param_count(const InferenceParams& p) { return count_of(p); }
std::vector<double> flatten(const GenerativeParams& p) { return flatten_as(p); }
std::vector<double> flatten(const InferenceParams& p) { return flatten_as(p); }
void unflatten(GenerativeParams& p, std::span<const double> flat) { unflatten_as(p, flat); }
void unflatten(InferenceParams& p, std::span<const double> flat) { unflatten_as(p, flat); }

void to_json(nlohmann::json& j, const GenerativeParams& p) { j = bundle_json(p); }
void from_json(const nlohmann::json& j, GenerativeParams& p) {
  bundle_from(j, p);
  validate(p);
}
void to_json(nlohmann::json& j, const InferenceParams& p) { j = bundle_json(p); }
void from_json(const nlohmann::json& j, InferenceParams& p) {
  bundle_from(j, p);
  validate(p);
}

DecoderStep decoder_step(const GenerativeVars& theta, Var z_prev_embed, Var x_prev_embed, Var h_prev,
                         Var z_embed) {
  const Var input = ad::concat_cols({z_prev_embed, x_prev_embed});
  const Var hidden = ad::tanh(ad::add(
      ad::add(ad::matmul(input, theta.cell_input), ad::matmul(h_prev, theta.cell_recurrent)),
      theta.cell_bias));
  const Var state_logits = ad::add(ad::matmul(hidden, theta.state_head), theta.state_bias);
  const Var word_logits =
      ad::add(ad::matmul(ad::concat_cols({z_embed, hidden}), theta.word_head), theta.word_bias);
  return {hidden, state_logits, word_logits};
}

Var joint_log_prob(const GenerativeVars& theta, const Sentence& x, Var z, const DropMask& drop) {
  const std::size_t K = theta.state_embed.rows();
  if (z.rows() != x.size() || z.cols() != K)
    throw std::invalid_argument("joint_log_prob: z is " + std::to_string(z.rows()) + "x" +
                                std::to_string(z.cols()) + ", expected " + std::to_string(x.size()) +
                                "x" + std::to_string(K));
  return decode(theta, x, drop, [&](std::size_t t, Var state_lp) {
    const Var row = ad::gather_row(z, t);
    return std::pair{ad::matmul(row, theta.state_embed), ad::sum(ad::mul(row, state_lp))};
  });
}

Var joint_log_prob(const GenerativeVars& theta, const Sentence& x, const HardPath& z,
                   const DropMask& drop) {
  const std::size_t K = theta.state_embed.rows();
  if (z.size() != x.size()) throw std::invalid_argument("joint_log_prob: length mismatch");
  for (auto s : z)
    if (s >= K) throw std::invalid_argument("joint_log_prob: state out of range");
  return decode(theta, x, drop, [&](std::size_t t, Var state_lp) {
    return std::pair{ad::gather_row(theta.state_embed, z[t]), ad::pick(state_lp, 0, z[t])};
  });
}

double joint_log_prob(const GenerativeParams& theta, const Sentence& x, const HardPath& z) {
  ad::Tape tape;
  return joint_log_prob(constants(tape, theta), x, z).scalar();
}

TapePotentials inference_potentials(const InferenceVars& phi, const Sentence& x) {
  ad::Tape& tape = phi.word_embed.tape();
  check_sentence(x, phi.word_embed.rows());
  const std::size_t T = x.size(), d = phi.word_embed.cols(), K = phi.transition.rows();
  const Var zero = tape.constant(Matrix(1, d));
  std::vector<Var> embed(T);
  for (std::size_t t = 0; t < T; ++t) embed[t] = ad::gather_row(phi.word_embed, x[t]);
  std::vector<Var> windows(T);
  for (std::size_t t = 0; t < T; ++t)
    windows[t] = ad::concat_cols({t > 0 ? embed[t - 1] : zero, embed[t], t + 1 < T ? embed[t + 1] : zero});
  const Var features = ad::add(ad::matmul(ad::concat_rows(windows), phi.enc_weight), phi.enc_bias);
  const Var emission = ad::add(ad::matmul(features, phi.emit_weight), phi.emit_bias);
  return {K, T, phi.transition, emission, phi.initial};
}

PotentialTable inference_table(const InferenceParams& phi, const Sentence& x) {
  ad::Tape tape;
  return table_values(inference_potentials(constants(tape, phi), x));
}

double exact_log_likelihood(const GenerativeParams& theta, const Sentence& x, std::size_t cap) {
  const std::size_t K = theta.state_embed.rows(), T = x.size();
  const std::size_t n = path_count(K, T);
  if (n > cap) throw std::length_error("exact_log_likelihood: K^T exceeds the enumeration cap");
  std::vector<double> scores(n);
  constexpr std::size_t kChunk = 256;
  for (std::size_t k0 = 0; k0 < n; k0 += kChunk) {
    ad::Tape tape;
    const auto vars = constants(tape, theta);
    for (std::size_t k = k0; k < std::min(n, k0 + kChunk); ++k)
      scores[k] = joint_log_prob(vars, x, decode_path(k, K, T)).scalar();
  }
  return logsumexp(scores);
}

ElboTerms elbo_terms(const GenerativeVars& theta, const InferenceVars& phi, const Sentence& x,
                     const ElboSettings& settings, GumbelNoiseStream& noise, const DropMask& drop) {
  const auto pot = inference_potentials(phi, x);
  const DownstreamObjective f{"joint_log_prob",
                              [&](ad::Tape&, Var z) { return joint_log_prob(theta, x, z, drop); },
                              true};
  const auto est = estimator_surrogate(settings.estimator, f, pot, settings.estimator_settings, noise);
  const Var H = tape_entropy(pot, tape_forward(pot));

  ElboTerms out;
  out.entropy = H.scalar();
  out.surrogate = ad::add(est.surrogate, ad::scalar_scale(H, settings.beta));
  out.objective = est.objective + settings.beta * out.entropy;
  const bool soft_objective = settings.estimator == EstimatorKind::GumbelCrf ||
                              settings.estimator == EstimatorKind::PmMrf;
  if (soft_objective) {
    // Report the joint on the coupled hard samples rather than on the relaxation.
    double s = 0.0;
    for (const auto& path : est.hard_paths) s += joint_log_prob(theta, x, path, drop).scalar();
    out.expected_joint = s / static_cast<double>(est.hard_paths.size());
  } else {
    out.expected_joint = est.objective;
  }
  return out;
}

ElboEstimate elbo(const GenerativeParams& theta, const InferenceParams& phi, const Sentence& x,
                  const ElboSettings& settings, GumbelNoiseStream& noise) {
  ad::Tape tape;
  const auto tv = record(tape, theta);
  const auto pv = record(tape, phi);
  const auto terms = elbo_terms(tv, pv, x, settings, noise);
  tape.backprop(terms.surrogate);
  return {terms.objective, terms.expected_joint, terms.entropy, gradient(tape, tv), gradient(tape, pv)};
}

GradReport elbo_report(const GenerativeParams& theta, const InferenceParams& phi,
                       const std::vector<Sentence>& batch, const ElboSettings& settings,
                       std::size_t estimates, std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("elbo_report: empty batch");
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::vector<double>> grads;
  CompensatedSum objective;
  for (std::size_t m = 0; m < estimates; ++m) {
    auto noise = GumbelNoiseStream::derived(seed, m);
    ad::Tape tape;
    const auto tv = record(tape, theta);
    const auto pv = record(tape, phi);
    Var total = tape.scalar_constant(0.0);
    double obj = 0.0;
    for (const auto& x : batch) {
      const auto terms = elbo_terms(tv, pv, x, settings, noise);
      total = ad::add(total, terms.surrogate);
      obj += terms.objective;
    }
    tape.backprop(ad::scalar_scale(total, 1.0 / static_cast<double>(batch.size())));
    grads.push_back(flatten(gradient(tape, pv)));
    objective.add(obj / static_cast<double>(batch.size()));
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  GradReport r;
  r.estimator = to_string(settings.estimator);
  r.samples_per_estimate = settings.estimator_settings.samples;
  r.estimates = estimates;
  r.total_samples = estimates * settings.estimator_settings.samples * batch.size();
  r.tau = is_relaxed(settings.estimator) ? settings.estimator_settings.tau : 0.0;
  r.seconds = seconds;
  r.seconds_per_estimate = estimates ? seconds / static_cast<double>(estimates) : 0.0;
  if (!grads.empty()) {
    auto m = summarize(grads);
    r.mean_gradient = std::move(m.mean);
    r.variance = std::move(m.variance);
    r.mean_objective = objective.value() / static_cast<double>(estimates);
  }
  if (grads.size() >= 2)
    r.variance_ratio = variance_ratio(grads);
  else
    r.variance_ratio.degenerate = true;
  return r;
}

double importance_nll(const GenerativeParams& theta, const InferenceParams& phi, const Sentence& x,
                      std::size_t n_samples, GumbelNoiseStream& noise) {
  if (n_samples == 0) throw std::invalid_argument("importance_nll: n_samples must be positive");
  const auto table = inference_table(phi, x);
  const auto fw = forward(table);
  ad::Tape tape;
  const auto vars = constants(tape, theta);
  std::vector<double> log_w(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) {
    const auto path = ffbs(table, fw, noise);
    log_w[k] = joint_log_prob(vars, x, path).scalar() - path_log_prob(table, fw, path);
  }
  return -(logsumexp(log_w) - std::log(static_cast<double>(n_samples)));
}

HardPath extract_template(const InferenceParams& phi, const Sentence& x) {
  return viterbi(inference_table(phi, x));
}

std::vector<std::size_t> collapse_states(const HardPath& path) {
  std::vector<std::size_t> out;
  for (auto s : path)
    if (out.empty() || out.back() != s) out.push_back(s);
  return out;
}

CollapseDiagnostics collapse_diagnostics(const InferenceParams& phi, const std::vector<Sentence>& data,
                                         CollapseThresholds thresholds) {
  CollapseDiagnostics out;
  if (data.empty()) return out;
  const std::size_t K = phi.transition.rows();
  std::vector<Matrix> m;
  m.reserve(data.size());
  for (const auto& x : data) m.push_back(marginals(inference_table(phi, x)));

  if (K > 1) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& mx : m)
      for (std::size_t t = 0; t < mx.rows(); ++t) {
        double h = 0.0;
        for (double p : mx.row(t))
          if (p > 0.0) h -= p * std::log(p);
        total += h / std::log(static_cast<double>(K));
        ++count;
      }
    out.uniform_score = std::clamp(total / static_cast<double>(count), 0.0, 1.0);
  }

  double tv_total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = a + 1; b < m.size(); ++b) {
      const std::size_t T = std::min(m[a].rows(), m[b].rows());
      double tv = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        double d = 0.0;
        for (std::size_t k = 0; k < K; ++k) d += std::abs(m[a](t, k) - m[b](t, k));
        tv += 0.5 * d;
      }
      tv_total += tv / static_cast<double>(T);
      ++pairs;
    }
  out.constant_score = pairs ? std::clamp(tv_total / static_cast<double>(pairs), 0.0, 1.0) : 0.0;

  out.uniform_collapse = out.uniform_score > thresholds.uniform;
  out.constant_collapse = !out.uniform_collapse && out.constant_score < thresholds.constant;
  return out;
}

double TrainConfig::tau_at(std::size_t epoch) const {
  return std::max(tau_floor, tau_initial * std::pow(tau_decay, static_cast<double>(epoch)));
}

double TrainConfig::dropout_at(std::size_t epoch) const {
  if (dropout_zero_epoch == 0 || epoch >= dropout_zero_epoch) return 0.0;
  return dropout_initial * (1.0 - static_cast<double>(epoch) / static_cast<double>(dropout_zero_epoch));
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (dims.num_states == 0 || dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0 || dims.encoder == 0)
    fail("model dimensions must be positive");
  if (samples == 0) fail("samples must be positive");
  if (is_score_function(estimator) && samples < 2) fail(to_string(estimator) + " needs samples >= 2");
  if (!(beta >= 0.0)) fail("beta must be nonnegative");
  if (!(tau_initial > 0.0) || !(tau_floor > 0.0)) fail("tau must be positive");
  if (!(tau_decay > 0.0 && tau_decay <= 1.0)) fail("tau_decay must lie in (0, 1]");
  if (!(dropout_initial >= 0.0 && dropout_initial <= 1.0)) fail("dropout ratio must lie in [0, 1]");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be nonnegative");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be nonnegative");
  if (is_samples_select == 0) fail("is_samples_select must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"num_states", c.dims.num_states},
                     {"vocab", c.dims.vocab},
                     {"embed", c.dims.embed},
                     {"hidden", c.dims.hidden},
                     {"encoder", c.dims.encoder},
                     {"estimator", to_string(c.estimator)},
                     {"samples", c.samples},
                     {"baseline_c", c.baseline_c},
                     {"beta", c.beta},
                     {"tau_initial", c.tau_initial},
                     {"tau_floor", c.tau_floor},
                     {"tau_decay", c.tau_decay},
                     {"dropout_initial", c.dropout_initial},
                     {"dropout_zero_epoch", c.dropout_zero_epoch},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"clip_norm", c.clip_norm},
                     {"init_scale", c.init_scale},
                     {"seed", c.seed},
                     {"is_samples_select", c.is_samples_select},
                     {"probe_batch", c.probe_batch},
                     {"probe_estimates", c.probe_estimates},
                     {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_states", d.dims.num_states);
  get("vocab", d.dims.vocab);
  get("embed", d.dims.embed);
  get("hidden", d.dims.hidden);
  get("encoder", d.dims.encoder);
  if (j.contains("estimator")) d.estimator = estimator_from_string(j.at("estimator").get<std::string>());
  get("samples", d.samples);
  get("baseline_c", d.baseline_c);
  get("beta", d.beta);
  get("tau_initial", d.tau_initial);
  get("tau_floor", d.tau_floor);
  get("tau_decay", d.tau_decay);
  get("dropout_initial", d.dropout_initial);
  get("dropout_zero_epoch", d.dropout_zero_epoch);
  get("epochs", d.epochs);
  get("batch_size", d.batch_size);
  get("learning_rate", d.learning_rate);
  get("clip_norm", d.clip_norm);
  get("init_scale", d.init_scale);
  get("seed", d.seed);
  get("is_samples_select", d.is_samples_select);
  get("probe_batch", d.probe_batch);
  get("probe_estimates", d.probe_estimates);
  get("workers", d.workers);
  c = d;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"elbo", r.elbo},
                     {"nll_is", r.nll_is},
                     {"entropy", r.entropy},
                     {"variance_ratio", r.variance_ratio.degenerate ? nlohmann::json(nullptr)
                                                                    : nlohmann::json(r.variance_ratio.value)},
                     {"constant_score", r.collapse.constant_score},
                     {"uniform_score", r.collapse.uniform_score},
                     {"constant_collapse", r.collapse.constant_collapse},
                     {"uniform_collapse", r.collapse.uniform_collapse},
                     {"tau", r.tau},
                     {"word_dropout", r.word_dropout}};
}

void to_json(nlohmann::json& j, const Checkpoint& c) {
  j = nlohmann::json{{"version", Checkpoint::kVersion},
                     {"config", c.config},
                     {"theta", c.theta},
                     {"phi", c.phi},
                     {"rng_state", c.rng_state},
                     {"epoch", c.epoch}};
}

void from_json(const nlohmann::json& j, Checkpoint& c) {
  const int version = j.at("version").get<int>();
  if (version != Checkpoint::kVersion)
    throw std::invalid_argument("checkpoint: unsupported version " + std::to_string(version));
  c.config = j.at("config").get<TrainConfig>();
  c.theta = j.at("theta").get<GenerativeParams>();
  c.phi = j.at("phi").get<InferenceParams>();
  c.rng_state = j.at("rng_state").get<std::string>();
  c.epoch = j.at("epoch").get<std::size_t>();
}

void write_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out << nlohmann::json(c).dump(1) << '\n';
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read checkpoint '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<Checkpoint>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed checkpoint '" + path + "': " + e.what());
  }
}

TrainResult train(const GenerativeParams& theta0, const InferenceParams& phi0,
                  const std::vector<Sentence>& train_set, const std::vector<Sentence>& val_set,
                  const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  validate(theta0);
  validate(phi0);
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  GenerativeParams theta = theta0;
  InferenceParams phi = phi0;
  Rng rng(mix_seed(config.seed, 1));
  const std::uint64_t noise_seed = mix_seed(config.seed, 2);
  const std::uint64_t val_seed = mix_seed(config.seed, 3);
  const std::uint64_t probe_seed = mix_seed(config.seed, 4);

  ElboSettings settings;
  settings.estimator = config.estimator;
  settings.beta = config.beta;
  settings.estimator_settings.samples = config.samples;
  settings.estimator_settings.baseline_c = config.baseline_c;

  const std::vector<Sentence> probe(train_set.begin(),
                                    train_set.begin() + std::min(config.probe_batch, train_set.size()));
  const std::vector<Sentence> collapse_probe(val_set.begin(),
                                             val_set.begin() + std::min<std::size_t>(100, val_set.size()));

  auto abort = [&](const std::string& why, std::size_t epoch) {
    Checkpoint snap{config, theta, phi, rng.state(), epoch};
    if (!config.snapshot_path.empty()) write_checkpoint(snap, config.snapshot_path);
    throw TrainingAborted("training aborted at epoch " + std::to_string(epoch) + ": " + why, snap,
                          config.snapshot_path);
  };

  auto validation_nll = [&](const GenerativeParams& th, const InferenceParams& ph) {
    if (val_set.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < val_set.size(); ++i) {
      auto noise = GumbelNoiseStream::derived(val_seed, i);
      total += importance_nll(th, ph, val_set[i], config.is_samples_select, noise);
    }
    return total / static_cast<double>(val_set.size());
  };

  TrainResult result;
  result.theta = theta;
  result.phi = phi;
  result.best_val_nll = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t example_counter = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double tau = config.tau_at(epoch);
    const double drop_ratio = config.dropout_at(epoch);
    settings.estimator_settings.tau = tau;

    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);

    CompensatedSum elbo_sum, entropy_sum;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - b0);
      std::vector<DropMask> masks(B);
      for (std::size_t i = 0; i < B; ++i) {
        const auto& x = train_set[order[b0 + i]];
        masks[i].assign(x.size(), false);
        if (drop_ratio > 0.0)
          for (std::size_t t = 1; t < x.size(); ++t) masks[i][t] = rng.uniform() < drop_ratio;
      }
      std::vector<ElboEstimate> per(B);
      parallel_for(B, config.workers, [&](std::size_t i) {
        auto noise = GumbelNoiseStream::derived(noise_seed, example_counter + i);
        ad::Tape tape;
        const auto tv = record(tape, theta);
        const auto pv = record(tape, phi);
        const auto terms = elbo_terms(tv, pv, train_set[order[b0 + i]], settings, noise, masks[i]);
        tape.backprop(terms.surrogate);
        per[i] = {terms.objective, terms.expected_joint, terms.entropy, gradient(tape, tv),
                  gradient(tape, pv)};
      });
      example_counter += B;

      auto g_theta = zeros_like(theta);
      auto g_phi = zeros_like(phi);
      for (std::size_t i = 0; i < B; ++i) {
        if (!std::isfinite(per[i].objective)) abort("non-finite ELBO", epoch);
        add_scaled(g_theta, per[i].theta_grad, 1.0 / static_cast<double>(B));
        add_scaled(g_phi, per[i].phi_grad, 1.0 / static_cast<double>(B));
        elbo_sum.add(per[i].expected_joint + per[i].entropy);
        entropy_sum.add(per[i].entropy);
      }
      if (!all_finite(g_theta) || !all_finite(g_phi)) abort("non-finite gradient", epoch);
      if (config.learning_rate == 0.0) continue;
      double scale = config.learning_rate;
      const double norm = std::sqrt(squared_norm(g_theta) + squared_norm(g_phi));
      if (config.clip_norm > 0.0 && norm > config.clip_norm) scale *= config.clip_norm / norm;
      add_scaled(theta, g_theta, scale);
      add_scaled(phi, g_phi, scale);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.elbo = elbo_sum.value() / static_cast<double>(order.size());
    rec.entropy = entropy_sum.value() / static_cast<double>(order.size());
    rec.tau = tau;
    rec.word_dropout = drop_ratio;
    rec.nll_is = validation_nll(theta, phi);
    if (config.probe_estimates >= 2 && !probe.empty())
      rec.variance_ratio =
          elbo_report(theta, phi, probe, settings, config.probe_estimates, mix_seed(probe_seed, epoch))
              .variance_ratio;
    else
      rec.variance_ratio.degenerate = true;
    rec.collapse = collapse_diagnostics(phi, collapse_probe);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (rec.nll_is < result.best_val_nll || val_set.empty()) {
      result.best_val_nll = rec.nll_is;
      result.best_epoch = epoch;
      result.theta = theta;
      result.phi = phi;
    }
    result.trace.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (config.epochs == 0) result.best_val_nll = validation_nll(theta, phi);
  result.rng_state = rng.state();
  return result;
}

}  // namespace gcrf::vae
