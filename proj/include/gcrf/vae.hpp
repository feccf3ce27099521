#pragma once

// Latent-template VAE at desk scale.
//
// Generative model p(x, z): a tanh recurrent decoder that emits, at each
// position, a control state z_t and then a word x_t:
//   h_t = tanh([e(z_{t-1}); e(x_{t-1})] W_in + h_{t-1} W_rec + b)
//   p(z_t | ...) = softmax(h_t W_s + b_s)
//   p(x_t | z_t, ...) = softmax([e(z_t); h_t] W_w + b_w)
// with zero embeddings and a zero hidden state before the first position.
//
// Inference model q(z | x): a linear-chain CRF whose emission scores are an
// affine map of a +-1 window of word embeddings, with learned transition and
// initial scores.

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcrf/estimators.hpp"
#include "gcrf/random.hpp"

namespace gcrf::vae {

using Sentence = std::vector<std::size_t>;

struct ModelDims {
  std::size_t num_states = 5;   // K
  std::size_t vocab = 20;       // V
  std::size_t embed = 8;        // d
  std::size_t hidden = 16;      // h
  std::size_t encoder = 8;      // encoder feature width
};

template <class T>
struct GenerativeFields {
  T word_embed;      // V x d
  T state_embed;     // K x d
  T cell_input;      // 2d x h
  T cell_recurrent;  // h x h
  T cell_bias;       // 1 x h
  T state_head;      // h x K
  T state_bias;      // 1 x K
  T word_head;       // (d + h) x V
  T word_bias;       // 1 x V

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f("word_embed", s.word_embed);
    f("state_embed", s.state_embed);
    f("cell_input", s.cell_input);
    f("cell_recurrent", s.cell_recurrent);
    f("cell_bias", s.cell_bias);
    f("state_head", s.state_head);
    f("state_bias", s.state_bias);
    f("word_head", s.word_head);
    f("word_bias", s.word_bias);
  }
};

template <class T>
struct InferenceFields {
  T word_embed;   // V x d
  T enc_weight;   // 3d x encoder
  T enc_bias;     // 1 x encoder
  T emit_weight;  // encoder x K
  T emit_bias;    // 1 x K
  T transition;   // K x K [prev, next]
  T initial;      // 1 x K

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f("word_embed", s.word_embed);
    f("enc_weight", s.enc_weight);
    f("enc_bias", s.enc_bias);
    f("emit_weight", s.emit_weight);
    f("emit_bias", s.emit_bias);
    f("transition", s.transition);
    f("initial", s.initial);
  }
};

using GenerativeParams = GenerativeFields<Matrix>;
using GenerativeVars = GenerativeFields<ad::Var>;
using InferenceParams = InferenceFields<Matrix>;
using InferenceVars = InferenceFields<ad::Var>;

// Entries drawn from N(0, scale^2); scale 0 gives all-zero parameters.
GenerativeParams init_generative(const ModelDims& dims, Rng& rng, double scale);
InferenceParams init_inference(const ModelDims& dims, Rng& rng, double scale);
ModelDims dims_of(const GenerativeParams& theta, const InferenceParams& phi);

// Throws std::invalid_argument on inconsistent shapes or non-finite entries.
void validate(const GenerativeParams& theta);
void validate(const InferenceParams& phi);

GenerativeVars record(ad::Tape& tape, const GenerativeParams& theta);
InferenceVars record(ad::Tape& tape, const InferenceParams& phi);
GenerativeParams gradient(const ad::Tape& tape, const GenerativeVars& vars);
InferenceParams gradient(const ad::Tape& tape, const InferenceVars& vars);

std::size_t param_count(const GenerativeParams& p);
std::size_t param_count(const InferenceParams& p);
std::vector<double> flatten(const GenerativeParams& p);
std::vector<double> flatten(const InferenceParams& p);
void unflatten(GenerativeParams& p, std::span<const double> flat);
void unflatten(InferenceParams& p, std::span<const double> flat);

void to_json(nlohmann::json& j, const GenerativeParams& p);
void from_json(const nlohmann::json& j, GenerativeParams& p);
void to_json(nlohmann::json& j, const InferenceParams& p);
void from_json(const nlohmann::json& j, InferenceParams& p);

struct DecoderStep {
  ad::Var hidden;        // 1 x h
  ad::Var state_logits;  // 1 x K
  ad::Var word_logits;   // 1 x V
};

// One decoder update from the previous state and word embeddings (1 x d each)
// and hidden state (1 x h); word logits condition on z_embed, the embedding of
// the current state.
DecoderStep decoder_step(const GenerativeVars& theta, ad::Var z_prev_embed, ad::Var x_prev_embed,
                         ad::Var h_prev, ad::Var z_embed);

// Positions whose decoder input word is replaced by a zero embedding.
using DropMask = std::vector<bool>;

// log p(x, z) with z a T x K node (soft rows enter via expected embeddings and
// expected state log-probabilities) or a hard path (row lookups).
ad::Var joint_log_prob(const GenerativeVars& theta, const Sentence& x, ad::Var z,
                       const DropMask& drop = {});
ad::Var joint_log_prob(const GenerativeVars& theta, const Sentence& x, const HardPath& z,
                       const DropMask& drop = {});
double joint_log_prob(const GenerativeParams& theta, const Sentence& x, const HardPath& z);

// CRF potentials of q(z | x).
TapePotentials inference_potentials(const InferenceVars& phi, const Sentence& x);
PotentialTable inference_table(const InferenceParams& phi, const Sentence& x);

// log p(x) by enumerating every z; throws std::length_error above `cap` paths.
double exact_log_likelihood(const GenerativeParams& theta, const Sentence& x,
                            std::size_t cap = kDefaultEnumerationCap);

struct ElboSettings {
  EstimatorKind estimator = EstimatorKind::GumbelCrfSt;
  EstimatorSettings estimator_settings;
  double beta = 1.0;  // entropy weight
};

// Surrogate and value of E_q[log p(x, z)] + beta * H[q] recorded on `tape`.
struct ElboTerms {
  ad::Var surrogate;
  double objective = 0.0;       // expected-joint estimate + beta * entropy
  double expected_joint = 0.0;  // mean log p(x, z) over the estimator's samples
  double entropy = 0.0;         // exact H[q]
};
ElboTerms elbo_terms(const GenerativeVars& theta, const InferenceVars& phi, const Sentence& x,
                     const ElboSettings& settings, GumbelNoiseStream& noise,
                     const DropMask& drop = {});

struct ElboEstimate {
  double objective = 0.0;
  double expected_joint = 0.0;
  double entropy = 0.0;
  GenerativeParams theta_grad;
  InferenceParams phi_grad;
};
ElboEstimate elbo(const GenerativeParams& theta, const InferenceParams& phi, const Sentence& x,
                  const ElboSettings& settings, GumbelNoiseStream& noise);

// Repeated ELBO estimates over a batch: per-estimate gradients with respect to
// the inference parameters, summarized as a GradReport.
GradReport elbo_report(const GenerativeParams& theta, const InferenceParams& phi,
                       const std::vector<Sentence>& batch, const ElboSettings& settings,
                       std::size_t estimates, std::uint64_t seed);

// -log mean_k p(x, z_k) / q(z_k | x) over n hard FFBS samples from q.
double importance_nll(const GenerativeParams& theta, const InferenceParams& phi, const Sentence& x,
                      std::size_t n_samples, GumbelNoiseStream& noise);

HardPath extract_template(const InferenceParams& phi, const Sentence& x);
std::vector<std::size_t> collapse_states(const HardPath& path);

struct CollapseThresholds {
  double constant = 0.05;  // constant flag when the TV score falls below this
  double uniform = 0.95;   // uniform flag when the entropy score exceeds this
};

struct CollapseDiagnostics {
  double constant_score = 0.0;  // mean pairwise TV of posterior marginals, in [0, 1]
  double uniform_score = 0.0;   // mean marginal entropy / log K, in [0, 1]
  bool constant_collapse = false;
  bool uniform_collapse = false;
};
CollapseDiagnostics collapse_diagnostics(const InferenceParams& phi,
                                         const std::vector<Sentence>& data,
                                         CollapseThresholds thresholds = {});

struct TrainConfig {
  ModelDims dims;
  EstimatorKind estimator = EstimatorKind::GumbelCrfSt;
  std::size_t samples = 1;  // samples per ELBO estimate
  double baseline_c = 0.0;
  double beta = 1.0;
  double tau_initial = 1.0;
  double tau_floor = 0.5;
  double tau_decay = 0.95;  // multiplicative, per epoch
  double dropout_initial = 0.0;
  std::size_t dropout_zero_epoch = 0;  // ratio decays linearly to 0 at this epoch
  std::size_t epochs = 20;
  std::size_t batch_size = 10;
  double learning_rate = 0.1;
  double clip_norm = 5.0;
  double init_scale = 0.1;
  std::uint64_t seed = 1;
  std::size_t is_samples_select = 20;  // importance samples for validation NLL
  std::size_t probe_batch = 4;         // sequences used for the per-epoch variance ratio
  std::size_t probe_estimates = 16;
  std::size_t workers = 1;
  std::string snapshot_path;  // checkpoint written before a NaN abort

  double tau_at(std::size_t epoch) const;
  double dropout_at(std::size_t epoch) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;
  double elbo = 0.0;        // mean training ELBO estimate per sequence
  double nll_is = 0.0;      // validation importance-sampled NLL per sequence
  double entropy = 0.0;     // mean H[q] per training sequence
  VarianceRatio variance_ratio;
  CollapseDiagnostics collapse;
  double tau = 0.0;
  double word_dropout = 0.0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct Checkpoint {
  static constexpr int kVersion = 1;
  TrainConfig config;
  GenerativeParams theta;
  InferenceParams phi;
  std::string rng_state;
  std::size_t epoch = 0;
};

void to_json(nlohmann::json& j, const Checkpoint& c);
void from_json(const nlohmann::json& j, Checkpoint& c);
void write_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, Checkpoint snapshot, std::string snapshot_path)
      : std::runtime_error(what), snapshot(std::move(snapshot)), snapshot_path(std::move(snapshot_path)) {}
  Checkpoint snapshot;
  std::string snapshot_path;
};

struct TrainResult {
  GenerativeParams theta;  // parameters of the epoch with the best validation NLL
  InferenceParams phi;
  std::vector<EpochRecord> trace;
  std::size_t best_epoch = 0;
  double best_val_nll = 0.0;
  std::string rng_state;
};

// Minibatch SGD ascent on the ELBO with gradient clipping, temperature and
// word-dropout schedules, and model selection on validation NLL. Throws
// TrainingAborted on a non-finite loss or gradient.
TrainResult train(const GenerativeParams& theta0, const InferenceParams& phi0,
                  const std::vector<Sentence>& train_set, const std::vector<Sentence>& val_set,
                  const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace gcrf::vae
