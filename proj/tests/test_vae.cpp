#include <doctest.h>

#include <filesystem>

#include <gcrf/vae.hpp>

#include "test_support.hpp"

using namespace gcrf;
using namespace gcrf::vae;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.num_states = 3;
  d.vocab = 4;
  d.embed = 2;
  d.hidden = 3;
  d.encoder = 2;
  return d;
}

struct Model {
  GenerativeParams theta;
  InferenceParams phi;
};

Model random_model(const ModelDims& dims, std::uint64_t seed, double scale = 0.7) {
  Rng rng(seed);
  return {init_generative(dims, rng, scale), init_inference(dims, rng, scale)};
}

// Decoder whose joint does not depend on z: log p(x, z) = log p(x) - T log K.
GenerativeParams z_independent(GenerativeParams theta) {
  const std::size_t d = theta.state_embed.cols();
  theta.state_embed = Matrix(theta.state_embed.rows(), d);
  theta.state_head = Matrix(theta.state_head.rows(), theta.state_head.cols());
  theta.state_bias = Matrix(1, theta.state_bias.cols());
  return theta;
}

double exact_elbo(const GenerativeParams& theta, const InferenceParams& phi, const Sentence& x) {
  const auto post = enumerate_posterior(inference_table(phi, x));
  double s = 0.0;
  for (std::size_t i = 0; i < post.paths.size(); ++i)
    if (post.probs[i] > 0.0)
      s += post.probs[i] * (joint_log_prob(theta, x, post.paths[i]) - std::log(post.probs[i]));
  return s;
}

Matrix onehot_rows(const HardPath& z, std::size_t K) {
  Matrix m(z.size(), K);
  for (std::size_t t = 0; t < z.size(); ++t) m(t, z[t]) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("zero decoder weights give uniform state and word distributions") {
  auto dims = small_dims();
  Rng rng(1);
  const auto theta = init_generative(dims, rng, 0.0);
  const Sentence x{0, 3, 1, 2, 2};
  const double expected =
      5.0 * (std::log(1.0 / dims.num_states) + std::log(1.0 / dims.vocab));
  CHECK(std::abs(joint_log_prob(theta, x, HardPath{0, 1, 2, 0, 1}) - expected) < 1e-12);
  CHECK(std::abs(exact_log_likelihood(theta, x) - 5.0 * std::log(1.0 / dims.vocab)) < 1e-12);
}

TEST_CASE("T=1 uniform model") {
  auto dims = small_dims();
  Rng rng(1);
  const auto theta = init_generative(dims, rng, 0.0);
  CHECK(std::abs(joint_log_prob(theta, Sentence{2}, HardPath{1}) -
                 (std::log(1.0 / 3.0) + std::log(1.0 / 4.0))) < 1e-14);
}

TEST_CASE("decoder step with h=1, d=1 by hand") {
  ModelDims dims{2, 2, 1, 1, 1};
  Rng rng(0);
  auto theta = init_generative(dims, rng, 0.0);
  theta.cell_input = Matrix{{0.5}, {-0.3}};
  theta.cell_recurrent = Matrix{{0.8}};
  theta.cell_bias = Matrix{{0.1}};
  theta.state_head = Matrix{{1.0, -1.0}};
  theta.state_bias = Matrix{{0.2, 0.0}};
  theta.word_head = Matrix{{0.4, -0.4}, {2.0, 0.5}};
  theta.word_bias = Matrix{{0.0, 0.3}};

  ad::Tape tape;
  const auto tv = record(tape, theta);
  auto c = [&](double v) { return tape.constant(Matrix{{v}}); };
  const auto step = decoder_step(tv, c(0.7), c(-1.1), c(0.25), c(0.9));

  const double h = std::tanh(0.5 * 0.7 - 0.3 * -1.1 + 0.8 * 0.25 + 0.1);
  CHECK(std::abs(step.hidden.scalar() - h) < 1e-15);
  const auto s = step.state_logits.to_matrix();
  CHECK(std::abs(s(0, 0) - (h + 0.2)) < 1e-15);
  CHECK(std::abs(s(0, 1) - (-h)) < 1e-15);
  const auto w = step.word_logits.to_matrix();
  CHECK(std::abs(w(0, 0) - (0.4 * 0.9 + 2.0 * h)) < 1e-15);
  CHECK(std::abs(w(0, 1) - (-0.4 * 0.9 + 0.5 * h + 0.3)) < 1e-15);
}

TEST_CASE("joint log-probability gradients match finite differences") {
  const auto dims = small_dims();
  const Sentence x{1, 0, 3, 2};
  const HardPath z{2, 0, 0, 1};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto theta = random_model(dims, seed).theta;
    ad::Tape tape;
    const auto tv = record(tape, theta);
    tape.backprop(joint_log_prob(tv, x, z, DropMask{false, true, false, false}));
    const auto analytic = flatten(gradient(tape, tv));
    auto loss = [&](std::span<const double> p) {
      auto th = theta;
      unflatten(th, p);
      ad::Tape t;
      return joint_log_prob(record(t, th), x, z, DropMask{false, true, false, false}).scalar();
    };
    CHECK(ad::relative_error(analytic, ad::finite_diff(loss, flatten(theta), 1e-5)) < 1e-6);
  }
}

TEST_CASE("one-hot soft input equals the hard path bit for bit") {
  const auto dims = small_dims();
  const Sentence x{3, 1, 1, 0, 2, 3};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto theta = random_model(dims, seed).theta;
    Rng rng(seed + 100);
    HardPath z(x.size());
    for (auto& s : z) s = rng.uniform_index(dims.num_states);
    ad::Tape tape;
    const auto tv = record(tape, theta);
    const double hard = joint_log_prob(tv, x, z).scalar();
    const double soft = joint_log_prob(tv, x, tape.constant(onehot_rows(z, dims.num_states))).scalar();
    CHECK(hard == soft);
  }
}

TEST_CASE("exact likelihood normalizes over all sentences for K=2, V=3, T=2") {
  ModelDims dims{2, 3, 2, 3, 2};
  const auto theta = random_model(dims, 9, 1.0).theta;
  double total = 0.0;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      const Sentence x{a, b};
      double by_hand = 0.0;
      for (std::size_t z0 = 0; z0 < 2; ++z0)
        for (std::size_t z1 = 0; z1 < 2; ++z1) by_hand += std::exp(joint_log_prob(theta, x, HardPath{z0, z1}));
      const double ll = exact_log_likelihood(theta, x);
      CHECK(std::abs(ll - std::log(by_hand)) < 1e-12);
      total += std::exp(ll);
    }
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK_THROWS_AS(exact_log_likelihood(theta, Sentence(25, 0), 1000), std::length_error);
}

TEST_CASE("ELBO lower-bounds the exact log-likelihood") {
  const auto dims = small_dims();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto m = random_model(dims, seed);
    const Sentence x{0, 2, 1, 3, 1};
    CHECK(exact_elbo(m.theta, m.phi, x) <= exact_log_likelihood(m.theta, x) + 1e-12);
  }
}

TEST_CASE("ELBO estimates average to the exact ELBO") {
  const auto dims = small_dims();
  const auto m = random_model(dims, 4);
  const Sentence x{1, 3, 0, 2};
  const double oracle = exact_elbo(m.theta, m.phi, x);
  for (auto kind : {EstimatorKind::ReinforceMs, EstimatorKind::GumbelCrfSt}) {
    ElboSettings s;
    s.estimator = kind;
    s.estimator_settings.samples = 4;
    std::vector<double> values;
    for (std::uint64_t k = 0; k < 4000; ++k) {
      auto noise = GumbelNoiseStream::derived(77, k);
      ad::Tape tape;
      values.push_back(elbo_terms(record(tape, m.theta), record(tape, m.phi), x, s, noise).objective);
    }
    double mean = 0.0, var = 0.0;
    for (double v : values) mean += v;
    mean /= values.size();
    for (double v : values) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / (values.size() - 1) / values.size());
    CAPTURE(to_string(kind));
    CHECK(std::abs(mean - oracle) < 3.0 * se + 1e-12);
  }
}

TEST_CASE("entropy term equals the CRF entropy and its gradient is exact") {
  const auto dims = small_dims();
  const Sentence x{2, 2, 0, 1, 3};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto m = random_model(dims, seed);
    ElboSettings s;
    auto noise = GumbelNoiseStream::derived(seed, 0);
    ad::Tape tape;
    const auto terms = elbo_terms(record(tape, m.theta), record(tape, m.phi), x, s, noise);
    CHECK(std::abs(terms.entropy - entropy(inference_table(m.phi, x))) < 1e-8);

    ad::Tape t2;
    const auto pv = record(t2, m.phi);
    const auto pot = inference_potentials(pv, x);
    t2.backprop(tape_entropy(pot, tape_forward(pot)));
    const auto analytic = flatten(gradient(t2, pv));
    auto loss = [&](std::span<const double> p) {
      auto phi = m.phi;
      unflatten(phi, p);
      return entropy(inference_table(phi, x));
    };
    CHECK(ad::relative_error(analytic, ad::finite_diff(loss, flatten(m.phi), 1e-5)) < 1e-6);
  }
}

TEST_CASE("theta gradient of the ELBO matches finite differences under frozen noise") {
  const auto dims = small_dims();
  const auto m = random_model(dims, 12);
  const Sentence x{3, 0, 1};
  for (auto kind : {EstimatorKind::ReinforceMs, EstimatorKind::GumbelCrfSt, EstimatorKind::PmMrfSt}) {
    ElboSettings s;
    s.estimator = kind;
    s.estimator_settings.samples = 3;
    auto noise = GumbelNoiseStream(5);
    const auto est = elbo(m.theta, m.phi, x, s, noise);
    auto loss = [&](std::span<const double> p) {
      auto th = m.theta;
      unflatten(th, p);
      auto n = GumbelNoiseStream(5);
      return elbo(th, m.phi, x, s, n).objective;
    };
    CAPTURE(to_string(kind));
    CHECK(ad::relative_error(flatten(est.theta_grad), ad::finite_diff(loss, flatten(m.theta), 1e-5)) <
          1e-6);
  }
}

TEST_CASE("beta=0 with a z-independent decoder gives a zero inference gradient") {
  const auto dims = small_dims();
  auto m = random_model(dims, 3);
  m.theta = z_independent(m.theta);
  const Sentence x{1, 2, 0, 3};
  for (auto kind : {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC}) {
    ElboSettings s;
    s.estimator = kind;
    s.beta = 0.0;
    s.estimator_settings.samples = 4;
    s.estimator_settings.baseline_c = 0.0;
    auto noise = GumbelNoiseStream(8);
    const auto est = elbo(m.theta, m.phi, x, s, noise);
    for (double g : flatten(est.phi_grad)) CHECK(g == 0.0);
  }
  for (auto kind : {EstimatorKind::GumbelCrfSt, EstimatorKind::PmMrfSt}) {
    ElboSettings s;
    s.estimator = kind;
    s.beta = 0.0;
    auto noise = GumbelNoiseStream(8);
    const auto est = elbo(m.theta, m.phi, x, s, noise);
    for (double g : flatten(est.phi_grad)) CHECK(std::abs(g) < 1e-12);
  }
}

TEST_CASE("entropy-only ascent reaches the uniform posterior") {
  const auto dims = small_dims();
  auto m = random_model(dims, 6, 1.0);
  m.theta = z_independent(m.theta);
  const Sentence x{0, 1, 2, 3};
  const double target = x.size() * std::log(static_cast<double>(dims.num_states));
  ElboSettings s;
  s.estimator = EstimatorKind::ReinforceMs;
  s.estimator_settings.samples = 2;
  double H = 0.0;
  for (int it = 0; it < 2000 && target - H > 1e-4; ++it) {
    auto noise = GumbelNoiseStream::derived(1, it);
    const auto est = elbo(m.theta, m.phi, x, s, noise);
    H = est.entropy;
    auto flat = flatten(m.phi);
    const auto g = flatten(est.phi_grad);
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += 0.5 * g[i];
    unflatten(m.phi, flat);
  }
  CHECK(target - H < 1e-3);
}

TEST_CASE("importance-sampled NLL") {
  const auto dims = small_dims();
  const auto m = random_model(dims, 2);
  const Sentence x{2, 0, 1};

  SUBCASE("n=1 is the single importance weight of the FFBS sample") {
    auto noise = GumbelNoiseStream(4);
    const double nll = importance_nll(m.theta, m.phi, x, 1, noise);
    auto replay = GumbelNoiseStream(4);
    const auto table = inference_table(m.phi, x);
    const auto z = ffbs(table, forward(table), replay);
    CHECK(std::abs(nll - (path_log_prob(table, z) - joint_log_prob(m.theta, x, z))) < 1e-12);
  }

  SUBCASE("exact posterior as proposal gives the exact NLL") {
    const auto theta = z_independent(m.theta);
    Rng rng(0);
    const auto phi = init_inference(dims, rng, 0.0);
    auto noise = GumbelNoiseStream(4);
    CHECK(std::abs(importance_nll(theta, phi, x, 7, noise) + exact_log_likelihood(theta, x)) < 1e-12);
  }

  SUBCASE("importance weights are unbiased for p(x)") {
    const double px = std::exp(exact_log_likelihood(m.theta, x));
    std::vector<double> w;
    for (std::uint64_t k = 0; k < 1000; ++k) {
      auto noise = GumbelNoiseStream::derived(31, k);
      w.push_back(std::exp(-importance_nll(m.theta, m.phi, x, 1, noise)));
    }
    double mean = 0.0, var = 0.0;
    for (double v : w) mean += v;
    mean /= w.size();
    for (double v : w) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / (w.size() - 1) / w.size());
    CHECK(std::abs(mean - px) < 3.0 * se);
  }

  CHECK_THROWS_AS(
      [&] {
        auto n = GumbelNoiseStream(1);
        importance_nll(m.theta, m.phi, x, 0, n);
      }(),
      std::invalid_argument);
}

TEST_CASE("template extraction") {
  CHECK(collapse_states({1, 1, 2, 2, 3}) == std::vector<std::size_t>{1, 2, 3});
  CHECK(collapse_states({5}) == std::vector<std::size_t>{5});
  CHECK(collapse_states({2, 2, 2, 2}) == std::vector<std::size_t>{2});
  CHECK(collapse_states({}).empty());

  const auto dims = small_dims();
  const auto m = random_model(dims, 5);
  const Sentence x{0, 1, 2, 3, 0};
  CHECK(extract_template(m.phi, x) == viterbi(inference_table(m.phi, x)));
}

TEST_CASE("collapse diagnostics on degenerate inference networks") {
  const auto dims = small_dims();
  const std::vector<Sentence> data{{0, 1, 2}, {3, 3, 1}, {2, 0, 0}, {1, 2, 3}};
  Rng rng(0);

  const auto uniform = init_inference(dims, rng, 0.0);
  const auto u = collapse_diagnostics(uniform, data);
  CHECK(u.uniform_collapse);
  CHECK_FALSE(u.constant_collapse);
  CHECK(std::abs(u.uniform_score - 1.0) < 1e-12);

  auto constant = init_inference(dims, rng, 0.0);
  constant.emit_bias = Matrix{{12.0, 0.0, 0.0}};
  const auto c = collapse_diagnostics(constant, data);
  CHECK(c.constant_collapse);
  CHECK_FALSE(c.uniform_collapse);

  auto informative = init_inference(dims, rng, 0.0);
  informative.word_embed = Matrix{{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  informative.enc_weight = Matrix(6, 2);
  informative.enc_weight(2, 0) = 1.0;
  informative.enc_weight(3, 1) = 1.0;
  informative.emit_weight = Matrix{{8.0, -8.0, 0.0}, {0.0, 0.0, 8.0}};
  const auto i = collapse_diagnostics(informative, data);
  CHECK_FALSE(i.constant_collapse);
  CHECK_FALSE(i.uniform_collapse);
}

TEST_CASE("parameter validation") {
  const auto dims = small_dims();
  auto m = random_model(dims, 1);
  CHECK_NOTHROW(validate(m.theta));
  CHECK_NOTHROW(validate(m.phi));
  m.theta.word_head = Matrix(2, 2);
  CHECK_THROWS_AS(validate(m.theta), std::invalid_argument);
  m.phi.initial(0, 0) = std::nan("");
  CHECK_THROWS_AS(validate(m.phi), std::invalid_argument);
  CHECK_THROWS_AS(joint_log_prob(random_model(dims, 1).theta, Sentence{9}, HardPath{0}),
                  std::invalid_argument);
}

TEST_CASE("schedules") {
  TrainConfig c;
  c.tau_initial = 1.0;
  c.tau_decay = 0.5;
  c.tau_floor = 0.2;
  CHECK(c.tau_at(0) == 1.0);
  CHECK(c.tau_at(1) == 0.5);
  CHECK(c.tau_at(5) == 0.2);
  c.dropout_initial = 0.4;
  c.dropout_zero_epoch = 4;
  CHECK(c.dropout_at(0) == 0.4);
  CHECK(std::abs(c.dropout_at(2) - 0.2) < 1e-15);
  CHECK(c.dropout_at(4) == 0.0);
  CHECK(c.dropout_at(9) == 0.0);
}

TEST_CASE("training") {
  const auto dims = small_dims();
  const auto m = random_model(dims, 1, 0.1);
  std::vector<Sentence> data;
  Rng rng(3);
  for (int i = 0; i < 30; ++i) {
    Sentence x(4);
    for (auto& w : x) w = rng.uniform_index(dims.vocab);
    data.push_back(x);
  }
  const std::vector<Sentence> val(data.begin(), data.begin() + 5);
  TrainConfig c;
  c.dims = dims;
  c.epochs = 3;
  c.batch_size = 7;
  c.probe_estimates = 4;
  c.is_samples_select = 5;
  c.dropout_initial = 0.3;
  c.dropout_zero_epoch = 2;

  SUBCASE("learning rate 0 leaves parameters bit-identical") {
    c.learning_rate = 0.0;
    const auto r = train(m.theta, m.phi, data, val, c);
    CHECK(flatten(r.theta) == flatten(m.theta));
    CHECK(flatten(r.phi) == flatten(m.phi));
    CHECK(r.trace.size() == 3);
  }

  SUBCASE("trace, determinism and worker independence") {
    std::vector<EpochRecord> seen;
    const auto a = train(m.theta, m.phi, data, val, c, [&](const EpochRecord& r) { seen.push_back(r); });
    CHECK(seen.size() == 3);
    CHECK(a.trace[1].tau == c.tau_at(1));
    CHECK(a.trace[2].word_dropout == 0.0);
    for (const auto& r : a.trace) {
      CHECK(std::isfinite(r.elbo));
      CHECK(std::isfinite(r.nll_is));
      CHECK_FALSE(r.variance_ratio.degenerate);
      const auto j = nlohmann::json(r);
      CHECK(j.contains("variance_ratio"));
    }
    c.workers = 4;
    const auto b = train(m.theta, m.phi, data, val, c);
    CHECK(flatten(a.theta) == flatten(b.theta));
    CHECK(flatten(a.phi) == flatten(b.phi));
    CHECK(a.rng_state == b.rng_state);
  }

  SUBCASE("training improves the validation NLL") {
    c.epochs = 8;
    c.learning_rate = 0.3;
    const auto r = train(m.theta, m.phi, data, val, c);
    CHECK(r.best_val_nll < r.trace.front().nll_is);
  }

  SUBCASE("divergence aborts with a snapshot") {
    const auto path = (std::filesystem::temp_directory_path() / "gcrf_vae_snapshot.json").string();
    std::filesystem::remove(path);
    c.learning_rate = 1e300;
    c.clip_norm = 0.0;
    c.snapshot_path = path;
    CHECK_THROWS_AS(train(m.theta, m.phi, data, val, c), TrainingAborted);
    CHECK(std::filesystem::exists(path));
    std::filesystem::remove(path);
  }

  SUBCASE("invalid configuration") {
    c.estimator = EstimatorKind::ReinforceMs;
    c.samples = 1;
    CHECK_THROWS_AS(train(m.theta, m.phi, data, val, c), std::invalid_argument);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dims = small_dims();
  const auto m = random_model(dims, 8);
  Checkpoint c;
  c.config.dims = dims;
  c.config.estimator = EstimatorKind::PmMrf;
  c.config.tau_floor = 0.3;
  c.theta = m.theta;
  c.phi = m.phi;
  Rng rng(5);
  rng.normal();
  c.rng_state = rng.state();
  c.epoch = 4;
  const auto path = (std::filesystem::temp_directory_path() / "gcrf_vae_checkpoint.json").string();
  write_checkpoint(c, path);
  const auto back = read_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(flatten(back.theta) == flatten(c.theta));
  CHECK(flatten(back.phi) == flatten(c.phi));
  CHECK(back.config.estimator == EstimatorKind::PmMrf);
  CHECK(back.config.tau_floor == 0.3);
  CHECK(back.epoch == 4);
  Rng restored(0);
  restored.set_state(back.rng_state);
  CHECK(restored.normal() == rng.normal());

  auto j = nlohmann::json(c);
  j["version"] = 99;
  CHECK_THROWS_AS(j.get<Checkpoint>(), std::invalid_argument);
  j["version"] = 1;
  j["theta"].erase("word_head");
  CHECK_THROWS_AS(j.get<Checkpoint>(), std::invalid_argument);
}
