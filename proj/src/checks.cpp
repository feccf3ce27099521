#include "gcrf/checks.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "gcrf/autodiff.hpp"
#include "gcrf/crf_tape.hpp"
#include "gcrf/sampling.hpp"
#include "gcrf/stats.hpp"

namespace gcrf {

namespace {

using Clock = std::chrono::steady_clock;

// Per-instance stream keyed by name, so a subset registry reproduces the draws.
std::uint64_t instance_seed(std::uint64_t seed, std::uint64_t tag, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
  return mix_seed(mix_seed(seed, tag), h);
}

double since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

std::size_t instance_index(const GoldenRegistry& r, const std::string& name) {
  for (std::size_t i = 0; i < r.instances.size(); ++i)
    if (r.instances[i].name == name) return i;
  throw std::invalid_argument("unknown golden instance '" + name + "'");
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string passed_count(const CheckResult& r) {
  std::size_t ok = 0;
  for (const auto& rec : r.records) ok += rec.passed;
  return std::to_string(ok) + "/" + std::to_string(r.records.size()) + " checks passed";
}

}  // namespace

void to_json(nlohmann::json& j, const CheckRecord& r) {
  j = r.detail;
  j["check"] = r.check;
  j["instance"] = r.instance;
  j["passed"] = r.passed;
}

void CheckResult::add(CheckRecord r) {
  passed = passed && r.passed;
  records.push_back(std::move(r));
}

std::vector<std::string> CheckResult::failures() const {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (!r.passed) out.push_back(r.check + "/" + r.instance);
  return out;
}

CheckResult check_golden_integrity(const GoldenRegistry& registry) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "golden_integrity";
  const auto bad = verify_golden(registry);
  for (const auto& g : registry.instances) {
    std::vector<std::string> fields;
    for (const auto& b : bad)
      if (b.rfind(g.name + ":", 0) == 0) fields.push_back(b.substr(g.name.size() + 2));
    res.add({"golden_integrity", g.name, fields.empty(), {{"mismatched", fields}}});
  }
  res.summary = passed_count(res);
  res.seconds = since(start);
  return res;
}

CheckResult check_dp_exactness(const GoldenRegistry& registry, const SuiteOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "dp_exactness";
  double worst_z = 0.0, worst_m = 0.0, worst_h = 0.0;
  for (const auto& g : registry.instances) {
    const auto pot = g.table();
    const auto post = enumerate_posterior(pot);
    const auto fw = forward(pot);
    double brute_z = kNegInf;
    {
      std::vector<double> scores;
      for (const auto& p : post.paths) scores.push_back(path_score(pot, p));
      brute_z = logsumexp(scores);
    }
    const double dz = std::abs(fw.log_Z - brute_z);
    const double dm = max_abs_diff(marginals(pot), posterior_marginals(post));
    const double dh = std::abs(entropy(pot, fw) - posterior_entropy(post));
    const auto vit = viterbi(pot);
    const auto arg = posterior_argmax(post);
    worst_z = std::max(worst_z, dz);
    worst_m = std::max(worst_m, dm);
    worst_h = std::max(worst_h, dh);
    res.add({"dp_exactness.log_Z", g.name, dz <= g.bound("log_Z_tol"), {{"error", dz}, {"bound", g.bound("log_Z_tol")}}});
    res.add({"dp_exactness.marginals", g.name, dm <= g.bound("marginal_tol"),
             {{"error", dm}, {"bound", g.bound("marginal_tol")}}});
    res.add({"dp_exactness.entropy", g.name, dh <= g.bound("entropy_tol"),
             {{"error", dh}, {"bound", g.bound("entropy_tol")}}});
    res.add({"dp_exactness.viterbi", g.name, vit == arg, {{"viterbi", vit}, {"argmax", arg}}});
  }
  res.seconds = since(start);
  res.add({"dp_exactness.runtime", "all", res.seconds < options.dp_seconds,
           {{"seconds", res.seconds}, {"bound", options.dp_seconds}}});
  res.summary = passed_count(res) + "; worst log_Z " + fixed(worst_z, 2) + ", marginals " +
                fixed(worst_m, 2) + ", entropy " + fixed(worst_h, 2) + "; " + fixed(res.seconds, 3) + " s";
  return res;
}

CheckResult check_samplers(const GoldenRegistry& registry, const SuiteOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "samplers";
  double min_p = 1.0;
  for (std::size_t i = 0; i < registry.instances.size(); ++i) {
    const auto& g = registry.instances[i];
    const auto pot = g.table();
    const auto post = enumerate_posterior(pot);
    const auto fw = forward(pot);
    const std::uint64_t seed = instance_seed(options.seed, 200, g.name);
    GumbelNoiseStream a(seed), b(seed);
    std::vector<std::size_t> ffbs_counts(post.probs.size(), 0), gffbs_counts(post.probs.size(), 0);
    std::size_t identical = 0, coupled = 0;
    for (std::size_t n = 0; n < options.sampler_draws; ++n) {
      const auto hard = ffbs(pot, fw, a);
      const auto relaxed = gumbelized_ffbs(pot, fw, b, options.coupling_tau);
      ++ffbs_counts[post.index_of(hard)];
      ++gffbs_counts[post.index_of(relaxed.hard)];
      identical += hard == relaxed.hard;
      bool ok = true;
      for (std::size_t t = 0; t < pot.seq_len; ++t) {
        const auto row = relaxed.soft.row(t);
        ok = ok && static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
                       relaxed.hard[t];
      }
      coupled += ok;
    }
    const auto c1 = chi_square_gof(ffbs_counts, post.probs);
    const auto c2 = chi_square_gof(gffbs_counts, post.probs);
    min_p = std::min({min_p, c1.p_value, c2.p_value});
    res.add({"samplers.ffbs_chi_square", g.name, c1.p_value >= options.chi_square_alpha,
             {{"statistic", c1.statistic}, {"dof", c1.dof}, {"p_value", c1.p_value}, {"draws", options.sampler_draws}}});
    res.add({"samplers.gumbelized_ffbs_chi_square", g.name, c2.p_value >= options.chi_square_alpha,
             {{"statistic", c2.statistic}, {"dof", c2.dof}, {"p_value", c2.p_value}}});
    res.add({"samplers.argmax_coupling", g.name, coupled == options.sampler_draws,
             {{"coupled", coupled}, {"draws", options.sampler_draws}}});
    res.add({"samplers.shared_seed_identical", g.name, identical == options.sampler_draws,
             {{"identical", identical}, {"draws", options.sampler_draws}}});
  }
  res.summary = passed_count(res) + "; min chi-square p " + fixed(min_p, 3);
  res.seconds = since(start);
  return res;
}

CheckResult check_temperature_limit(const GoldenRegistry& registry, const SuiteOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "temperature_limit";
  double worst_share = 1.0;
  for (std::size_t i = 0; i < registry.instances.size(); ++i) {
    const auto& g = registry.instances[i];
    const auto pot = g.table();
    const auto fw = forward(pot);
    std::vector<double> mean_dev;
    std::size_t near = 0;
    for (double tau : options.tau_grid) {
      GumbelNoiseStream noise(instance_seed(options.seed, 300, g.name));
      CompensatedSum s;
      std::size_t close = 0;
      for (std::size_t n = 0; n < options.temperature_draws; ++n) {
        const double d = max_onehot_deviation(gumbelized_ffbs(pot, fw, noise, tau));
        s.add(d);
        close += d < options.near_onehot_tol;
      }
      mean_dev.push_back(s.value() / static_cast<double>(options.temperature_draws));
      near = close;
    }
    bool monotone = true;
    for (std::size_t k = 1; k < mean_dev.size(); ++k) monotone = monotone && mean_dev[k] <= mean_dev[k - 1];
    const double share = static_cast<double>(near) / static_cast<double>(options.temperature_draws);
    worst_share = std::min(worst_share, share);
    res.add({"temperature_limit.monotone", g.name, monotone, {{"taus", options.tau_grid}, {"mean_deviation", mean_dev}}});
    res.add({"temperature_limit.near_onehot", g.name, share >= options.near_onehot_share,
             {{"tau", options.tau_grid.back()}, {"share_below_tol", share}, {"tol", options.near_onehot_tol},
              {"required_share", options.near_onehot_share}}});
  }
  res.summary = passed_count(res) + "; lowest near-one-hot share at tau=" + fixed(options.tau_grid.back()) +
                " is " + fixed(worst_share) + " (required " + fixed(options.near_onehot_share) + ")";
  res.seconds = since(start);
  return res;
}

CheckResult check_pm_mrf_bias(const GoldenRegistry& registry, const SuiteOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "pm_mrf_bias";
  for (const auto* g : registry.with_role("adversarial")) {
    const auto pot = g->table();
    const auto post = enumerate_posterior(pot);
    const auto fw = forward(pot);
    const std::uint64_t seed = mix_seed(options.seed, 400);
    GumbelNoiseStream a(seed), b(seed);
    std::vector<std::size_t> pm(post.probs.size(), 0), ff(post.probs.size(), 0);
    for (std::size_t n = 0; n < options.sampler_draws; ++n) {
      ++pm[post.index_of(perturb_and_map(pot, a))];
      ++ff[post.index_of(ffbs(pot, fw, b))];
    }
    const double pm_tv = tv_distance(pm, post.probs), ff_tv = tv_distance(ff, post.probs);
    res.add({"pm_mrf_bias.pm_tv_floor", g->name, pm_tv > g->bound("pm_tv_floor"),
             {{"tv", pm_tv}, {"floor", g->bound("pm_tv_floor")}, {"draws", options.sampler_draws}}});
    res.add({"pm_mrf_bias.ffbs_tv_ceiling", g->name, ff_tv < g->bound("ffbs_tv_ceiling"),
             {{"tv", ff_tv}, {"ceiling", g->bound("ffbs_tv_ceiling")}, {"draws", options.sampler_draws}}});
    res.summary = "pm-mrf tv " + fixed(pm_tv) + " (floor " + fixed(g->bound("pm_tv_floor")) + "), ffbs tv " +
                  fixed(ff_tv) + " (ceiling " + fixed(g->bound("ffbs_tv_ceiling")) + ")";
  }
  if (res.records.empty()) res.add({"pm_mrf_bias.instance", "adversarial", false, {{"error", "no adversarial instance"}}});
  res.seconds = since(start);
  return res;
}

CheckResult check_unbiasedness(const GoldenRegistry& registry, const SuiteOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "unbiasedness";
  std::size_t components = 0, outside = 0;
  double worst_z = 0.0, slowest = 0.0;
  for (std::size_t i = 0; i < registry.instances.size(); ++i) {
    const auto& g = registry.instances[i];
    const auto inst_start = Clock::now();
    const auto pot = g.table();
    const auto f = g.objective();
    const auto oracle = exact_gradient(f, pot).gradient;
    for (auto kind : {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC}) {
      EstimatorSettings s;
      s.samples = options.unbiased_samples;
      s.baseline_c = kind == EstimatorKind::ReinforceMsC ? registry.benchmark.baseline_c : 0.0;
      RunOptions run;
      run.estimates = options.unbiased_budget / options.unbiased_samples;
      run.seed = instance_seed(options.seed, 500, g.name);
      run.workers = options.workers;
      const auto grads = collect_estimates(kind, f, pot, s, run);
      const auto m = summarize(grads);
      const double n = static_cast<double>(grads.size());
      std::vector<std::size_t> failed;
      nlohmann::json failed_detail = nlohmann::json::array();
      double inst_worst = 0.0;
      for (std::size_t d = 0; d < oracle.size(); ++d) {
        ++components;
        bool ok;
        if (m.variance[d] == 0.0) {
          ok = std::abs(m.mean[d] - oracle[d]) <= 1e-12;
        } else {
          const double z = std::abs(m.mean[d] - oracle[d]) / std::sqrt(m.variance[d] / n);
          inst_worst = std::max(inst_worst, z);
          ok = z < options.z_sigmas;
        }
        if (!ok) {
          failed.push_back(d);
          failed_detail.push_back({{"component", d}, {"mean", m.mean[d]}, {"oracle", oracle[d]},
                                   {"std_error", std::sqrt(m.variance[d] / n)}});
        }
      }
      outside += failed.size();
      worst_z = std::max(worst_z, inst_worst);
      res.add({"unbiasedness." + to_string(kind), g.name, failed.empty(),
               {{"components", oracle.size()}, {"failed_components", failed}, {"failed_detail", failed_detail},
                {"max_abs_z", inst_worst},
                {"estimates", grads.size()}, {"samples_per_estimate", options.unbiased_samples}}});
    }
    const double secs = since(inst_start);
    slowest = std::max(slowest, secs);
    res.add({"unbiasedness.runtime", g.name, secs < options.unbiased_seconds,
             {{"seconds", secs}, {"bound", options.unbiased_seconds}}});
  }
  const double expected = components * std::erfc(options.z_sigmas / std::sqrt(2.0));
  res.summary = passed_count(res) + "; " + std::to_string(outside) + " of " + std::to_string(components) +
                " components beyond " + fixed(options.z_sigmas) + " sigma (" + fixed(expected, 3) +
                " expected by chance), max |z| " + fixed(worst_z) + ", slowest instance " +
                fixed(slowest, 3) + " s";
  res.seconds = since(start);
  return res;
}

CheckResult check_primitive_gradients(const SuiteOptions& options) {
  using ad::Var;
  using Op = std::function<Var(Var)>;
  struct Case {
    const char* name;
    std::size_t rows, cols, out_rows, out_cols;
    double lo, hi;
    Op op;
  };
  const std::vector<Case> cases = {
      {"add", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::add(a, ad::mul(a, a)); }},
      {"add_row_broadcast", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::add(ad::mul(a, a), ad::gather_row(a, 1)); }},
      {"sub", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::sub(ad::mul(a, a), ad::gather_row(a, 2)); }},
      {"mul", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::mul(a, a); }},
      {"mul_row_broadcast", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::mul(a, ad::gather_row(a, 0)); }},
      {"matmul", 3, 3, 3, 3, -2, 2, [](Var a) { return ad::matmul(a, a); }},
      {"transpose", 3, 4, 4, 3, -2, 2, [](Var a) { return ad::transpose(ad::mul(a, a)); }},
      {"gather_row", 3, 4, 1, 4, -2, 2, [](Var a) { return ad::mul(ad::gather_row(a, 2), ad::gather_row(a, 1)); }},
      {"pick", 3, 4, 1, 1, -2, 2, [](Var a) { return ad::mul(ad::pick(a, 1, 2), ad::pick(a, 2, 3)); }},
      {"concat_cols", 2, 3, 2, 6, -2, 2, [](Var a) { return ad::concat_cols({a, ad::mul(a, a)}); }},
      {"concat_rows", 2, 3, 4, 3, -2, 2, [](Var a) {
         const Var parts[] = {ad::mul(a, a), a};
         return ad::concat_rows(parts);
       }},
      {"tanh", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::tanh(a); }},
      {"log", 3, 4, 3, 4, 0.2, 3, [](Var a) { return ad::log(a); }},
      {"exp", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::exp(a); }},
      {"softmax_tau_1", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::softmax_with_temperature(a, 1.0); }},
      {"softmax_tau_0.5", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::softmax_with_temperature(a, 0.5); }},
      {"softmax_tau_3", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::softmax_with_temperature(a, 3.0); }},
      {"log_softmax_row", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::log_softmax_row(a); }},
      {"logsumexp_row", 3, 4, 3, 1, -2, 2, [](Var a) { return ad::logsumexp_row(a); }},
      {"max_row", 3, 4, 3, 1, -2, 2, [](Var a) { return ad::max_row(a); }},
      {"reshape", 3, 4, 2, 6, -2, 2, [](Var a) { return ad::reshape(ad::mul(a, a), 2, 6); }},
      {"sum", 3, 4, 1, 1, -2, 2, [](Var a) { return ad::sum(ad::mul(a, a)); }},
      {"mean", 3, 4, 1, 1, -2, 2, [](Var a) { return ad::mean(ad::mul(a, a)); }},
      {"scalar_scale", 3, 4, 3, 4, -2, 2, [](Var a) { return ad::scalar_scale(ad::mul(a, a), -1.7); }},
      {"straight_through", 3, 4, 3, 4, -2, 2, [](Var a) {
         const auto sq = ad::mul(a, a);
         return ad::straight_through(a.tape().constant(sq.to_matrix()), sq);
       }},
  };
  const auto start = Clock::now();
  CheckResult res;
  res.name = "primitive_gradients";
  Rng rng(mix_seed(options.seed, 600));
  auto random = [&](std::size_t r, std::size_t c, double lo, double hi) {
    Matrix m(r, c);
    for (double& v : m.data()) v = lo + (hi - lo) * rng.uniform();
    return m;
  };
  double worst_all = 0.0;
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::size_t trial = 0; trial < options.primitive_trials; ++trial) {
      const auto x = random(c.rows, c.cols, c.lo, c.hi);
      const auto probe = random(c.out_rows, c.out_cols, -2.0, 2.0);
      ad::Tape tape;
      const auto leaf = tape.leaf(x);
      tape.backprop(ad::sum(ad::mul(c.op(leaf), tape.constant(probe))));
      const auto analytic = tape.grad_vector(leaf);
      auto loss = [&](std::span<const double> p) {
        ad::Tape t;
        Matrix xm(x.rows(), x.cols());
        std::copy(p.begin(), p.end(), xm.data().begin());
        return ad::sum(ad::mul(c.op(t.leaf(xm)), t.constant(probe))).scalar();
      };
      worst = std::max(worst, ad::relative_error(analytic, ad::finite_diff(loss, x.data(), 1e-5)));
    }
    worst_all = std::max(worst_all, worst);
    res.add({"primitive_gradients", c.name, worst < options.primitive_tol,
             {{"max_rel_error", worst}, {"bound", options.primitive_tol}, {"trials", options.primitive_trials}}});
  }
  res.summary = passed_count(res) + "; worst rel. err. " + fixed(worst_all, 3);
  res.seconds = since(start);
  return res;
}

CheckResult check_reparameterization(const GoldenRegistry& registry, const SuiteOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "reparameterization";
  double worst = 0.0;
  for (std::size_t i = 0; i < registry.instances.size(); ++i) {
    const auto& g = registry.instances[i];
    const auto pot = g.table();
    const auto f = g.objective();
    const auto flat = flatten_potentials(pot);
    for (auto kind : {EstimatorKind::GumbelCrf, EstimatorKind::PmMrf})
      for (double tau : options.fd_taus) {
        double inst_worst = 0.0;
        for (std::size_t k = 0; k < options.fd_seeds; ++k) {
          EstimatorSettings s;
          s.tau = tau;
          std::vector<double> noise;
          GumbelNoiseStream stream(mix_seed(instance_seed(options.seed, 700, g.name), k));
          stream.record_into(&noise);
          const auto est = estimate_gradient(kind, f, pot, s, stream);
          auto loss = [&](std::span<const double> p) {
            auto replay = GumbelNoiseStream::replay(noise);
            return estimate_gradient(kind, f, unflatten_potentials(p, pot.num_states, pot.seq_len), s, replay)
                .objective;
          };
          inst_worst = std::max(inst_worst, ad::relative_error(est.gradient, ad::finite_diff(loss, flat, 1e-5)));
        }
        worst = std::max(worst, inst_worst);
        res.add({"reparameterization." + to_string(kind), g.name, inst_worst < options.fd_tol,
                 {{"tau", tau}, {"max_rel_error", inst_worst}, {"bound", options.fd_tol}, {"seeds", options.fd_seeds}}});
      }
  }
  res.summary = passed_count(res) + "; worst rel. err. " + fixed(worst, 3);
  res.seconds = since(start);
  return res;
}

void to_json(nlohmann::json& j, const BenchmarkRow& row) {
  j = nlohmann::json{{"instance", row.instance},
                     {"estimator", to_string(row.estimator)},
                     {"seed", row.seed},
                     {"budget", row.budget},
                     {"tau", std::isnan(row.tau) ? nlohmann::json(nullptr) : nlohmann::json(row.tau)}};
  if (!row.error.empty())
    j["error"] = row.error;
  else
    j["report"] = row.report;
}

BenchmarkPlan benchmark_plan(const GoldenRegistry& registry) {
  const auto& b = registry.benchmark;
  BenchmarkPlan p;
  p.instances = b.instances;
  p.estimators = {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC, EstimatorKind::GumbelCrf,
                  EstimatorKind::GumbelCrfSt};
  p.taus = b.taus;
  p.budgets = b.budgets;
  p.seeds = b.seeds;
  p.estimates = b.estimates;
  p.baseline_c = b.baseline_c;
  return p;
}

std::vector<BenchmarkRow> run_benchmark(const GoldenRegistry& registry, const BenchmarkPlan& plan,
                                        const std::function<void(const BenchmarkRow&)>& on_row) {
  std::vector<BenchmarkRow> rows;
  for (const auto& name : plan.instances) {
    const auto& g = registry.find(name);
    const std::size_t idx = instance_index(registry, name);
    const auto pot = g.table();
    auto f = g.objective();
    f.accepts_soft = !plan.hard_only_objective;
    const auto oracle = exact_gradient(f, pot).gradient;
    for (auto kind : plan.estimators) {
      const std::vector<double> taus =
          is_relaxed(kind) ? plan.taus : std::vector<double>{std::numeric_limits<double>::quiet_NaN()};
      for (auto seed : plan.seeds)
        for (double tau : taus)
          for (auto budget : plan.budgets) {
            BenchmarkRow row;
            row.instance = name;
            row.estimator = kind;
            row.seed = seed;
            row.budget = budget;
            row.tau = tau;
            EstimatorSettings s;
            s.samples = budget;
            if (is_relaxed(kind)) s.tau = tau;
            if (kind == EstimatorKind::ReinforceMsC) s.baseline_c = plan.baseline_c;
            RunOptions run;
            run.estimates = plan.estimates;
            run.seed = mix_seed(seed, idx);
            run.workers = plan.workers;
            run.oracle = &oracle;
            try {
              row.report = run_estimator(kind, f, pot, s, run);
            } catch (const std::invalid_argument& e) {
              row.error = e.what();
            }
            if (on_row) on_row(row);
            rows.push_back(std::move(row));
          }
    }
  }
  return rows;
}

CheckResult check_variance_ordering(const std::vector<BenchmarkRow>& rows, double required_share) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "variance_ordering";
  auto find = [&](const BenchmarkRow& like, EstimatorKind kind) -> const BenchmarkRow* {
    for (const auto& r : rows)
      if (r.instance == like.instance && r.seed == like.seed && r.budget == like.budget && r.estimator == kind &&
          r.error.empty())
        return &r;
    return nullptr;
  };
  std::size_t points = 0, below = 0;
  std::vector<nlohmann::json> detail;
  for (const auto& r : rows) {
    if (!r.error.empty() || (r.estimator != EstimatorKind::GumbelCrf && r.estimator != EstimatorKind::GumbelCrfSt))
      continue;
    for (auto base : {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC}) {
      const auto* b = find(r, base);
      if (!b) continue;
      const auto& rr = r.report.variance_ratio;
      const auto& br = b->report.variance_ratio;
      const bool ok = !rr.degenerate && !br.degenerate && rr.value < br.value;
      ++points;
      below += ok;
      detail.push_back({{"instance", r.instance}, {"seed", r.seed}, {"tau", r.tau}, {"budget", r.budget},
                        {"relaxed", to_string(r.estimator)}, {"score_function", to_string(base)},
                        {"r_relaxed", rr.value}, {"r_score_function", br.value}, {"below", ok}});
    }
  }
  const double share = points ? static_cast<double>(below) / static_cast<double>(points) : 0.0;
  res.add({"variance_ordering", "benchmark", points > 0 && share >= required_share,
           {{"points", points}, {"below", below}, {"share", share}, {"required_share", required_share},
            {"comparisons", detail}}});
  res.summary = std::to_string(below) + "/" + std::to_string(points) + " points with r(relaxed) < r(score function), share " +
                fixed(share, 3) + " (required " + fixed(required_share) + ")";
  res.seconds = since(start);
  return res;
}

CheckResult check_budget_accounting(const GoldenRegistry& registry, const BudgetAccountingOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "budget_accounting";
  std::vector<std::string> parts;
  for (const auto& name : registry.benchmark.instances) {
    const auto& g = registry.find(name);
    const std::size_t idx = instance_index(registry, name);
    const auto pot = g.table();
    const auto f = g.objective();
    RunOptions run;
    run.estimates = options.estimates;
    run.seed = mix_seed(options.seed, idx);
    run.workers = options.workers;
    EstimatorSettings rs;
    rs.samples = 1;
    rs.tau = options.tau;
    const auto relaxed = run_estimator(EstimatorKind::GumbelCrfSt, f, pot, rs, run);
    const bool one_sample =
        relaxed.samples_per_estimate == 1 && relaxed.total_samples == relaxed.estimates;
    const double target = relaxed.variance_ratio.value;
    for (auto kind : {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC}) {
      EstimatorSettings s;
      s.baseline_c = kind == EstimatorKind::ReinforceMsC ? registry.benchmark.baseline_c : 0.0;
      std::optional<std::size_t> matched;
      GradReport at_match;
      nlohmann::json curve = nlohmann::json::array();
      for (auto n : options.ms_budgets) {
        s.samples = n;
        const auto rep = run_estimator(kind, f, pot, s, run);
        curve.push_back({{"budget", n}, {"r", rep.variance_ratio.value},
                         {"seconds_per_estimate", rep.seconds_per_estimate}});
        if (!rep.variance_ratio.degenerate && rep.variance_ratio.value <= target) {
          matched = n;
          at_match = rep;
          break;
        }
      }
      const bool ok = one_sample && !relaxed.variance_ratio.degenerate &&
                      (!matched || (*matched >= 2 && at_match.samples_per_estimate == *matched));
      nlohmann::json d{{"target_r", target},
                       {"relaxed_samples_per_estimate", relaxed.samples_per_estimate},
                       {"relaxed_total_samples", relaxed.total_samples},
                       {"relaxed_seconds_per_estimate", relaxed.seconds_per_estimate},
                       {"tau", options.tau},
                       {"curve", curve}};
      if (matched) {
        d["matched_budget"] = *matched;
        d["matched_seconds_per_estimate"] = at_match.seconds_per_estimate;
      } else {
        d["matched_budget"] = nullptr;
      }
      res.add({"budget_accounting." + to_string(kind), name, ok, d});
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s %s N=%s (%.2g s/est vs %.2g s/est)", name.c_str(),
                    kind == EstimatorKind::ReinforceMs ? "ms" : "ms_c",
                    matched ? std::to_string(*matched).c_str() : ">64",
                    matched ? at_match.seconds_per_estimate : 0.0, relaxed.seconds_per_estimate);
      parts.push_back(buf);
    }
  }
  res.summary = "gumbel_crf_st uses 1 sample/estimate; score function needs";
  for (std::size_t i = 0; i < parts.size(); ++i) res.summary += (i ? "; " : " ") + parts[i];
  res.seconds = since(start);
  return res;
}

VaeAcceptanceOptions default_vae_acceptance() {
  VaeAcceptanceOptions o;
  o.data.num_states = 5;
  o.data.vocab = 20;
  o.data.seq_len = 10;
  o.data.train_size = 2000;
  o.data.seed = 1;
  o.train.dims.num_states = 5;
  o.train.dims.vocab = 20;
  o.train.estimator = EstimatorKind::GumbelCrfSt;
  o.train.epochs = 20;
  o.train.learning_rate = 0.1;
  o.train.workers = 1;
  return o;
}

vae::InferenceParams uniform_collapse_checkpoint(const vae::ModelDims& dims) {
  Rng rng(0);
  return vae::init_inference(dims, rng, 0.0);
}

vae::InferenceParams constant_collapse_checkpoint(const vae::ModelDims& dims) {
  auto phi = uniform_collapse_checkpoint(dims);
  phi.emit_bias(0, 0) = 12.0;
  return phi;
}

CheckResult check_vae_end_to_end(const VaeAcceptanceOptions& options) {
  const auto start = Clock::now();
  CheckResult res;
  res.name = "vae_end_to_end";
  const auto data = generate_hmm_dataset(options.data);
  const auto& cfg = options.train;
  Rng init(mix_seed(cfg.seed, 0));
  const auto theta0 = vae::init_generative(cfg.dims, init, cfg.init_scale);
  const auto phi0 = vae::init_inference(cfg.dims, init, cfg.init_scale);

  const auto train_start = Clock::now();
  const auto result = vae::train(theta0, phi0, data.train, data.val, cfg, options.on_epoch);
  double is_nll = 0.0;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    auto noise = GumbelNoiseStream::derived(mix_seed(cfg.seed, 800), i);
    is_nll += vae::importance_nll(result.theta, result.phi, data.test[i], options.is_samples, noise);
  }
  is_nll /= static_cast<double>(data.test.size());
  const double seconds = since(train_start);
  const double true_nll = data.generator.mean_nll(data.test);
  const double rel = std::abs(is_nll - true_nll) / true_nll;
  res.add({"vae_end_to_end.nll", "gumbel_crf_st", rel <= options.nll_tolerance && seconds < options.seconds_limit,
           {{"is_nll", is_nll}, {"true_nll", true_nll}, {"relative_gap", rel}, {"tolerance", options.nll_tolerance},
            {"seconds", seconds}, {"seconds_limit", options.seconds_limit}, {"best_epoch", result.best_epoch},
            {"is_samples", options.is_samples}}});

  // ELBO bound on short sequences where every z can be enumerated.
  Rng item_rng(mix_seed(options.data.seed, 900));
  std::vector<vae::Sentence> items;
  for (std::size_t i = 0; i < options.oracle_items; ++i)
    items.push_back(sample_hmm(data.generator, options.oracle_len, item_rng).first);
  std::vector<double> exact;
  for (const auto& x : items) exact.push_back(vae::exact_log_likelihood(result.theta, x));
  for (auto kind : {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC, EstimatorKind::GumbelCrf,
                    EstimatorKind::GumbelCrfSt, EstimatorKind::PmMrf, EstimatorKind::PmMrfSt}) {
    vae::ElboSettings s;
    s.estimator = kind;
    s.beta = 1.0;
    s.estimator_settings.samples = is_score_function(kind) ? 2 : 1;
    s.estimator_settings.baseline_c = kind == EstimatorKind::ReinforceMsC ? cfg.baseline_c : 0.0;
    s.estimator_settings.tau = cfg.tau_at(cfg.epochs ? cfg.epochs - 1 : 0);
    std::size_t violations = 0;
    double max_excess_sigma = -std::numeric_limits<double>::infinity(), min_gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < items.size(); ++i) {
      std::vector<double> v;
      for (std::size_t m = 0; m < options.elbo_estimates; ++m) {
        auto noise = GumbelNoiseStream::derived(mix_seed(cfg.seed, 1000 + i), m);
        ad::Tape tape;
        const auto t = vae::elbo_terms(vae::record(tape, result.theta), vae::record(tape, result.phi), items[i], s, noise);
        v.push_back(t.expected_joint + t.entropy);
      }
      double mean = 0.0, var = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      for (double x : v) var += (x - mean) * (x - mean);
      const double se = std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
      const double excess = mean - exact[i];
      min_gap = std::min(min_gap, -excess);
      if (se > 0.0) max_excess_sigma = std::max(max_excess_sigma, excess / se);
      if (excess > options.z_sigmas * se + 1e-10) ++violations;
    }
    res.add({"vae_end_to_end.elbo_bound", to_string(kind), violations == 0,
             {{"items", items.size()}, {"seq_len", options.oracle_len}, {"violations", violations},
              {"max_excess_sigma", max_excess_sigma}, {"min_gap", min_gap}, {"estimates", options.elbo_estimates}}});
  }

  const auto uni = vae::collapse_diagnostics(uniform_collapse_checkpoint(cfg.dims), data.val);
  const auto con = vae::collapse_diagnostics(constant_collapse_checkpoint(cfg.dims), data.val);
  const auto trained = vae::collapse_diagnostics(result.phi, data.val);
  res.add({"vae_end_to_end.collapse_uniform", "uniform_checkpoint", uni.uniform_collapse && !uni.constant_collapse,
           {{"uniform_score", uni.uniform_score}, {"constant_score", uni.constant_score}}});
  res.add({"vae_end_to_end.collapse_constant", "constant_checkpoint", con.constant_collapse && !con.uniform_collapse,
           {{"uniform_score", con.uniform_score}, {"constant_score", con.constant_score}}});

  res.summary = "IS-NLL " + fixed(is_nll, 5) + " vs true " + fixed(true_nll, 5) + " (gap " + fixed(100 * rel, 3) +
                "%, " + fixed(seconds, 3) + " s); " + passed_count(res) + "; trained posterior uniform score " +
                fixed(trained.uniform_score, 3) + ", constant score " + fixed(trained.constant_score, 3);
  res.seconds = since(start);
  return res;
}

}  // namespace gcrf
