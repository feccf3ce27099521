#include "gcrf/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gcrf/sampling.hpp"

namespace gcrf {

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kKnownKeys = {
    "seed", "out", "workers", "golden",
    "check.sampler_draws", "check.chi_square_alpha", "check.unbiased_budget", "check.unbiased_samples",
    "check.z_sigmas", "check.unbiased_seconds", "check.fd_seeds", "check.fd_tol", "check.primitive_trials",
    "check.primitive_tol",
    "estimate.instances", "estimate.estimators", "estimate.taus", "estimate.budgets", "estimate.seeds",
    "estimate.estimates", "estimate.baseline_c", "estimate.hard_only_objective",
    "data.num_states", "data.vocab", "data.seq_len", "data.train_size", "data.val_size", "data.test_size",
    "data.emission_mass", "data.seed",
    "train.estimator", "train.samples", "train.baseline_c", "train.beta", "train.tau_initial",
    "train.tau_floor", "train.tau_decay", "train.dropout_initial", "train.dropout_zero_epoch", "train.epochs",
    "train.batch_size", "train.learning_rate", "train.clip_norm", "train.init_scale", "train.seed",
    "train.is_samples_select", "train.probe_batch", "train.probe_estimates", "train.embed", "train.hidden",
    "train.encoder", "train.is_samples",
    "sample.table", "sample.count", "sample.tau", "sample.samplers",
};

EstimatorKind parse_estimator(const std::string& name) {
  try {
    return estimator_from_string(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

fs::path output_dir(const Config& cfg) {
  const fs::path dir = cfg.get<std::string>("out", "gcrf_out");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  return out;
}

template <class T>
void require_positive(const T& v, const std::string& key) {
  if (!(v > 0)) throw ConfigError("config key '" + key + "' must be positive");
}

}  // namespace

Config resolve_config(const std::string& command, const CommandFlags& flags) {
  Config cfg = flags.config ? Config::load(*flags.config) : Config();
  cfg.require_known(kKnownKeys);
  auto inapplicable = [&](const char* flag) {
    throw ConfigError(std::string(flag) + " does not apply to '" + command + "'");
  };
  if (flags.out) cfg.set("out", *flags.out);
  if (flags.seed) {
    cfg.set("seed", *flags.seed);
    if (command == "estimate") cfg.set("estimate.seeds", nlohmann::json::array({*flags.seed}));
    if (command == "train") cfg.set("train.seed", *flags.seed);
  }
  if (flags.estimator) {
    parse_estimator(*flags.estimator);
    if (command == "estimate")
      cfg.set("estimate.estimators", nlohmann::json::array({*flags.estimator}));
    else if (command == "train")
      cfg.set("train.estimator", *flags.estimator);
    else
      inapplicable("--estimator");
  }
  if (flags.tau) {
    if (!(*flags.tau > 0.0)) throw ConfigError("--tau must be positive");
    if (command == "estimate") {
      cfg.set("estimate.taus", nlohmann::json::array({*flags.tau}));
    } else if (command == "train") {
      cfg.set("train.tau_initial", *flags.tau);
      cfg.set("train.tau_floor", *flags.tau);
    } else if (command == "sample") {
      cfg.set("sample.tau", *flags.tau);
    } else {
      inapplicable("--tau");
    }
  }
  if (flags.budget) {
    if (*flags.budget == 0) throw ConfigError("--budget must be positive");
    if (command == "estimate")
      cfg.set("estimate.budgets", nlohmann::json::array({*flags.budget}));
    else if (command == "train")
      cfg.set("train.samples", *flags.budget);
    else if (command == "sample")
      cfg.set("sample.count", *flags.budget);
    else
      cfg.set("check.unbiased_budget", *flags.budget);
  }
  if (flags.table) {
    if (command != "sample") inapplicable("--table");
    cfg.set("sample.table", *flags.table);
  }
  return cfg;
}

GoldenRegistry registry_for(const Config& cfg) {
  const auto path = cfg.get<std::string>("golden", GCRF_DEFAULT_GOLDEN);
  try {
    return load_golden(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

SuiteOptions suite_options(const Config& cfg) {
  SuiteOptions o;
  o.seed = cfg.get<std::uint64_t>("seed", o.seed);
  o.workers = cfg.get<std::size_t>("workers", o.workers);
  o.sampler_draws = cfg.get<std::size_t>("check.sampler_draws", o.sampler_draws);
  o.chi_square_alpha = cfg.get<double>("check.chi_square_alpha", o.chi_square_alpha);
  o.unbiased_budget = cfg.get<std::size_t>("check.unbiased_budget", o.unbiased_budget);
  o.unbiased_samples = cfg.get<std::size_t>("check.unbiased_samples", o.unbiased_samples);
  o.z_sigmas = cfg.get<double>("check.z_sigmas", o.z_sigmas);
  o.unbiased_seconds = cfg.get<double>("check.unbiased_seconds", o.unbiased_seconds);
  o.fd_seeds = cfg.get<std::size_t>("check.fd_seeds", o.fd_seeds);
  o.fd_tol = cfg.get<double>("check.fd_tol", o.fd_tol);
  o.primitive_trials = cfg.get<std::size_t>("check.primitive_trials", o.primitive_trials);
  o.primitive_tol = cfg.get<double>("check.primitive_tol", o.primitive_tol);
  require_positive(o.workers, "workers");
  require_positive(o.sampler_draws, "check.sampler_draws");
  if (o.unbiased_samples < 2) throw ConfigError("config key 'check.unbiased_samples' must be at least 2");
  if (o.unbiased_budget < 2 * o.unbiased_samples)
    throw ConfigError("config key 'check.unbiased_budget' must allow at least two estimates");
  require_positive(o.z_sigmas, "check.z_sigmas");
  return o;
}

BenchmarkPlan estimate_plan(const Config& cfg, const GoldenRegistry& registry) {
  BenchmarkPlan p = benchmark_plan(registry);
  p.instances = cfg.get("estimate.instances", p.instances);
  std::vector<std::string> names;
  for (auto k : p.estimators) names.push_back(to_string(k));
  names = cfg.get("estimate.estimators", names);
  p.estimators.clear();
  for (const auto& n : names) p.estimators.push_back(parse_estimator(n));
  p.taus = cfg.get("estimate.taus", p.taus);
  p.budgets = cfg.get("estimate.budgets", p.budgets);
  if (cfg.has("seed")) p.seeds = {cfg.get<std::uint64_t>("seed", 1)};
  p.seeds = cfg.get("estimate.seeds", p.seeds);
  p.estimates = cfg.get("estimate.estimates", p.estimates);
  p.baseline_c = cfg.get("estimate.baseline_c", p.baseline_c);
  p.hard_only_objective = cfg.get("estimate.hard_only_objective", p.hard_only_objective);
  p.workers = cfg.get<std::size_t>("workers", 1);
  for (const auto& n : p.instances) {
    try {
      registry.find(n);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (p.instances.empty() || p.estimators.empty() || p.budgets.empty() || p.seeds.empty())
    throw ConfigError("estimate: instances, estimators, budgets and seeds must be non-empty");
  for (double t : p.taus) require_positive(t, "estimate.taus");
  for (auto b : p.budgets) require_positive(b, "estimate.budgets");
  if (p.estimates < 2) throw ConfigError("config key 'estimate.estimates' must be at least 2");
  if (std::any_of(p.estimators.begin(), p.estimators.end(), is_relaxed) && p.taus.empty())
    throw ConfigError("estimate: relaxed estimators need at least one tau");
  require_positive(p.workers, "workers");
  return p;
}

HmmDatasetSpec dataset_spec(const Config& cfg) {
  HmmDatasetSpec s;
  s.num_states = cfg.get("data.num_states", s.num_states);
  s.vocab = cfg.get("data.vocab", s.vocab);
  s.seq_len = cfg.get("data.seq_len", s.seq_len);
  s.train_size = cfg.get("data.train_size", s.train_size);
  s.val_size = cfg.get("data.val_size", s.val_size);
  s.test_size = cfg.get("data.test_size", s.test_size);
  s.emission_mass = cfg.get("data.emission_mass", s.emission_mass);
  s.seed = cfg.get("data.seed", s.seed);
  require_positive(s.num_states, "data.num_states");
  require_positive(s.vocab, "data.vocab");
  require_positive(s.seq_len, "data.seq_len");
  require_positive(s.train_size, "data.train_size");
  if (!(s.emission_mass > 0.0 && s.emission_mass <= 1.0))
    throw ConfigError("config key 'data.emission_mass' must lie in (0, 1]");
  return s;
}

vae::TrainConfig train_config(const Config& cfg) {
  vae::TrainConfig c;
  c.dims.num_states = cfg.get("data.num_states", c.dims.num_states);
  c.dims.vocab = cfg.get("data.vocab", c.dims.vocab);
  c.dims.embed = cfg.get("train.embed", c.dims.embed);
  c.dims.hidden = cfg.get("train.hidden", c.dims.hidden);
  c.dims.encoder = cfg.get("train.encoder", c.dims.encoder);
  c.estimator = parse_estimator(cfg.get<std::string>("train.estimator", to_string(c.estimator)));
  c.samples = cfg.get("train.samples", c.samples);
  c.baseline_c = cfg.get("train.baseline_c", c.baseline_c);
  c.beta = cfg.get("train.beta", c.beta);
  c.tau_initial = cfg.get("train.tau_initial", c.tau_initial);
  c.tau_floor = cfg.get("train.tau_floor", c.tau_floor);
  c.tau_decay = cfg.get("train.tau_decay", c.tau_decay);
  c.dropout_initial = cfg.get("train.dropout_initial", c.dropout_initial);
  c.dropout_zero_epoch = cfg.get("train.dropout_zero_epoch", c.dropout_zero_epoch);
  c.epochs = cfg.get("train.epochs", c.epochs);
  c.batch_size = cfg.get("train.batch_size", c.batch_size);
  c.learning_rate = cfg.get("train.learning_rate", c.learning_rate);
  c.clip_norm = cfg.get("train.clip_norm", c.clip_norm);
  c.init_scale = cfg.get("train.init_scale", c.init_scale);
  c.seed = cfg.get("train.seed", cfg.get<std::uint64_t>("seed", c.seed));
  c.is_samples_select = cfg.get("train.is_samples_select", c.is_samples_select);
  c.probe_batch = cfg.get("train.probe_batch", c.probe_batch);
  c.probe_estimates = cfg.get("train.probe_estimates", c.probe_estimates);
  c.workers = cfg.get<std::size_t>("workers", c.workers);
  if (c.tau_floor > c.tau_initial) c.tau_floor = c.tau_initial;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

int cmd_check(const Config& cfg, std::ostream& out, std::ostream& log) {
  const auto registry = registry_for(cfg);
  const auto o = suite_options(cfg);
  std::ofstream file;
  if (cfg.has("out")) file = open_output(output_dir(cfg) / "check.jsonl");
  std::vector<std::string> failures;
  auto emit = [&](const CheckResult& r) {
    for (const auto& rec : r.records) {
      nlohmann::json j = rec;
      j["suite"] = r.name;
      const auto line = j.dump();
      out << line << '\n';
      if (file.is_open()) file << line << '\n';
    }
    log << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.summary << " [" << r.seconds << " s]\n";
    for (const auto& f : r.failures()) {
      log << "  failed: " << f << '\n';
      failures.push_back(f);
    }
    out.flush();
  };
  emit(check_golden_integrity(registry));
  emit(check_dp_exactness(registry, o));
  emit(check_samplers(registry, o));
  emit(check_pm_mrf_bias(registry, o));
  emit(check_unbiasedness(registry, o));
  emit(check_primitive_gradients(o));
  emit(check_reparameterization(registry, o));
  log << (failures.empty() ? "all checks passed" : std::to_string(failures.size()) + " checks failed") << '\n';
  return failures.empty() ? kExitOk : kExitFailure;
}

std::string variance_csv_header() { return "estimator,seed,budget,tau,r,bias_norm,seconds"; }

std::string variance_csv_row(const BenchmarkRow& row) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  const auto& rep = row.report;
  std::string s = to_string(row.estimator) + "," + std::to_string(row.seed) + "," + std::to_string(row.budget) + ",";
  s += std::isnan(row.tau) ? "" : num(row.tau);
  s += ",";
  s += rep.variance_ratio.degenerate ? "" : num(rep.variance_ratio.value);
  s += ",";
  s += rep.bias_norm ? num(*rep.bias_norm) : "";
  s += "," + num(rep.seconds);
  return s;
}

int cmd_estimate(const Config& cfg, std::ostream& log) {
  const auto registry = registry_for(cfg);
  const auto plan = estimate_plan(cfg, registry);
  const auto dir = output_dir(cfg);
  auto jsonl = open_output(dir / "grad_reports.jsonl");
  auto csv = open_output(dir / "variance.csv");
  csv << (plan.instances.size() > 1 ? "instance," : "") << variance_csv_header() << '\n';
  std::size_t errors = 0;
  const auto rows = run_benchmark(registry, plan, [&](const BenchmarkRow& row) {
    jsonl << nlohmann::json(row).dump() << '\n';
    if (!row.error.empty()) {
      ++errors;
      log << "incompatible: " << row.instance << " " << to_string(row.estimator) << ": " << row.error << '\n';
      return;
    }
    csv << (plan.instances.size() > 1 ? row.instance + "," : "") << variance_csv_row(row) << '\n';
  });
  log << "wrote " << rows.size() << " reports to " << (dir / "grad_reports.jsonl").string() << " and "
      << (dir / "variance.csv").string();
  if (errors) log << " (" << errors << " incompatible rows)";
  log << '\n';
  const auto ordering = check_variance_ordering(rows, registry.benchmark.order_fraction);
  if (ordering.records.front().detail.at("points").get<std::size_t>() > 0) log << "ordering: " << ordering.summary << '\n';
  return kExitOk;
}

int cmd_train(const Config& cfg, std::ostream& log) {
  const auto spec = dataset_spec(cfg);
  auto config = train_config(cfg);
  const auto is_samples = cfg.get<std::size_t>("train.is_samples", 100);
  require_positive(is_samples, "train.is_samples");
  if (config.dims.num_states != spec.num_states || config.dims.vocab != spec.vocab)
    throw ConfigError("model and data sizes disagree");
  const auto dir = output_dir(cfg);
  config.snapshot_path = (dir / "snapshot.json").string();

  const auto data = generate_hmm_dataset(spec);
  {
    auto g = open_output(dir / "generator.json");
    g << nlohmann::json(data.generator).dump(1) << '\n';
  }
  Rng init(mix_seed(config.seed, 0));
  const auto theta0 = vae::init_generative(config.dims, init, config.init_scale);
  const auto phi0 = vae::init_inference(config.dims, init, config.init_scale);

  auto trace = open_output(dir / "trace.jsonl");
  const auto start = std::chrono::steady_clock::now();
  vae::TrainResult result;
  try {
    result = vae::train(theta0, phi0, data.train, data.val, config, [&](const vae::EpochRecord& r) {
      trace << nlohmann::json(r).dump() << '\n';
      trace.flush();
      char buf[200];
      std::snprintf(buf, sizeof buf, "epoch %zu elbo %.4f nll_is %.4f entropy %.4f tau %.3g (%.2f s)\n", r.epoch,
                    r.elbo, r.nll_is, r.entropy, r.tau, r.seconds);
      log << buf << std::flush;
    });
  } catch (const vae::TrainingAborted& e) {
    log << e.what() << "; snapshot: " << (e.snapshot_path.empty() ? "(not written)" : e.snapshot_path) << '\n';
    return kExitFailure;
  }
  const double train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  vae::Checkpoint ckpt{config, result.theta, result.phi, result.rng_state, result.best_epoch};
  vae::write_checkpoint(ckpt, (dir / "checkpoint.json").string());

  double is_nll = 0.0;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    auto noise = GumbelNoiseStream::derived(mix_seed(config.seed, 800), i);
    is_nll += vae::importance_nll(result.theta, result.phi, data.test[i], is_samples, noise);
  }
  if (!data.test.empty()) is_nll /= static_cast<double>(data.test.size());
  const double true_nll = data.generator.mean_nll(data.test);
  const nlohmann::json summary{{"estimator", to_string(config.estimator)},
                               {"test_nll_is", is_nll},
                               {"test_nll_true", true_nll},
                               {"relative_gap", std::abs(is_nll - true_nll) / true_nll},
                               {"is_samples", is_samples},
                               {"best_epoch", result.best_epoch},
                               {"best_val_nll", result.best_val_nll},
                               {"train_seconds", train_seconds}};
  auto s = open_output(dir / "summary.json");
  s << summary.dump(1) << '\n';
  char buf[200];
  std::snprintf(buf, sizeof buf, "test nll_is %.4f, generator nll %.4f (gap %.2f%%), best epoch %zu\n", is_nll,
                true_nll, 100.0 * std::abs(is_nll - true_nll) / true_nll, result.best_epoch);
  log << buf;
  return kExitOk;
}

int cmd_sample(const Config& cfg, std::ostream& out, std::ostream& log) {
  if (!cfg.has("sample.table")) throw ConfigError("sample: no table given (use --table or sample.table)");
  const auto path = cfg.get<std::string>("sample.table", "");
  PotentialTable pot;
  try {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read '" + path + "'");
    pot = nlohmann::json::parse(in).get<PotentialTable>();
    pot.validate();
  } catch (const std::exception& e) {
    throw ConfigError("malformed table '" + path + "': " + e.what());
  }
  const auto count = cfg.get<std::size_t>("sample.count", 5);
  const double tau = cfg.get<double>("sample.tau", 1.0);
  require_positive(tau, "sample.tau");
  const auto samplers =
      cfg.get<std::vector<std::string>>("sample.samplers", {"ffbs", "gumbelized_ffbs", "pm_mrf"});
  for (const auto& s : samplers)
    if (s != "ffbs" && s != "gumbelized_ffbs" && s != "pm_mrf") throw ConfigError("unknown sampler '" + s + "'");
  const auto seed = cfg.get<std::uint64_t>("seed", 1);

  std::ofstream file;
  if (cfg.has("out")) file = open_output(output_dir(cfg) / "samples.jsonl");
  const auto fw = forward(pot);
  for (std::size_t i = 0; i < count; ++i)
    for (const auto& name : samplers) {
      auto noise = GumbelNoiseStream::derived(seed, i);
      nlohmann::json j{{"sample", i}, {"sampler", name}};
      auto put_soft = [&](const RelaxedPath& p) {
        j["hard"] = p.hard;
        j["tau"] = tau;
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t t = 0; t < p.soft.rows(); ++t)
          rows.push_back(std::vector<double>(p.soft.row(t).begin(), p.soft.row(t).end()));
        j["soft"] = rows;
      };
      if (name == "ffbs")
        j["hard"] = ffbs(pot, fw, noise);
      else if (name == "gumbelized_ffbs")
        put_soft(gumbelized_ffbs(pot, fw, noise, tau));
      else
        put_soft(relaxed_viterbi(perturb_emissions(pot, noise), tau));
      const auto line = j.dump();
      out << line << '\n';
      if (file.is_open()) file << line << '\n';
    }
  log << "drew " << count << " samples per sampler from a K=" << pot.num_states << ", T=" << pot.seq_len
      << " table\n";
  return kExitOk;
}

}  // namespace gcrf
