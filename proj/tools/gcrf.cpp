#include <iostream>

#include <CLI11.hpp>

#include <gcrf/commands.hpp>

int main(int argc, char** argv) {
  CLI::App app{"Gradient estimators for linear-chain CRFs: oracle checks, benchmarks, VAE training"};
  app.require_subcommand(1);
  app.fallthrough();

  gcrf::CommandFlags flags;
  std::string config, out, estimator, table;
  std::uint64_t seed = 0;
  double tau = 0.0;
  std::size_t budget = 0;
  auto* o_config = app.add_option("--config", config, "TOML-style configuration file");
  auto* o_seed = app.add_option("--seed", seed, "Master seed");
  auto* o_out = app.add_option("--out", out, "Output directory");
  auto* o_est = app.add_option("--estimator", estimator,
                               "reinforce_ms, reinforce_ms_c, gumbel_crf, gumbel_crf_st, pm_mrf, pm_mrf_st");
  auto* o_tau = app.add_option("--tau", tau, "Relaxation temperature");
  auto* o_budget = app.add_option("--budget", budget, "Samples per estimate (check: samples per estimator)");

  auto* check = app.add_subcommand("check", "Run the oracle suite over the golden registry");
  auto* estimate = app.add_subcommand("estimate", "Benchmark gradient estimators on golden instances");
  auto* train = app.add_subcommand("train", "Train the template VAE on a synthetic HMM dataset");
  auto* sample = app.add_subcommand("sample", "Draw coupled samples from a PotentialTable JSON file");
  auto* o_table = sample->add_option("--table", table, "PotentialTable JSON file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return gcrf::kExitConfigError;
  }

  if (*o_config) flags.config = config;
  if (*o_seed) flags.seed = seed;
  if (*o_out) flags.out = out;
  if (*o_est) flags.estimator = estimator;
  if (*o_tau) flags.tau = tau;
  if (*o_budget) flags.budget = budget;
  if (*o_table) flags.table = table;

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto cfg = gcrf::resolve_config(command, flags);
    if (*check) return gcrf::cmd_check(cfg, std::cout, std::cerr);
    if (*estimate) return gcrf::cmd_estimate(cfg, std::cerr);
    if (*train) return gcrf::cmd_train(cfg, std::cerr);
    if (*sample) return gcrf::cmd_sample(cfg, std::cout, std::cerr);
  } catch (const gcrf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return gcrf::kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return gcrf::kExitFailure;
  }
  return gcrf::kExitFailure;
}
