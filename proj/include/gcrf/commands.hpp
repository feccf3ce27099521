#pragma once

// `gcrf` subcommands. Each returns a process exit code: 0 on success, 1 when a
// check fails or a run aborts; configuration problems throw ConfigError, which
// the CLI maps to exit code 2.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "gcrf/checks.hpp"
#include "gcrf/config.hpp"

namespace gcrf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfigError = 2;

struct CommandFlags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> estimator;
  std::optional<double> tau;
  std::optional<std::size_t> budget;
  std::optional<std::string> table;  // sample: PotentialTable JSON path
};

// Config file (if any) with flags applied on top for `command`.
Config resolve_config(const std::string& command, const CommandFlags& flags);

// Config sections to typed settings; defaults fill every missing key.
SuiteOptions suite_options(const Config& cfg);
BenchmarkPlan estimate_plan(const Config& cfg, const GoldenRegistry& registry);
HmmDatasetSpec dataset_spec(const Config& cfg);
vae::TrainConfig train_config(const Config& cfg);
GoldenRegistry registry_for(const Config& cfg);

// JSONL check records to `out`, one summary line per check to `log`.
int cmd_check(const Config& cfg, std::ostream& out, std::ostream& log);
// GradReport JSONL and variance CSV under the output directory.
int cmd_estimate(const Config& cfg, std::ostream& log);
// Trace JSONL, checkpoint, generator and summary JSON under the output directory.
int cmd_train(const Config& cfg, std::ostream& log);
// One JSON line per sample to `out`.
int cmd_sample(const Config& cfg, std::ostream& out, std::ostream& log);

// CSV header and row for the variance file.
std::string variance_csv_header();
std::string variance_csv_row(const BenchmarkRow& row);

}  // namespace gcrf
