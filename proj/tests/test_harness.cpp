#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gcrf/commands.hpp>
#include <gcrf/config.hpp>
#include <gcrf/dataset.hpp>
#include <gcrf/golden.hpp>

using namespace gcrf;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("gcrf_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<nlohmann::json> read_jsonl(const std::string& text) {
  std::vector<nlohmann::json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

// Registry file holding only the named instances.
fs::path subset_registry(const fs::path& dir, const std::vector<std::string>& names) {
  auto reg = load_golden(GCRF_DEFAULT_GOLDEN);
  std::vector<GoldenInstance> kept;
  for (const auto& n : names) kept.push_back(reg.find(n));
  reg.instances = kept;
  reg.benchmark.instances = {names.front()};
  const auto path = dir / "golden.json";
  write_golden(reg, path.string());
  return path;
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("values") {
    const auto cfg = Config::parse(R"(seed = 7   # top level
out = "run dir"
[estimate]
taus = [1.0, 0.5]
estimators = ["gumbel_crf", "pm_mrf"]
hard_only_objective = true
baseline_c = -0.25
[train]
epochs = 3
)");
    CHECK(cfg.get<std::uint64_t>("seed", 0) == 7);
    CHECK(cfg.get<std::string>("out", "") == "run dir");
    CHECK(cfg.get<std::vector<double>>("estimate.taus", {}) == std::vector<double>{1.0, 0.5});
    CHECK(cfg.get<std::vector<std::string>>("estimate.estimators", {}).size() == 2);
    CHECK(cfg.get<bool>("estimate.hard_only_objective", false));
    CHECK(cfg.get<double>("estimate.baseline_c", 0.0) == -0.25);
    CHECK(cfg.get<std::size_t>("train.epochs", 0) == 3);
    CHECK(cfg.get<std::size_t>("train.batch_size", 11) == 11);
    CHECK(cfg.get<std::vector<std::size_t>>("train.epochs", {}) == std::vector<std::size_t>{3});
    CHECK(cfg.get<double>("train.epochs", 0.0) == 3.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(Config::parse("seed 3"), ConfigError);
    CHECK_THROWS_AS(Config::parse("seed = 3\nseed = 4"), ConfigError);
    CHECK_THROWS_AS(Config::parse("[open"), ConfigError);
    CHECK_THROWS_AS(Config::parse("x = \"unterminated"), ConfigError);
    CHECK_THROWS_AS(Config::parse("x = [1, 2"), ConfigError);
    const auto cfg = Config::parse("seed = -1\nname = \"a\"");
    CHECK_THROWS_AS(cfg.get<std::uint64_t>("seed", 0), ConfigError);
    CHECK_THROWS_AS(cfg.get<double>("name", 0.0), ConfigError);
    CHECK_THROWS_AS(cfg.require_known({"seed"}), ConfigError);
    CHECK_NOTHROW(cfg.require_known({"seed", "name"}));
    CHECK_THROWS_AS(Config::load("/nonexistent/gcrf.toml"), ConfigError);
  }
  SUBCASE("flags override the file") {
    const auto dir = scratch_dir("config");
    const auto path = dir / "c.toml";
    std::ofstream(path) << "seed = 3\n[estimate]\nseeds = [4, 5]\ntaus = [2.0]\nbudgets = [8]\n";
    CommandFlags flags;
    flags.config = path.string();
    auto cfg = resolve_config("estimate", flags);
    CHECK(cfg.get<std::vector<std::uint64_t>>("estimate.seeds", {}).size() == 2);
    flags.seed = 9;
    flags.tau = 0.25;
    flags.budget = 2;
    cfg = resolve_config("estimate", flags);
    CHECK(cfg.get<std::vector<std::uint64_t>>("estimate.seeds", {}) == std::vector<std::uint64_t>{9});
    CHECK(cfg.get<std::vector<double>>("estimate.taus", {}) == std::vector<double>{0.25});
    CHECK(cfg.get<std::vector<std::size_t>>("estimate.budgets", {}) == std::vector<std::size_t>{2});
    CHECK_THROWS_AS(resolve_config("check", flags), ConfigError);

    std::ofstream(path) << "[estimate]\nbogus = 1\n";
    CHECK_THROWS_AS(resolve_config("estimate", CommandFlags{.config = path.string()}), ConfigError);
  }
}

TEST_CASE("hmm dataset") {
  SUBCASE("generator is valid") {
    const auto g = make_hmm_generator(4, 12, 0.9, 3);
    CHECK_NOTHROW(g.validate());
    for (std::size_t k = 0; k < 4; ++k) {
      double own = 0.0;
      for (std::size_t v = k; v < 12; v += 4) own += g.emission(k, v);
      CHECK(own == doctest::Approx(0.9).epsilon(1e-12));
    }
    const auto pi = stationary_distribution(g.transition);
    for (std::size_t j = 0; j < 4; ++j) {
      double flow = 0.0;
      for (std::size_t i = 0; i < 4; ++i) flow += pi[i] * g.transition(i, j);
      CHECK(flow == doctest::Approx(pi[j]).epsilon(1e-12));
    }
  }
  SUBCASE("likelihood matches enumeration") {
    const auto g = make_hmm_generator(3, 6, 0.8, 5);
    const vae::Sentence x = {0, 4, 2, 5};
    double p = 0.0;
    for (std::size_t i = 0; i < path_count(3, 4); ++i) {
      const auto z = decode_path(i, 3, 4);
      double q = g.initial[z[0]] * g.emission(z[0], x[0]);
      for (std::size_t t = 1; t < 4; ++t) q *= g.transition(z[t - 1], z[t]) * g.emission(z[t], x[t]);
      p += q;
    }
    CHECK(g.log_likelihood(x) == doctest::Approx(std::log(p)).epsilon(1e-12));
  }
  SUBCASE("single state") {
    HmmDatasetSpec spec;
    spec.num_states = 1;
    spec.vocab = 4;
    spec.train_size = 20;
    spec.val_size = spec.test_size = 5;
    const auto d = generate_hmm_dataset(spec);
    CHECK(d.generator.transition(0, 0) == 1.0);
    for (const auto& z : d.train_states)
      for (auto s : z) CHECK(s == 0);
    for (const auto& x : d.train) CHECK(x.size() == spec.seq_len);
  }
  SUBCASE("fixed seed is byte-identical") {
    HmmDatasetSpec spec;
    spec.train_size = 50;
    spec.val_size = spec.test_size = 10;
    const auto a = nlohmann::json(generate_hmm_dataset(spec)).dump();
    const auto b = nlohmann::json(generate_hmm_dataset(spec)).dump();
    CHECK(a == b);
    spec.seed = 2;
    CHECK(a != nlohmann::json(generate_hmm_dataset(spec)).dump());
  }
  SUBCASE("state frequencies match the stationary distribution") {
    HmmDatasetSpec spec;
    spec.train_size = 4000;
    spec.val_size = spec.test_size = 1;
    const auto d = generate_hmm_dataset(spec);
    const auto& pi = d.generator.initial;
    const double n = static_cast<double>(d.train_states.size());
    for (std::size_t k = 0; k < spec.num_states; ++k) {
      double sum = 0.0, sq = 0.0;
      for (const auto& z : d.train_states) {
        const double f = static_cast<double>(std::count(z.begin(), z.end(), k)) / z.size();
        sum += f;
        sq += f * f;
      }
      const double mean = sum / n;
      const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
      CAPTURE(k);
      CHECK(std::abs(mean - pi[k]) < 3.0 * se);
    }
  }
}

TEST_CASE("golden registry") {
  const auto reg = load_golden(GCRF_DEFAULT_GOLDEN);
  CHECK(reg.with_role("dp").size() == 20);
  CHECK(reg.with_role("adversarial").size() == 1);
  SUBCASE("stored artifacts regenerate") {
    CHECK(verify_golden(reg).empty());
    const auto fresh = default_golden_registry();
    REQUIRE(fresh.instances.size() == reg.instances.size());
    for (std::size_t i = 0; i < reg.instances.size(); ++i)
      CHECK(fresh.instances[i].artifacts.posterior_digest == reg.instances[i].artifacts.posterior_digest);
  }
  SUBCASE("a perturbed artifact is reported by name") {
    auto bad = reg;
    auto& g = const_cast<GoldenInstance&>(bad.find("g03"));
    g.artifacts.log_Z += 1e-6;
    const auto mismatches = verify_golden(bad);
    REQUIRE(mismatches.size() == 1);
    CHECK(mismatches[0].find("g03") != std::string::npos);
    CHECK(mismatches[0].find("log_Z") != std::string::npos);
  }
  SUBCASE("json round trip") {
    const auto dir = scratch_dir("golden");
    write_golden(reg, (dir / "g.json").string());
    CHECK(nlohmann::json(load_golden((dir / "g.json").string())) == nlohmann::json(reg));
  }
}

TEST_CASE("check command") {
  const auto dir = scratch_dir("check");
  const auto golden = subset_registry(dir, {"g00", "g01", "g02", "adversarial"});
  auto cfg = Config::parse("[check]\nsampler_draws = 20000\nprimitive_trials = 5\n");
  cfg.set("golden", golden.string());
  std::ostringstream out, log;
  const int code = cmd_check(cfg, out, log);
  INFO(log.str());
  CHECK(code == kExitOk);
  const auto records = read_jsonl(out.str());
  CHECK(!records.empty());
  for (const auto& r : records) CHECK(r.at("passed").get<bool>());

  SUBCASE("a raised bound fails by name") {
    auto reg = load_golden(golden.string());
    for (auto& g : reg.instances)
      if (g.role == "adversarial") g.bounds["pm_tv_floor"] = 0.5;
    write_golden(reg, golden.string());
    std::ostringstream out2, log2;
    CHECK(cmd_check(cfg, out2, log2) == kExitFailure);
    CHECK(log2.str().find("pm_mrf_bias.pm_tv_floor/adversarial") != std::string::npos);
  }
  SUBCASE("a corrupted artifact fails integrity") {
    auto reg = load_golden(golden.string());
    reg.instances[0].artifacts.entropy += 1.0;
    write_golden(reg, golden.string());
    std::ostringstream out2, log2;
    CHECK(cmd_check(cfg, out2, log2) == kExitFailure);
    CHECK(log2.str().find("golden_integrity/g00") != std::string::npos);
  }
}

TEST_CASE("estimate command") {
  const auto dir = scratch_dir("estimate");
  auto cfg = Config::parse("[estimate]\ninstances = [\"g09\"]\nbudgets = [2, 4, 8]\ntaus = [1.0]\nestimates = 100\n");
  cfg.set("out", dir.string());
  CommandFlags flags;
  SUBCASE("one report per budget") {
    cfg.set("estimate.estimators", nlohmann::json::array({"gumbel_crf"}));
    cfg.set("estimate.seeds", nlohmann::json::array({1}));
    std::ostringstream log;
    REQUIRE(cmd_estimate(cfg, log) == kExitOk);
    const auto rows = read_jsonl(slurp(dir / "grad_reports.jsonl"));
    REQUIRE(rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(rows[i].at("instance") == "g09");
      CHECK(rows[i].at("budget") == std::vector<std::size_t>{2, 4, 8}[i]);
    }
    const auto csv = slurp(dir / "variance.csv");
    CHECK(csv.rfind("estimator,seed,budget,tau,r,bias_norm,seconds\n", 0) == 0);
    CHECK(count_lines(csv) == 4);
    // Averaging more samples per estimate lowers the spread.
    CHECK(rows[2].at("report").at("variance_ratio").get<double>() <
          rows[0].at("report").at("variance_ratio").get<double>());
  }
  SUBCASE("score-function rows leave tau empty") {
    cfg.set("estimate.estimators", nlohmann::json::array({"reinforce_ms"}));
    cfg.set("estimate.seeds", nlohmann::json::array({2}));
    std::ostringstream log;
    REQUIRE(cmd_estimate(cfg, log) == kExitOk);
    std::istringstream csv(slurp(dir / "variance.csv"));
    std::string line;
    std::getline(csv, line);
    std::getline(csv, line);
    CHECK(line.rfind("reinforce_ms,2,2,,", 0) == 0);
  }
  SUBCASE("a hard-only objective rejects relaxed estimators") {
    cfg.set("estimate.estimators", nlohmann::json::array({"reinforce_ms", "gumbel_crf"}));
    cfg.set("estimate.hard_only_objective", true);
    cfg.set("estimate.seeds", nlohmann::json::array({1}));
    std::ostringstream log;
    REQUIRE(cmd_estimate(cfg, log) == kExitOk);
    const auto rows = read_jsonl(slurp(dir / "grad_reports.jsonl"));
    std::size_t errors = 0;
    for (const auto& r : rows)
      if (r.contains("error")) {
        ++errors;
        CHECK(r.at("estimator") == "gumbel_crf");
      }
    CHECK(errors == 3);
    CHECK(count_lines(slurp(dir / "variance.csv")) == 4);
    CHECK(log.str().find("incompatible") != std::string::npos);
  }
  SUBCASE("configuration errors") {
    cfg.set("estimate.instances", nlohmann::json::array({"nope"}));
    std::ostringstream log;
    CHECK_THROWS_AS(cmd_estimate(cfg, log), ConfigError);
  }
}

TEST_CASE("train command") {
  const auto dir = scratch_dir("train");
  auto cfg = Config::parse(
      "[data]\ntrain_size = 40\nval_size = 10\ntest_size = 10\n[train]\nepochs = 3\nis_samples = 10\n");
  cfg.set("out", dir.string());
  SUBCASE("zero learning rate keeps metrics fixed") {
    cfg.set("train.learning_rate", 0.0);
    cfg.set("train.tau_decay", 1.0);
    std::ostringstream log;
    REQUIRE(cmd_train(cfg, log) == kExitOk);
    const auto trace = read_jsonl(slurp(dir / "trace.jsonl"));
    REQUIRE(trace.size() == 3);
    for (const auto& r : trace) {
      CHECK(r.at("nll_is") == trace[0].at("nll_is"));
      CHECK(r.at("entropy") == trace[0].at("entropy"));
    }
    for (const char* f : {"generator.json", "checkpoint.json", "summary.json"}) CHECK(fs::exists(dir / f));
  }
  SUBCASE("same seed gives an identical trace") {
    std::ostringstream log;
    REQUIRE(cmd_train(cfg, log) == kExitOk);
    const auto first = slurp(dir / "trace.jsonl");
    REQUIRE(cmd_train(cfg, log) == kExitOk);
    CHECK(slurp(dir / "trace.jsonl") == first);
    cfg.set("train.seed", 2);
    REQUIRE(cmd_train(cfg, log) == kExitOk);
    CHECK(slurp(dir / "trace.jsonl") != first);
  }
  SUBCASE("divergence exits with failure and a snapshot") {
    cfg.set("train.learning_rate", 1e300);
    cfg.set("train.clip_norm", 0.0);
    std::ostringstream log;
    CHECK(cmd_train(cfg, log) == kExitFailure);
    CHECK(fs::exists(dir / "snapshot.json"));
  }
  SUBCASE("mismatched sizes") {
    cfg.set("data.num_states", 0);
    std::ostringstream log;
    CHECK_THROWS_AS(cmd_train(cfg, log), ConfigError);
  }
}

TEST_CASE("sample command") {
  const auto dir = scratch_dir("sample");
  auto run = [&](const PotentialTable& pot, double tau, std::size_t count, std::uint64_t seed) {
    write_potential_table((dir / "t.json").string(), pot);
    Config cfg;
    cfg.set("sample.table", (dir / "t.json").string());
    cfg.set("sample.tau", tau);
    cfg.set("sample.count", count);
    cfg.set("seed", seed);
    std::ostringstream out, log;
    REQUIRE(cmd_sample(cfg, out, log) == kExitOk);
    return out.str();
  };
  SUBCASE("single state") {
    const auto rows = read_jsonl(run(PotentialTable(1, 4), 0.5, 3, 1));
    CHECK(rows.size() == 9);
    for (const auto& r : rows) {
      CHECK(r.at("hard") == std::vector<std::size_t>(4, 0));
      if (r.contains("soft"))
        for (const auto& row : r.at("soft")) CHECK(row[0].get<double>() == 1.0);
    }
  }
  PotentialTable pot(3, 4);
  Rng rng(11);
  for (double& v : pot.log_transition.data()) v = rng.normal();
  for (double& v : pot.log_emission.data()) v = rng.normal();
  SUBCASE("deterministic for a seed") {
    CHECK(run(pot, 0.5, 5, 4) == run(pot, 0.5, 5, 4));
    CHECK(run(pot, 0.5, 5, 4) != run(pot, 0.5, 5, 5));
  }
  SUBCASE("small temperature is nearly one-hot at the hard sample") {
    const auto rows = read_jsonl(run(pot, 1e-3, 50, 2));
    for (const auto& r : rows) {
      if (!r.contains("soft")) continue;
      const auto hard = r.at("hard").get<std::vector<std::size_t>>();
      for (std::size_t t = 0; t < hard.size(); ++t) CHECK(r.at("soft")[t][hard[t]].get<double>() > 0.999);
    }
  }
  SUBCASE("missing table") {
    Config cfg;
    std::ostringstream out, log;
    CHECK_THROWS_AS(cmd_sample(cfg, out, log), ConfigError);
  }
}
