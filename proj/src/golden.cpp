#include "gcrf/golden.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace gcrf {

PotentialTable normal_table(std::size_t K, std::size_t T, std::uint64_t seed, double scale) {
  Rng rng(seed);
  PotentialTable pot(K, T);
  for (double& v : pot.log_transition.data()) v = scale * rng.normal();
  for (double& v : pot.log_emission.data()) v = scale * rng.normal();
  for (double& v : pot.log_initial) v = scale * rng.normal();
  return pot;
}

DownstreamObjective seeded_quadratic(std::size_t K, std::size_t T, std::uint64_t seed) {
  Matrix targets(T, K, 0.0);
  Rng rng(seed);
  for (std::size_t t = 0; t < T; ++t) targets(t, rng.uniform_index(K)) = 1.0;
  Rng crng(seed + 1);
  Matrix coupling(K, K);
  for (double& v : coupling.data()) v = crng.normal();
  return quadratic_objective(targets, coupling);
}

std::string posterior_digest(const ExactPosterior& post) {
  std::uint64_t h = 1469598103934665603ULL;
  char buf[64];
  for (double p : post.probs) {
    const int n = std::snprintf(buf, sizeof buf, "%.17g\n", p);
    for (int i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GoldenArtifacts compute_artifacts(const PotentialTable& table) {
  const auto post = enumerate_posterior(table);
  GoldenArtifacts a;
  a.log_Z = forward(table).log_Z;
  a.entropy = entropy(table);
  a.viterbi = viterbi(table);
  a.num_paths = post.paths.size();
  a.posterior_digest = posterior_digest(post);
  return a;
}

PotentialTable table_from_spec(const nlohmann::json& spec) {
  const auto gen = spec.at("generator").get<std::string>();
  if (gen == "normal")
    return normal_table(spec.at("K").get<std::size_t>(), spec.at("T").get<std::size_t>(),
                        spec.at("seed").get<std::uint64_t>(), spec.at("scale").get<double>());
  if (gen == "table") {
    auto t = spec.at("table").get<PotentialTable>();
    t.validate();
    return t;
  }
  throw std::invalid_argument("golden: unknown generator '" + gen + "'");
}

PotentialTable GoldenInstance::table() const { return table_from_spec(spec); }

DownstreamObjective GoldenInstance::objective() const {
  const auto t = table();
  return seeded_quadratic(t.num_states, t.seq_len, objective_seed);
}

double GoldenInstance::bound(const std::string& key) const {
  if (!bounds.contains(key)) throw std::invalid_argument("golden instance '" + name + "' has no bound '" + key + "'");
  return bounds.at(key).get<double>();
}

const GoldenInstance& GoldenRegistry::find(const std::string& name) const {
  for (const auto& g : instances)
    if (g.name == name) return g;
  throw std::invalid_argument("unknown golden instance '" + name + "'");
}

std::vector<const GoldenInstance*> GoldenRegistry::with_role(const std::string& role) const {
  std::vector<const GoldenInstance*> out;
  for (const auto& g : instances)
    if (g.role == role) out.push_back(&g);
  return out;
}

GoldenRegistry default_golden_registry() {
  GoldenRegistry r;
  r.pilot_date = "2026-10-18";
  r.pilot_seed = 5;

  // (K, T, scale) for the exactness instances.
  const std::vector<std::tuple<std::size_t, std::size_t, double>> shapes = {
      {2, 1, 1.0}, {2, 2, 0.5}, {2, 3, 1.5}, {2, 4, 2.0}, {2, 5, 1.0}, {2, 6, 0.5}, {3, 1, 2.0},
      {3, 2, 1.0}, {3, 3, 1.0}, {3, 4, 1.5}, {3, 5, 0.5}, {3, 6, 1.0}, {4, 1, 1.5}, {4, 2, 2.0},
      {4, 3, 1.0}, {4, 4, 1.0}, {4, 5, 0.5}, {4, 6, 1.5}, {4, 6, 3.0}, {3, 6, 2.5}};
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto [K, T, scale] = shapes[i];
    GoldenInstance g;
    char name[16];
    std::snprintf(name, sizeof name, "g%02zu", i);
    g.name = name;
    g.role = "dp";
    g.spec = {{"generator", "normal"}, {"K", K}, {"T", T}, {"seed", 1000 + i}, {"scale", scale}};
    g.objective_seed = 5000 + 10 * i;
    g.bounds = {{"log_Z_tol", 1e-10}, {"marginal_tol", 1e-10}, {"entropy_tol", 1e-8}};
    g.artifacts = compute_artifacts(g.table());
    r.instances.push_back(std::move(g));
  }

  GoldenInstance adv;
  adv.name = "adversarial";
  adv.role = "adversarial";
  // Strong transitions, weak emissions: perturb-and-MAP is far from the posterior.
  auto table = normal_table(3, 4, 4242, 0.2);
  table.log_transition = Matrix{{2.5, -2.0, 0.5}, {-1.5, 2.0, 1.0}, {1.0, -2.5, 2.0}};
  adv.spec = {{"generator", "table"}, {"table", table}};
  adv.objective_seed = 6000;
  adv.bounds = {{"log_Z_tol", 1e-10}, {"marginal_tol", 1e-10}, {"entropy_tol", 1e-8},
                {"pm_tv_floor", 0.12},  {"ffbs_tv_ceiling", 0.02}, {"pilot_pm_tv", 0.167},
                {"pilot_draws", 100000}};
  adv.artifacts = compute_artifacts(adv.table());
  r.instances.push_back(std::move(adv));

  r.benchmark.instances = {"g09", "g15", "g11", "g16"};
  r.benchmark.taus = {1.0, 0.5};
  r.benchmark.budgets = {2, 4, 8, 16};
  r.benchmark.seeds = {1, 2, 3};
  r.benchmark.estimates = 200;
  r.benchmark.baseline_c = 0.1;
  r.benchmark.order_fraction = 0.8;
  return r;
}

void to_json(nlohmann::json& j, const GoldenInstance& g) {
  j = nlohmann::json{{"name", g.name},
                     {"role", g.role},
                     {"spec", g.spec},
                     {"objective", {{"kind", "quadratic"}, {"seed", g.objective_seed}}},
                     {"artifacts",
                      {{"log_Z", g.artifacts.log_Z},
                       {"entropy", g.artifacts.entropy},
                       {"viterbi", g.artifacts.viterbi},
                       {"num_paths", g.artifacts.num_paths},
                       {"posterior_digest", g.artifacts.posterior_digest}}},
                     {"bounds", g.bounds}};
}

void from_json(const nlohmann::json& j, GoldenInstance& g) {
  g.name = j.at("name").get<std::string>();
  g.role = j.at("role").get<std::string>();
  g.spec = j.at("spec");
  const auto& obj = j.at("objective");
  if (obj.at("kind").get<std::string>() != "quadratic")
    throw std::invalid_argument("golden instance '" + g.name + "': unknown objective kind");
  g.objective_seed = obj.at("seed").get<std::uint64_t>();
  const auto& a = j.at("artifacts");
  g.artifacts.log_Z = a.at("log_Z").get<double>();
  g.artifacts.entropy = a.at("entropy").get<double>();
  g.artifacts.viterbi = a.at("viterbi").get<HardPath>();
  g.artifacts.num_paths = a.at("num_paths").get<std::size_t>();
  g.artifacts.posterior_digest = a.at("posterior_digest").get<std::string>();
  g.bounds = j.value("bounds", nlohmann::json::object());
}

void to_json(nlohmann::json& j, const GoldenRegistry& r) {
  const auto& b = r.benchmark;
  j = nlohmann::json{{"version", r.version},
                     {"pilot", {{"seed", r.pilot_seed}, {"date", r.pilot_date}}},
                     {"instances", r.instances},
                     {"benchmark",
                      {{"instances", b.instances},
                       {"taus", b.taus},
                       {"budgets", b.budgets},
                       {"seeds", b.seeds},
                       {"estimates", b.estimates},
                       {"baseline_c", b.baseline_c},
                       {"order_fraction", b.order_fraction},
                       {"pilot", b.pilot}}}};
}

void from_json(const nlohmann::json& j, GoldenRegistry& r) {
  r.version = j.at("version").get<int>();
  if (r.version != 1) throw std::invalid_argument("golden registry: unsupported version");
  r.pilot_seed = j.at("pilot").at("seed").get<std::uint64_t>();
  r.pilot_date = j.at("pilot").at("date").get<std::string>();
  r.instances = j.at("instances").get<std::vector<GoldenInstance>>();
  const auto& b = j.at("benchmark");
  r.benchmark.instances = b.at("instances").get<std::vector<std::string>>();
  r.benchmark.taus = b.at("taus").get<std::vector<double>>();
  r.benchmark.budgets = b.at("budgets").get<std::vector<std::size_t>>();
  r.benchmark.seeds = b.at("seeds").get<std::vector<std::uint64_t>>();
  r.benchmark.estimates = b.at("estimates").get<std::size_t>();
  r.benchmark.baseline_c = b.at("baseline_c").get<double>();
  r.benchmark.order_fraction = b.at("order_fraction").get<double>();
  r.benchmark.pilot = b.value("pilot", nlohmann::json::object());
  for (const auto& name : r.benchmark.instances) r.find(name);
}

GoldenRegistry load_golden(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read golden registry '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<GoldenRegistry>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed golden registry '" + path + "': " + e.what());
  }
}

void write_golden(const GoldenRegistry& registry, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write golden registry '" + path + "'");
  out << nlohmann::json(registry).dump(1) << '\n';
}

std::vector<std::string> verify_golden(const GoldenRegistry& registry) {
  std::vector<std::string> bad;
  for (const auto& g : registry.instances) {
    const auto a = compute_artifacts(g.table());
    const auto& s = g.artifacts;
    if (a.log_Z != s.log_Z) bad.push_back(g.name + ": log_Z");
    if (a.entropy != s.entropy) bad.push_back(g.name + ": entropy");
    if (a.viterbi != s.viterbi) bad.push_back(g.name + ": viterbi");
    if (a.num_paths != s.num_paths) bad.push_back(g.name + ": num_paths");
    if (a.posterior_digest != s.posterior_digest) bad.push_back(g.name + ": posterior_digest");
  }
  return bad;
}

}  // namespace gcrf
