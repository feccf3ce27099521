// Writes the golden registry: specs, regenerated oracle artifacts and, with
// --pilot, the calibration measurements of the variance benchmark.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include <gcrf/checks.hpp>
#include <gcrf/golden.hpp>

int main(int argc, char** argv) {
  CLI::App app{"Regenerate the golden instance registry"};
  std::string out = "golden.json";
  bool pilot = false;
  std::size_t workers = 1;
  app.add_option("--out", out, "Output path");
  app.add_flag("--pilot", pilot, "Run the variance benchmark and store its measurements");
  app.add_option("--workers", workers, "Worker threads for the pilot run");
  CLI11_PARSE(app, argc, argv);

  auto registry = gcrf::default_golden_registry();
  if (pilot) {
    auto plan = gcrf::benchmark_plan(registry);
    plan.workers = workers;
    const auto rows = gcrf::run_benchmark(registry, plan);
    const auto ordering = gcrf::check_variance_ordering(rows, registry.benchmark.order_fraction);
    const auto& d = ordering.records.front().detail;
    registry.benchmark.pilot = {{"date", registry.pilot_date},
                                {"share", d.at("share")},
                                {"points", d.at("points")}};
    std::cerr << ordering.summary << '\n';
  }
  gcrf::write_golden(registry, out);
  std::cerr << "wrote " << registry.instances.size() << " instances to " << out << '\n';
  return 0;
}
