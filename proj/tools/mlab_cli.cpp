#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mlab/experiments.hpp"
#include "mlab/verify.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  int workers = 0;
  std::optional<std::uint64_t> seed;
};

void add_flags(CLI::App* sub, Flags& f, bool with_config) {
  if (with_config) sub->add_option("--config", f.config, "JSON config overlaid on the scenario defaults");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--workers", f.workers, "concurrent cells")->check(CLI::PositiveNumber);
  sub->add_option("--seed", f.seed, "run a single seed instead of the configured list");
}

int run_experiment(mlab::Scenario scenario, const Flags& f) {
  mlab::ExperimentConfig cfg;
  try {
    cfg = f.config.empty() ? mlab::default_config(scenario) : mlab::load_config(f.config, scenario);
    if (!f.out.empty()) cfg.out_dir = f.out;
    if (f.workers > 0) cfg.workers = f.workers;
    if (f.seed) cfg.seeds = {*f.seed};
    mlab::validate(cfg);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  }

  const mlab::ScenarioResult res = mlab::run_scenario(cfg);
  const int failed = res.failed();
  std::printf("%s: %zu cells, %d failed, output in %s\n", mlab::to_string(scenario).c_str(), res.cells.size(),
              failed, cfg.out_dir.string().c_str());
  if (!res.summary.is_null()) std::printf("%s\n", res.summary.dump(2).c_str());
  for (const auto& g : res.cells)
    if (!g.ok) std::fprintf(stderr, "cell %d failed: %s\n", g.cell.index, g.error.c_str());
  return failed ? 2 : 0;
}

int run_suite(const Flags& f) {
  mlab::SuiteConfig cfg;
  if (f.workers > 0) cfg.workers = f.workers;
  if (f.seed) cfg.seed = *f.seed;
  const std::filesystem::path out = f.out.empty() ? "runs/verify_suite" : f.out;
  const auto reports = mlab::run_verify_suite(cfg);
  std::filesystem::create_directories(out);
  mlab::write_check_csv(reports, out / "checks.csv");
  int failed = 0;
  for (const auto& r : reports) {
    std::printf("%-4s %-28s %-12.4g %s %.4g  %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.measured,
                mlab::to_string(r.bound).c_str(), r.threshold, r.detail.c_str());
    failed += !r.pass;
  }
  std::printf("%zu checks, %d failed, written to %s\n", reports.size(), failed, (out / "checks.csv").string().c_str());
  return failed ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"momentum dynamics lab"};
  app.require_subcommand(1);

  std::vector<std::pair<CLI::App*, mlab::Scenario>> scenarios;
  std::vector<Flags> flags(mlab::all_scenarios().size() + 1);
  std::size_t k = 0;
  for (mlab::Scenario s : mlab::all_scenarios()) {
    std::string name = mlab::to_string(s);
    std::replace(name.begin(), name.end(), '_', '-');
    CLI::App* sub = app.add_subcommand(name, "run the " + mlab::to_string(s) + " scenario");
    sub->alias(mlab::to_string(s));
    add_flags(sub, flags[k++], true);
    scenarios.emplace_back(sub, s);
  }
  CLI::App* suite = app.add_subcommand("verify-suite", "run every verification check");
  add_flags(suite, flags[k], false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (suite->parsed()) return run_suite(flags[k]);
    for (std::size_t i = 0; i < scenarios.size(); ++i)
      if (scenarios[i].first->parsed()) return run_experiment(scenarios[i].second, flags[i]);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
