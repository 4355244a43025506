// plab: run capacity, RL, TD-dynamics and rank experiments from JSON configs.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "plab/error.hpp"
#include "plab/runner.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.front() == '-') throw plab::ConfigError("--seeds: '" + item + "' is not a seed");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw plab::ConfigError("--seeds: empty list");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plab: representation capacity experiments"};
  app.require_subcommand(1);

  std::string config_path, seeds, out;
  int jobs = 1;
  bool dry_run = false, force = false;

  for (const char* name : {"seqfit", "rl-train", "capacity-probe", "td-sim", "rank"}) {
    auto* sub = app.add_subcommand(name, std::string("run a ") + name + " experiment");
    sub->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seeds", seeds, "comma-separated seeds, overriding the config");
    sub->add_option("--jobs", jobs, "concurrent runs")->check(CLI::PositiveNumber);
    sub->add_flag("--dry-run", dry_run, "print the run plan without executing");
    sub->add_flag("--force", force, "recompute runs that already completed");
    sub->add_option("--out", out, "output directory (default: $PLAB_OUT, then the config, then plab_out)");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    auto cfg = plab::runner::load_config(config_path);
    if (plab::runner::to_string(cfg.kind) != command)
      throw plab::ConfigError("config field 'kind': '" + plab::runner::to_string(cfg.kind) +
                              "' does not match subcommand '" + command + "'");
    if (!seeds.empty()) cfg.seeds = parse_seeds(seeds);

    plab::runner::RunOptions opt;
    opt.out_dir = plab::runner::resolve_out_dir(out, cfg);
    opt.jobs = jobs;
    opt.dry_run = dry_run;
    opt.force = force;
    opt.log = &std::cout;
    const auto records = plab::runner::run_experiment(cfg, opt);

    int failed = 0;
    for (const auto& r : records) failed += r.status == plab::runner::RunStatus::Failed;
    if (failed > 0) {
      std::cerr << failed << " of " << records.size() << " runs failed\n";
      return 1;
    }
    return 0;
  } catch (const plab::Error& e) {
    std::cerr << "plab: " << e.what() << '\n';
    return 2;
  }
}
