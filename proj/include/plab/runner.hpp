#pragma once

// Experiment orchestration: JSON configs with sweep axes, seeded runs keyed
// by a content hash, and CSV/SVG artifacts.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace plab::runner {

using Json = nlohmann::json;

enum class ExperimentKind { Seqfit, RlTrain, CapacityProbe, TdSim, Rank };
std::string to_string(ExperimentKind kind);
ExperimentKind parse_kind(const std::string& name);

// Parameter blocks are stored fully resolved. A JSON array in place of a
// scalar field (or an array of arrays for list-valued fields) is a sweep
// axis.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Seqfit;
  Json params = Json::object();
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir;  // empty: decided by the caller

  Json to_json() const;
  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return a.kind == b.kind && a.params == b.params && a.seeds == b.seeds && a.output_dir == b.output_dir;
  }
};

// Defaults for every block of an experiment kind.
Json default_params(ExperimentKind kind);

// Throws ConfigError naming the offending path on unknown keys, missing
// required fields and type mismatches.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig config_from_json(const Json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical text: sorted keys, no whitespace.
std::string serialize(const ExperimentConfig& cfg);

struct SweepAxis {
  std::string path;  // dotted, e.g. "infer.k"
  std::vector<Json> values;
};

std::vector<SweepAxis> sweep_axes(const ExperimentConfig& cfg);

struct PlannedRun {
  std::string run_id;
  std::uint64_t seed = 0;
  Json params;                    // concrete: no sweep lists left
  std::vector<Json> axis_values;  // parallel to sweep_axes()
};

// Cartesian product of the axes (first axis slowest) times the seeds.
std::vector<PlannedRun> plan_runs(const ExperimentConfig& cfg);

std::string sha256_hex(const std::string& data);
// First 16 hex characters of SHA-256 over the canonical (kind, params, seed).
std::string make_run_id(ExperimentKind kind, const Json& params, std::uint64_t seed);
// Hash of the whole config, used to name the sweep directory.
std::string config_id(const ExperimentConfig& cfg);

enum class RunStatus { Planned, Completed, Cached, Failed };
std::string to_string(RunStatus status);

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::Planned;
  double wall_seconds = 0.0;
  std::filesystem::path dir;
  std::vector<std::filesystem::path> outputs;
  std::string error;
};

struct RunOptions {
  std::filesystem::path out_dir;
  int jobs = 1;
  bool dry_run = false;
  bool force = false;
  std::ostream* log = nullptr;
};

// Output root precedence: explicit flag, then PLAB_OUT, then the config,
// then "plab_out".
std::filesystem::path resolve_out_dir(const std::string& flag, const ExperimentConfig& cfg);

// Layout under out_dir/<kind>/: runs/<run_id>/ holds one run's files and a
// `done` marker; sweep_<config id>/ holds the aggregate CSV, charts and
// runs.json. Completed runs are skipped unless `force` is set; a failing
// run is recorded and the rest continue.
std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const RunOptions& opt);

// Executes one concrete run into `dir` and returns the files it wrote.
std::vector<std::filesystem::path> execute_run(ExperimentKind kind, const Json& params, std::uint64_t seed,
                                               const std::filesystem::path& dir);

// Per-run CSV that the sweep aggregates, its x column and plotted metrics.
struct PrimaryTable {
  std::string file;
  std::vector<std::string> header;
  std::string x_column;
  std::vector<std::string> metrics;
};
PrimaryTable primary_table(ExperimentKind kind);

enum class OutputFormat { Csv, Svg };

// Aggregates the primary CSV of every completed run into
// sweep_dir/results.csv (run_id, seed, axis columns, then the run's columns)
// or one sweep_dir/<metric>.svg chart per metric with a line per run.
std::vector<std::filesystem::path> write_outputs(const ExperimentConfig& cfg, const std::vector<PlannedRun>& plan,
                                                 const std::vector<RunRecord>& records,
                                                 const std::filesystem::path& sweep_dir, OutputFormat format);

}  // namespace plab::runner
