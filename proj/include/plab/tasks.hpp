#pragma once

// Non-stationary sequential regression tasks: datasets, target families and
// the iterate-and-retrain protocol.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "plab/capacity.hpp"
#include "plab/infer.hpp"
#include "plab/nn.hpp"

namespace plab {

enum class DataSource { IdxFile, Synthetic };

struct Dataset {
  Matrix inputs;  // n x dim, entries in [0, 1]
  std::optional<std::vector<int>> labels;
  DataSource source = DataSource::Synthetic;

  Eigen::Index size() const { return inputs.rows(); }
  Eigen::Index dim() const { return inputs.cols(); }
};

// IDX images (magic 2051) and optional labels (magic 2049).
Dataset load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels = {});

// Gaussian clusters (sigma 0.05) around centers uniform in [0.2, 0.8]^dim,
// clipped to [0, 1]; label = cluster index mod 10.
Dataset synth_inputs(std::uint64_t seed, int n, int dim, int num_clusters);

// Centers used by synth_inputs for the same arguments.
Matrix synth_centers(std::uint64_t seed, int dim, int num_clusters);

// n rows drawn without replacement.
Dataset subsample(const Dataset& data, int n, std::uint64_t seed);

enum class TargetKind { RandomNet, Hash, Threshold };

std::string to_string(TargetKind kind);
TargetKind parse_target_kind(const std::string& name);

inline constexpr int kTargetHiddenWidth = 30;
inline constexpr double kRandomNetScale = 10.0;
inline constexpr double kHashScale = 1000.0;

struct TargetFn {
  TargetKind kind = TargetKind::RandomNet;
  std::shared_ptr<const Params> generator;  // [dim, 30, 30, 1]; RandomNet and Hash
  double scale = kRandomNetScale;
  int threshold_index = 0;
  std::uint64_t seed = 0;
};

// RandomNet: 10 * net(x). Hash: sin(1000 * net(x)). Threshold: 1[label < i].
// `seed_or_index` is the generator seed, or the threshold index i.
TargetFn make_target(TargetKind kind, std::uint64_t seed_or_index, int input_dim);

Matrix eval_target(const TargetFn& target, const Dataset& data);
// Throws for Threshold targets, which need labels.
Matrix eval_target(const TargetFn& target, const Matrix& inputs);

// Default per-iteration budgets: 3000 for RandomNet and Threshold, 5000 for Hash.
int default_steps_per_iter(TargetKind kind);

struct SequenceConfig {
  MlpSpec learner;
  std::uint64_t learner_seed = 0;
  TargetKind task = TargetKind::RandomNet;
  std::uint64_t task_seed = 0;  // iteration i draws generator seed derive_seed(task_seed, i)
  int num_iterations = 30;
  int steps_per_iter = 3000;
  int batch_size = 64;
  OptimizerConfig optimizer;
  std::optional<InferConfig> infer;
  std::uint64_t batch_seed = 0;
  double rank_epsilon = kDefaultRankEpsilon;
  double srank_delta = kDefaultSrankDelta;
  // Reuse one target for every iteration (sanity protocol).
  bool fixed_target = false;
};

struct IterationRecord {
  int iteration = 0;
  double final_mse = 0.0;
  int effective_dim = 0;
  int srank = 0;
  int steps = 0;
};

struct SequenceResult {
  std::vector<IterationRecord> records;
  Params final_params;
};

// Target of iteration i under `cfg`.
TargetFn sequence_target(const SequenceConfig& cfg, int iteration, int input_dim);

// Mini-batch training of a learner (optionally with InFeR heads) on fixed
// targets for `steps` steps with a fresh optimizer. Returns the final
// main-objective MSE over all inputs.
double train_on_targets(Params& learner, AuxHeads* aux, const InferConfig* infer, const Matrix& inputs,
                        const Matrix& targets, int steps, int batch_size, const OptimizerConfig& optimizer,
                        std::uint64_t batch_seed);

SequenceResult run_sequence(const SequenceConfig& cfg, const Dataset& data);

std::vector<std::string> sequence_csv_header();
std::vector<double> sequence_csv_row(const IterationRecord& r);

}  // namespace plab
