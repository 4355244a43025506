#pragma once

// Value-based RL at desk scale: gridworlds, replay, DQN / Double DQN and the
// representation-preserving variants (InFeR, random cumulants, concatenated
// random features, wider feature layer).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plab/capacity.hpp"
#include "plab/infer.hpp"
#include "plab/nn.hpp"
#include "plab/rng.hpp"

namespace plab {

enum class RewardMode { Sparse, Dense, Zeroed };
std::string to_string(RewardMode mode);
RewardMode parse_reward_mode(const std::string& name);

inline constexpr int kNumActions = 4;  // up, down, left, right

// Cells are indexed row-major: cell = row * size + col.
struct GridWorld {
  int size = 8;
  int start = 0;
  int goal = 63;
  std::vector<int> walls;
  RewardMode reward_mode = RewardMode::Sparse;
  double gamma = 0.99;
  int horizon = 100;

  int num_cells() const { return size * size; }
  bool is_wall(int cell) const;
  // Throws ConfigError on out-of-range cells, start == goal, walls on
  // start/goal or an unreachable goal.
  void validate() const;
};

GridWorld make_gridworld(int size, RewardMode mode);

struct StepResult {
  int next_state = 0;
  double reward = 0.0;
  bool done = false;
};

// `steps_taken` counts moves already made this episode; the episode ends at
// the goal or once `horizon` moves have been made.
StepResult env_step(const GridWorld& env, int state, int action, int steps_taken = 0);

// Shortest path length in moves from `from` to the goal; -1 if unreachable.
int shortest_path_length(const GridWorld& env, int from);

// One-hot rows for a list of cells.
Matrix encode_states(const GridWorld& env, std::span<const int> cells);
Matrix one_hot(int width, std::span<const int> cells);

// Uniform action with probability epsilon, otherwise the lowest-index argmax.
int epsilon_greedy(std::span<const double> q_values, double epsilon, Rng& rng);

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  int decay_steps = 10000;

  double at(std::int64_t step) const;
};

struct Transition {
  int state = 0;
  int action = 0;
  double reward = 0.0;
  int next_state = 0;
  bool done = false;

  friend bool operator==(const Transition&, const Transition&) = default;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(const Transition& t);
  // Uniform with replacement. Throws InputError when size() < batch_size.
  std::vector<Transition> sample(std::size_t batch_size, Rng& rng) const;

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return storage_.size(); }
  // Logical index, 0 = oldest.
  const Transition& at(std::size_t i) const;

  // "PLABRB1", u64 capacity, u64 size, then transitions oldest first:
  // i32 state, i32 action, f64 reward, i32 next_state, u8 done.
  void write(std::ostream& out) const;
  static ReplayBuffer read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static ReplayBuffer load(const std::filesystem::path& path);

 private:
  std::vector<Transition> storage_;
  std::size_t head_ = 0;  // oldest element
  std::size_t size_ = 0;
};

enum class Algorithm { Dqn, DoubleDqn };
std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& name);

struct RcConfig {
  int num_heads = 5;
  double cumulant_scale = 10.0;
  std::uint64_t seed = 0;
};

struct QNetConfig {
  std::vector<int> hidden{128, 64};  // last entry is the feature width
  int width_multiplier = 1;          // scales the feature layer only
  bool concat_random_features = false;
};

// Q-network plus optional heads. All aux heads read the learned features.
struct QNetwork {
  Params net;  // [cells, hidden..., actions]
  // Concatenation: a frozen random trunk feeds a second linear map into the
  // Q-values, so Q = net(x) + psi(x) * W_c + b_c and features are [phi, psi].
  std::optional<Params> random_trunk;  // read through features()
  std::optional<Params> concat_head;
  std::optional<AuxHeads> infer;
  InferConfig infer_cfg;
  std::optional<Params> rc_heads;     // [d, m]
  std::optional<Params> cumulant_net;  // frozen [cells, 32, m]
  double cumulant_scale = 1.0;

  Matrix q_values(const Matrix& x) const;
  // Learned features, concatenated with the random features when present.
  Matrix rank_features(const Matrix& x) const;
  Matrix cumulants(const Matrix& x) const;
};

QNetwork make_qnetwork(int num_inputs, const QNetConfig& cfg, std::uint64_t seed,
                       const std::optional<InferConfig>& infer, const std::optional<RcConfig>& rc);

// Gradients for the trainable blocks of a QNetwork; absent blocks stay empty.
struct QGrads {
  Params net;
  std::optional<Params> concat_head;
  std::optional<Params> infer_heads;
  std::optional<Params> rc_heads;
};

struct Batch {
  Matrix x;
  std::vector<int> actions;
  Vector rewards;
  Matrix x_next;
  std::vector<bool> done;
};

Batch make_batch(int num_inputs, std::span<const Transition> transitions);

// Bootstrap targets; terminal rows use the reward alone.
Vector td_targets(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma,
                  Algorithm algorithm);

struct LossGrads {
  double loss = 0.0;
  QGrads grads;
};

// Mean squared TD error over the batch; no gradient flows into the targets.
LossGrads td_loss(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma,
                  Algorithm algorithm);

// Random-cumulant heads: mean over batch and heads of
// (h_j(x) - c_j(x) - gamma * h_j(x'; target))^2, zero bootstrap at terminals.
LossGrads rc_aux_loss(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma);

struct AgentLoss {
  double total = 0.0;
  double td = 0.0;
  double infer = 0.0;
  double rc = 0.0;
  QGrads grads;
};

// td + alpha * infer + rc, whichever terms the network carries.
AgentLoss agent_loss(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma,
                     Algorithm algorithm);

struct AgentConfig {
  Algorithm algorithm = Algorithm::Dqn;
  QNetConfig network;
  EpsilonSchedule epsilon;
  int target_update_period = 1000;  // learner steps
  int learn_start = 1000;           // environment steps
  int update_period = 1;            // environment steps per learner step
  std::size_t buffer_capacity = 50000;
  int batch_size = 32;
  OptimizerConfig optimizer;
  std::int64_t total_steps = 50000;
  std::int64_t checkpoint_period = 5000;
  int rank_samples = 5000;
  double rank_epsilon = kDefaultRankEpsilon;
  double srank_delta = kDefaultSrankDelta;
  std::optional<InferConfig> infer;
  std::optional<RcConfig> rc;

  void validate() const;
};

struct EpisodeRecord {
  std::int64_t end_step = 0;  // environment steps completed when it ended
  double episode_return = 0.0;
  int length = 0;
  bool reached_goal = false;
};

// One row per checkpoint. Returns and losses are means over the interval
// since the previous checkpoint (NaN when nothing was recorded).
struct LogRow {
  std::int64_t step = 0;
  double episode_return = 0.0;
  double epsilon = 0.0;
  double td_loss = 0.0;
  double infer_loss = 0.0;
  int effective_dim = 0;
  int srank = 0;
};

struct TrainingLog {
  std::vector<EpisodeRecord> episodes;
  std::vector<LogRow> rows;
  std::vector<RankReport> ranks;  // parallel to rows
};

std::vector<std::string> training_csv_header();
std::vector<double> training_csv_row(const LogRow& row);

struct AgentResult {
  TrainingLog log;
  QNetwork online;
  ReplayBuffer buffer{1};
};

// Deterministic given (env, cfg, seed). When `run_dir` is set every
// checkpoint writes step_<k>/{params.bin, buffer.bin, rank.csv} beneath it.
AgentResult train_agent(const GridWorld& env, const AgentConfig& cfg, std::uint64_t seed,
                        const std::optional<std::filesystem::path>& run_dir = std::nullopt);

// params.bin records: online net, target net, then random trunk and concat
// head when concatenation is on.
void save_checkpoint(const std::filesystem::path& dir, const QNetwork& online, const QNetwork& target,
                     const ReplayBuffer& buffer, const RankReport& rank);

struct ProbeConfig {
  int num_target_seeds = 10;
  int budget_steps = 2000;
  int batch_size = 32;
  double oldest_fraction = 0.1;
  std::uint64_t target_seed = 0;
  std::uint64_t batch_seed = 0;
  OptimizerConfig optimizer;
};

struct ProbeInputs {
  Params learner;  // online net with the output layer cut to its first unit
  Matrix inputs;   // oldest states of the buffer snapshot
};

// Reads a checkpoint directory without modifying it.
ProbeInputs load_probe_inputs(const std::filesystem::path& checkpoint_dir, double oldest_fraction);

// Target-fitting capacity of a checkpoint on random-network targets.
CapacityResult probe_checkpoint_capacity(const std::filesystem::path& checkpoint_dir, const ProbeConfig& cfg = {});

TargetFittingSpec probe_spec(const ProbeInputs& in, const ProbeConfig& cfg);

}  // namespace plab
