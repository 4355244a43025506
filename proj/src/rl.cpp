#include "plab/rl.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

#include "plab/binio.hpp"
#include "plab/csv.hpp"
#include "plab/error.hpp"
#include "plab/tasks.hpp"

namespace plab {

std::string to_string(RewardMode mode) {
  switch (mode) {
    case RewardMode::Sparse: return "sparse";
    case RewardMode::Dense: return "dense";
    case RewardMode::Zeroed: return "zeroed";
  }
  return "?";
}

RewardMode parse_reward_mode(const std::string& name) {
  if (name == "sparse") return RewardMode::Sparse;
  if (name == "dense") return RewardMode::Dense;
  if (name == "zeroed") return RewardMode::Zeroed;
  throw ConfigError("unknown reward mode '" + name + "' (expected sparse, dense or zeroed)");
}

std::string to_string(Algorithm a) { return a == Algorithm::Dqn ? "dqn" : "double_dqn"; }

Algorithm parse_algorithm(const std::string& name) {
  if (name == "dqn") return Algorithm::Dqn;
  if (name == "double_dqn") return Algorithm::DoubleDqn;
  throw ConfigError("unknown algorithm '" + name + "' (expected dqn or double_dqn)");
}

bool GridWorld::is_wall(int cell) const { return std::find(walls.begin(), walls.end(), cell) != walls.end(); }

void GridWorld::validate() const {
  if (size < 2) throw ConfigError("gridworld size must be >= 2");
  const auto in_range = [&](int c) { return c >= 0 && c < num_cells(); };
  if (!in_range(start) || !in_range(goal)) throw ConfigError("gridworld start/goal out of range");
  if (start == goal) throw ConfigError("gridworld start and goal must differ");
  for (int w : walls) {
    if (!in_range(w)) throw ConfigError("gridworld wall out of range");
    if (w == start || w == goal) throw ConfigError("gridworld wall on start or goal");
  }
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gridworld gamma must lie in (0,1)");
  if (horizon < 1) throw ConfigError("gridworld horizon must be >= 1");
  if (shortest_path_length(*this, start) < 0) throw ConfigError("gridworld goal unreachable from start");
}

GridWorld make_gridworld(int size, RewardMode mode) {
  GridWorld env;
  env.size = size;
  env.start = 0;
  env.goal = size * size - 1;
  env.reward_mode = mode;
  env.horizon = 12 * size;
  env.validate();
  return env;
}

namespace {

int move(const GridWorld& env, int cell, int action) {
  int row = cell / env.size;
  int col = cell % env.size;
  switch (action) {
    case 0: --row; break;
    case 1: ++row; break;
    case 2: --col; break;
    case 3: ++col; break;
  }
  if (row < 0 || row >= env.size || col < 0 || col >= env.size) return cell;
  const int next = row * env.size + col;
  return env.is_wall(next) ? cell : next;
}

}  // namespace

StepResult env_step(const GridWorld& env, int state, int action, int steps_taken) {
  if (action < 0 || action >= kNumActions) throw InputError("action index " + std::to_string(action) + " out of range");
  if (state < 0 || state >= env.num_cells() || env.is_wall(state)) throw InputError("invalid state");
  if (state == env.goal) throw InputError("env_step from the terminal goal state");
  StepResult r;
  r.next_state = move(env, state, action);
  const bool at_goal = r.next_state == env.goal;
  switch (env.reward_mode) {
    case RewardMode::Sparse: r.reward = at_goal ? 1.0 : 0.0; break;
    case RewardMode::Dense: r.reward = (at_goal ? 1.0 : 0.0) - 0.01; break;
    case RewardMode::Zeroed: r.reward = 0.0; break;
  }
  r.done = at_goal || steps_taken + 1 >= env.horizon;
  return r;
}

int shortest_path_length(const GridWorld& env, int from) {
  std::vector<int> dist(env.num_cells(), -1);
  std::deque<int> queue{from};
  dist[from] = 0;
  while (!queue.empty()) {
    const int c = queue.front();
    queue.pop_front();
    if (c == env.goal) return dist[c];
    for (int a = 0; a < kNumActions; ++a) {
      const int n = move(env, c, a);
      if (dist[n] < 0) {
        dist[n] = dist[c] + 1;
        queue.push_back(n);
      }
    }
  }
  return -1;
}

Matrix one_hot(int width, std::span<const int> cells) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(cells.size()), width);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i] < 0 || cells[i] >= width) throw InputError("cell index out of range for one-hot encoding");
    x(static_cast<Eigen::Index>(i), cells[i]) = 1.0;
  }
  return x;
}

Matrix encode_states(const GridWorld& env, std::span<const int> cells) { return one_hot(env.num_cells(), cells); }

int epsilon_greedy(std::span<const double> q_values, double epsilon, Rng& rng) {
  if (q_values.empty()) throw InputError("epsilon_greedy: empty q-vector");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw InputError("epsilon must lie in [0,1]");
  if (epsilon > 0.0 && uniform01(rng) < epsilon) return static_cast<int>(uniform_index(rng, q_values.size()));
  return static_cast<int>(std::max_element(q_values.begin(), q_values.end()) - q_values.begin());
}

double EpsilonSchedule::at(std::int64_t step) const {
  if (decay_steps <= 0 || step >= decay_steps) return end;
  return start + (end - start) * static_cast<double>(step) / static_cast<double>(decay_steps);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : storage_(capacity) {
  if (capacity == 0) throw InputError("replay capacity must be >= 1");
}

void ReplayBuffer::push(const Transition& t) {
  if (size_ < storage_.size()) {
    storage_[(head_ + size_) % storage_.size()] = t;
    ++size_;
  } else {
    storage_[head_] = t;
    head_ = (head_ + 1) % storage_.size();
  }
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw InputError("replay index out of range");
  return storage_[(head_ + i) % storage_.size()];
}

std::vector<Transition> ReplayBuffer::sample(std::size_t batch_size, Rng& rng) const {
  if (batch_size == 0 || size_ < batch_size)
    throw InputError("cannot sample " + std::to_string(batch_size) + " transitions from a buffer of " +
                     std::to_string(size_));
  std::vector<Transition> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) out.push_back(at(uniform_index(rng, size_)));
  return out;
}

namespace {
constexpr char kBufferMagic[7] = {'P', 'L', 'A', 'B', 'R', 'B', '1'};
}

void ReplayBuffer::write(std::ostream& out) const {
  out.write(kBufferMagic, sizeof(kBufferMagic));
  binio::put_le<std::uint64_t>(out, storage_.size());
  binio::put_le<std::uint64_t>(out, size_);
  for (std::size_t i = 0; i < size_; ++i) {
    const Transition& t = at(i);
    binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.state));
    binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.action));
    binio::put_f64(out, t.reward);
    binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.next_state));
    binio::put_le<std::uint8_t>(out, t.done ? 1 : 0);
  }
}

ReplayBuffer ReplayBuffer::read(std::istream& in) {
  char magic[sizeof(kBufferMagic)];
  if (!in.read(magic, sizeof(magic)) || !std::equal(std::begin(magic), std::end(magic), std::begin(kBufferMagic)))
    throw FormatError("bad replay buffer magic (expected PLABRB1)");
  const auto capacity = binio::get_le<std::uint64_t>(in, "buffer capacity");
  const auto size = binio::get_le<std::uint64_t>(in, "buffer size");
  if (capacity == 0 || size > capacity || capacity > (std::uint64_t{1} << 32))
    throw FormatError("implausible replay buffer header");
  ReplayBuffer buf(capacity);
  for (std::uint64_t i = 0; i < size; ++i) {
    Transition t;
    t.state = static_cast<std::int32_t>(binio::get_le<std::uint32_t>(in, "transition"));
    t.action = static_cast<std::int32_t>(binio::get_le<std::uint32_t>(in, "transition"));
    t.reward = binio::get_f64(in, "transition");
    t.next_state = static_cast<std::int32_t>(binio::get_le<std::uint32_t>(in, "transition"));
    const auto done = binio::get_le<std::uint8_t>(in, "transition");
    if (done > 1) throw FormatError("invalid done flag in replay buffer");
    t.done = done == 1;
    buf.push(t);
  }
  return buf;
}

void ReplayBuffer::save(const std::filesystem::path& path) const {
  binio::atomic_write(path, [&](std::ostream& out) { write(out); });
}

ReplayBuffer ReplayBuffer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read(in);
}

Matrix QNetwork::q_values(const Matrix& x) const {
  Matrix q = forward(net, x).outputs;
  if (concat_head) q += forward(*concat_head, features(*random_trunk, x)).outputs;
  return q;
}

Matrix QNetwork::rank_features(const Matrix& x) const {
  Matrix phi = features(net, x);
  if (!random_trunk) return phi;
  const Matrix psi = features(*random_trunk, x);
  Matrix both(phi.rows(), phi.cols() + psi.cols());
  both << phi, psi;
  return both;
}

Matrix QNetwork::cumulants(const Matrix& x) const {
  if (!cumulant_net) throw InputError("network has no random-cumulant heads");
  return cumulant_scale * forward(*cumulant_net, x).outputs;
}

QNetwork make_qnetwork(int num_inputs, const QNetConfig& cfg, std::uint64_t seed,
                       const std::optional<InferConfig>& infer, const std::optional<RcConfig>& rc) {
  if (cfg.hidden.empty()) throw ConfigError("Q-network needs at least one hidden layer");
  if (cfg.width_multiplier < 1) throw ConfigError("width_multiplier must be >= 1");
  std::vector<int> trunk{num_inputs};
  trunk.insert(trunk.end(), cfg.hidden.begin(), cfg.hidden.end());
  trunk.back() *= cfg.width_multiplier;
  const int d = trunk.back();

  std::vector<int> widths = trunk;
  widths.push_back(kNumActions);
  QNetwork q;
  q.net = init_params(MlpSpec(widths), derive_seed(seed, 1));
  if (cfg.concat_random_features) {
    std::vector<int> rw = trunk;
    rw.push_back(1);  // unused output; only the features are read
    q.random_trunk = init_params(MlpSpec(rw), derive_seed(seed, 2));
    q.concat_head = init_params(MlpSpec({d, kNumActions}), derive_seed(seed, 3));
  }
  if (infer) {
    InferConfig ic = *infer;
    ic.head_seed = derive_seed(derive_seed(seed, 4), infer->head_seed);
    q.infer = attach_aux_heads(q.net, ic);
    q.infer_cfg = ic;
  }
  if (rc) {
    if (rc->num_heads < 1) throw ConfigError("rc.num_heads must be >= 1");
    q.rc_heads = init_params(MlpSpec({d, rc->num_heads}), derive_seed(derive_seed(seed, 5), rc->seed));
    q.cumulant_net = init_params(MlpSpec({num_inputs, 32, rc->num_heads}), derive_seed(derive_seed(seed, 6), rc->seed));
    q.cumulant_scale = rc->cumulant_scale;
  }
  return q;
}

Batch make_batch(int num_inputs, std::span<const Transition> transitions) {
  if (transitions.empty()) throw InputError("empty transition batch");
  std::vector<int> s, s2;
  Batch b;
  b.rewards.resize(static_cast<Eigen::Index>(transitions.size()));
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const Transition& t = transitions[i];
    if (t.action < 0 || t.action >= kNumActions) throw InputError("transition action out of range");
    s.push_back(t.state);
    s2.push_back(t.next_state);
    b.actions.push_back(t.action);
    b.rewards(static_cast<Eigen::Index>(i)) = t.reward;
    b.done.push_back(t.done);
  }
  b.x = one_hot(num_inputs, s);
  b.x_next = one_hot(num_inputs, s2);
  return b;
}

namespace {

Eigen::Index argmax_row(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < m.cols(); ++j)
    if (m(row, j) > m(row, best)) best = j;
  return best;
}

void check_batch(const QNetwork& q, const Batch& b) {
  const auto n = b.x.rows();
  if (n == 0) throw InputError("empty batch");
  if (b.x_next.rows() != n || b.rewards.size() != n || static_cast<Eigen::Index>(b.actions.size()) != n ||
      static_cast<Eigen::Index>(b.done.size()) != n)
    throw InputError("batch fields differ in length");
  if (b.x.cols() != q.net.spec().input_width() || b.x_next.cols() != q.net.spec().input_width())
    throw InputError("batch state width does not match the network input");
}

// Linear head gradient: weight = in^T * d_out, bias = column sums.
Params linear_grads(const Params& head, const Matrix& in, const Matrix& d_out) {
  Params g(head.spec(), head.seed());
  g.weight(0).noalias() = in.transpose() * d_out;
  g.bias(0) = d_out.colwise().sum().transpose();
  return g;
}

enum Terms : unsigned { kTd = 1, kInfer = 2, kRc = 4 };

AgentLoss evaluate(const QNetwork& on, const QNetwork& tg, const Batch& b, double gamma, Algorithm algo,
                   unsigned terms) {
  check_batch(on, b);
  const Eigen::Index n = b.x.rows();
  const double nd = static_cast<double>(n);
  const ForwardCache cache = forward_cached(on.net, b.x);
  const Matrix& phi = cache.features();
  Matrix d_q = Matrix::Zero(n, kNumActions);
  Matrix d_phi;
  AgentLoss out;

  std::optional<Matrix> psi;
  if (on.random_trunk) psi = features(*on.random_trunk, b.x);

  if (terms & kTd) {
    Matrix q = cache.outputs();
    if (on.concat_head) q += forward(*on.concat_head, *psi).outputs;
    const Vector y = td_targets(on, tg, b, gamma, algo);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double diff = q(i, b.actions[i]) - y(i);
      sum += diff * diff;
      d_q(i, b.actions[i]) = 2.0 * diff / nd;
    }
    out.td = sum / nd;
  }
  if (on.concat_head) out.grads.concat_head = linear_grads(*on.concat_head, *psi, d_q);

  const auto add_d_phi = [&](const Matrix& g) {
    if (d_phi.size() == 0) d_phi = g;
    else d_phi += g;
  };

  if ((terms & kInfer) && on.infer) {
    const double alpha = on.infer_cfg.alpha;
    InferTerm term = infer_term(*on.infer, b.x, phi, on.infer_cfg.beta);
    out.infer = term.loss;
    if (alpha != 0.0) {
      add_d_phi(alpha * term.d_features);
      for (double& v : term.head_grads.flat()) v *= alpha;
    } else {
      term.head_grads.set_zero();
    }
    out.grads.infer_heads = std::move(term.head_grads);
  } else if (on.infer) {
    out.grads.infer_heads = Params(on.infer->heads.spec(), on.infer->heads.seed());
  }

  if ((terms & kRc) && on.rc_heads) {
    if (!tg.rc_heads) throw InputError("target network has no random-cumulant heads");
    const Matrix h = forward(*on.rc_heads, phi).outputs;
    const Matrix h_next = forward(*tg.rc_heads, features(tg.net, b.x_next)).outputs;
    Matrix y = on.cumulants(b.x);
    for (Eigen::Index i = 0; i < n; ++i)
      if (!b.done[i]) y.row(i) += gamma * h_next.row(i);
    const Matrix diff = h - y;
    const double count = static_cast<double>(diff.size());
    out.rc = diff.squaredNorm() / count;
    const Matrix d_h = (2.0 / count) * diff;
    add_d_phi(d_h * on.rc_heads->weight(0).transpose());
    out.grads.rc_heads = linear_grads(*on.rc_heads, phi, d_h);
  } else if (on.rc_heads) {
    out.grads.rc_heads = Params(on.rc_heads->spec(), on.rc_heads->seed());
  }

  out.grads.net = backward(on.net, cache, d_q, d_phi.size() ? &d_phi : nullptr);
  out.total = out.td + (on.infer ? on.infer_cfg.alpha * out.infer : 0.0) + out.rc;
  return out;
}

std::vector<Params*> trainable_blocks(QNetwork& q) {
  std::vector<Params*> out{&q.net};
  if (q.concat_head) out.push_back(&*q.concat_head);
  if (q.infer) out.push_back(&q.infer->heads);
  if (q.rc_heads) out.push_back(&*q.rc_heads);
  return out;
}

std::vector<const Params*> grad_blocks(const QGrads& g) {
  std::vector<const Params*> out{&g.net};
  if (g.concat_head) out.push_back(&*g.concat_head);
  if (g.infer_heads) out.push_back(&*g.infer_heads);
  if (g.rc_heads) out.push_back(&*g.rc_heads);
  return out;
}

// Copies the trainable blocks; frozen parts are shared by construction.
void sync_target(QNetwork& target, const QNetwork& online) {
  target.net = online.net;
  target.concat_head = online.concat_head;
  if (online.infer) target.infer->heads = online.infer->heads;
  target.rc_heads = online.rc_heads;
}

}  // namespace

Vector td_targets(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma,
                  Algorithm algorithm) {
  check_batch(online, batch);
  const Eigen::Index n = batch.x.rows();
  const Matrix q_next = target.q_values(batch.x_next);
  Matrix q_online;
  if (algorithm == Algorithm::DoubleDqn) q_online = online.q_values(batch.x_next);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i) = batch.rewards(i);
    if (batch.done[i]) continue;
    const Eigen::Index a = algorithm == Algorithm::DoubleDqn ? argmax_row(q_online, i) : argmax_row(q_next, i);
    y(i) += gamma * q_next(i, a);
  }
  return y;
}

LossGrads td_loss(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma,
                  Algorithm algorithm) {
  AgentLoss l = evaluate(online, target, batch, gamma, algorithm, kTd);
  return {l.td, std::move(l.grads)};
}

LossGrads rc_aux_loss(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma) {
  if (!online.rc_heads) throw InputError("rc_aux_loss: network has no random-cumulant heads");
  AgentLoss l = evaluate(online, target, batch, gamma, Algorithm::Dqn, kRc);
  return {l.rc, std::move(l.grads)};
}

AgentLoss agent_loss(const QNetwork& online, const QNetwork& target, const Batch& batch, double gamma,
                     Algorithm algorithm) {
  return evaluate(online, target, batch, gamma, algorithm, kTd | kInfer | kRc);
}

void AgentConfig::validate() const {
  if (target_update_period < 1 || update_period < 1 || checkpoint_period < 1)
    throw ConfigError("agent periods must be >= 1");
  if (learn_start < 0) throw ConfigError("learn_start must be >= 0");
  if (buffer_capacity < 1) throw ConfigError("buffer_capacity must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (rank_samples < 1) throw ConfigError("rank_samples must be >= 1");
  if (!(epsilon.start >= 0.0 && epsilon.start <= 1.0 && epsilon.end >= 0.0 && epsilon.end <= 1.0))
    throw ConfigError("epsilon schedule values must lie in [0,1]");
  if (network.width_multiplier < 1) throw ConfigError("width_multiplier must be >= 1");
  if (infer) infer->validate();
  if (rc && rc->num_heads < 1) throw ConfigError("rc.num_heads must be >= 1");
}

std::vector<std::string> training_csv_header() {
  return {"step", "episode_return", "epsilon", "td_loss", "infer_loss", "effective_dim", "srank"};
}

std::vector<double> training_csv_row(const LogRow& r) {
  return {static_cast<double>(r.step), r.episode_return, r.epsilon, r.td_loss, r.infer_loss,
          static_cast<double>(r.effective_dim), static_cast<double>(r.srank)};
}

void save_checkpoint(const std::filesystem::path& dir, const QNetwork& online, const QNetwork& target,
                     const ReplayBuffer& buffer, const RankReport& rank) {
  std::vector<Params> records{online.net, target.net};
  if (online.random_trunk) {
    records.push_back(*online.random_trunk);
    records.push_back(*online.concat_head);
  }
  save_params(dir / "params.bin", records);
  buffer.save(dir / "buffer.bin");
  csv::write_file(dir / "rank.csv", rank_csv_header(), {rank_csv_row(rank)});
}

namespace {

std::vector<int> sample_states(const ReplayBuffer& buffer, int count, Rng& rng) {
  const std::size_t size = buffer.size();
  const std::size_t k = std::min<std::size_t>(size, static_cast<std::size_t>(count));
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  // Partial Fisher-Yates: the first k entries are a uniform subset.
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, size - i)]);
  std::vector<int> states(k);
  for (std::size_t i = 0; i < k; ++i) states[i] = buffer.at(idx[i]).state;
  return states;
}

double mean_or_nan(double sum, std::int64_t count) {
  return count > 0 ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

AgentResult train_agent(const GridWorld& env, const AgentConfig& cfg, std::uint64_t seed,
                        const std::optional<std::filesystem::path>& run_dir) {
  env.validate();
  cfg.validate();
  const int width = env.num_cells();
  AgentResult res;
  QNetwork& online = res.online;
  online = make_qnetwork(width, cfg.network, seed, cfg.infer, cfg.rc);
  QNetwork target = online;
  Optimizer opt(cfg.optimizer);
  res.buffer = ReplayBuffer(cfg.buffer_capacity);
  ReplayBuffer& buffer = res.buffer;
  Rng act_rng = make_rng(seed, 7);
  Rng replay_rng = make_rng(seed, 8);

  int state = env.start;
  int ep_steps = 0;
  double ep_return = 0.0;
  std::int64_t learner_steps = 0;
  double sum_return = 0.0, sum_td = 0.0, sum_infer = 0.0;
  std::int64_t n_episodes = 0, n_updates = 0;

  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    const double eps = cfg.epsilon.at(step);
    const int cell[] = {state};
    const Matrix q = online.q_values(one_hot(width, cell));
    const int action = epsilon_greedy(std::span<const double>(q.data(), kNumActions), eps, act_rng);
    const StepResult sr = env_step(env, state, action, ep_steps);
    buffer.push({state, action, sr.reward, sr.next_state, sr.done});
    ep_return += sr.reward;
    ++ep_steps;
    if (sr.done) {
      res.log.episodes.push_back({step + 1, ep_return, ep_steps, sr.next_state == env.goal});
      sum_return += ep_return;
      ++n_episodes;
      state = env.start;
      ep_steps = 0;
      ep_return = 0.0;
    } else {
      state = sr.next_state;
    }

    if (step + 1 >= cfg.learn_start && buffer.size() >= static_cast<std::size_t>(cfg.batch_size) &&
        (step + 1) % cfg.update_period == 0) {
      const auto transitions = buffer.sample(static_cast<std::size_t>(cfg.batch_size), replay_rng);
      const Batch batch = make_batch(width, transitions);
      const AgentLoss loss = agent_loss(online, target, batch, env.gamma, cfg.algorithm);
      const auto params = trainable_blocks(online);
      const auto grads = grad_blocks(loss.grads);
      opt.step(params, grads);
      sum_td += loss.td;
      sum_infer += loss.infer;
      ++n_updates;
      if (++learner_steps % cfg.target_update_period == 0) sync_target(target, online);
    }

    if ((step + 1) % cfg.checkpoint_period == 0) {
      Rng rank_rng = make_rng(derive_seed(seed, 9), static_cast<std::uint64_t>(step + 1));
      const std::vector<int> states = sample_states(buffer, cfg.rank_samples, rank_rng);
      const RankReport rank =
          rank_report(FeatureMatrix(online.rank_features(one_hot(width, states))), cfg.rank_epsilon, cfg.srank_delta);
      LogRow row;
      row.step = step + 1;
      row.episode_return = mean_or_nan(sum_return, n_episodes);
      row.epsilon = eps;
      row.td_loss = mean_or_nan(sum_td, n_updates);
      row.infer_loss = mean_or_nan(sum_infer, n_updates);
      row.effective_dim = rank.effective_dim;
      row.srank = rank.srank;
      res.log.rows.push_back(row);
      res.log.ranks.push_back(rank);
      sum_return = sum_td = sum_infer = 0.0;
      n_episodes = n_updates = 0;
      if (run_dir) save_checkpoint(*run_dir / ("step_" + std::to_string(step + 1)), online, target, buffer, rank);
    }
  }
  return res;
}

ProbeInputs load_probe_inputs(const std::filesystem::path& checkpoint_dir, double oldest_fraction) {
  if (!(oldest_fraction > 0.0 && oldest_fraction <= 1.0)) throw InputError("oldest_fraction must lie in (0,1]");
  const std::vector<Params> records = load_params(checkpoint_dir / "params.bin");
  if (records.size() > 2)
    throw InputError("capacity probe does not support networks with concatenated random features");
  const ReplayBuffer buffer = ReplayBuffer::load(checkpoint_dir / "buffer.bin");
  if (buffer.size() == 0) throw InputError("checkpoint buffer snapshot is empty");

  const Params& net = records[0];
  std::vector<int> widths = net.spec().widths();
  widths.back() = 1;
  ProbeInputs in;
  in.learner = Params(MlpSpec(widths), net.seed());
  const int last = net.spec().num_layers() - 1;
  for (int l = 0; l < last; ++l) {
    in.learner.weight(l) = net.weight(l);
    in.learner.bias(l) = net.bias(l);
  }
  in.learner.weight(last) = net.weight(last).leftCols(1);
  in.learner.bias(last)(0) = net.bias(last)(0);

  const std::size_t count =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(oldest_fraction * static_cast<double>(buffer.size()))));
  std::vector<int> states(count);
  for (std::size_t i = 0; i < count; ++i) states[i] = buffer.at(i).state;
  in.inputs = one_hot(net.spec().input_width(), states);
  return in;
}

TargetFittingSpec probe_spec(const ProbeInputs& in, const ProbeConfig& cfg) {
  TargetFittingSpec spec;
  spec.initial = in.learner;
  spec.optimizer = cfg.optimizer;
  spec.inputs = in.inputs;
  const int dim = static_cast<int>(in.inputs.cols());
  spec.target_sampler = [dim](std::uint64_t s) -> TargetFunction {
    const TargetFn t = make_target(TargetKind::RandomNet, s, dim);
    return [t](const Matrix& x) { return eval_target(t, x); };
  };
  spec.budget_steps = cfg.budget_steps;
  spec.batch_size = cfg.batch_size;
  spec.num_target_seeds = cfg.num_target_seeds;
  spec.target_seed = cfg.target_seed;
  spec.batch_seed = cfg.batch_seed;
  return spec;
}

CapacityResult probe_checkpoint_capacity(const std::filesystem::path& checkpoint_dir, const ProbeConfig& cfg) {
  return target_fitting_capacity(probe_spec(load_probe_inputs(checkpoint_dir, cfg.oldest_fraction), cfg));
}

}  // namespace plab
