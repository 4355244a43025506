#include "doctest.h"

#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "plab/capacity.hpp"
#include "plab/csv.hpp"
#include "plab/error.hpp"
#include "plab/rl.hpp"
#include "test_support.hpp"

using namespace plab;
using plab::testing::finite_difference;
using plab::testing::relative_error;
namespace fs = std::filesystem;

namespace {

// Optimal state values by synchronous value iteration over the
// deterministic gridworld dynamics, with the goal absorbing.
std::vector<double> value_iteration(const GridWorld& env) {
  std::vector<double> v(env.num_cells(), 0.0);
  for (int iter = 0; iter < 5000; ++iter) {
    std::vector<double> next(v.size(), 0.0);
    double delta = 0.0;
    for (int s = 0; s < env.num_cells(); ++s) {
      if (s == env.goal || env.is_wall(s)) continue;
      double best = -1e300;
      for (int a = 0; a < kNumActions; ++a) {
        const StepResult r = env_step(env, s, a, 0);
        const double cont = r.next_state == env.goal ? 0.0 : env.gamma * v[r.next_state];
        best = std::max(best, r.reward + cont);
      }
      next[s] = best;
      delta = std::max(delta, std::abs(next[s] - v[s]));
    }
    v = next;
    if (delta < 1e-14) break;
  }
  return v;
}

// Pearson chi-square statistic against a uniform distribution.
double chi_square_uniform(const std::vector<int>& counts) {
  double total = 0.0;
  for (int c : counts) total += c;
  const double expected = total / static_cast<double>(counts.size());
  double chi = 0.0;
  for (int c : counts) chi += (c - expected) * (c - expected) / expected;
  return chi;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

GridWorld tiny_world() {
  GridWorld env;
  env.size = 3;
  env.start = 0;
  env.goal = 8;
  env.horizon = 20;
  env.gamma = 0.9;
  env.reward_mode = RewardMode::Dense;
  return env;
}

QNetConfig tiny_net() {
  QNetConfig c;
  c.hidden = {6, 5};
  return c;
}

Batch tiny_batch(const GridWorld& env, int n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<Transition> ts;
  for (int i = 0; i < n; ++i) {
    int s;
    do {
      s = static_cast<int>(uniform_index(rng, env.num_cells()));
    } while (s == env.goal);
    const int a = static_cast<int>(uniform_index(rng, kNumActions));
    const StepResult r = env_step(env, s, a, static_cast<int>(uniform_index(rng, env.horizon)));
    ts.push_back({s, a, r.reward, r.next_state, r.done});
  }
  return make_batch(env.num_cells(), ts);
}

void jitter(QNetwork& q, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  for (double& v : q.net.flat()) v += 0.1 * standard_normal(rng);
  if (q.concat_head)
    for (double& v : q.concat_head->flat()) v += 0.1 * standard_normal(rng);
  if (q.infer)
    for (double& v : q.infer->heads.flat()) v += 0.1 * standard_normal(rng);
  if (q.rc_heads)
    for (double& v : q.rc_heads->flat()) v += 0.1 * standard_normal(rng);
}

}  // namespace

TEST_CASE("env_step basics") {
  GridWorld env = make_gridworld(4, RewardMode::Sparse);
  env.walls = {1};
  env.validate();
  StepResult r = env_step(env, 14, 3);
  CHECK(r.next_state == 15);
  CHECK(r.reward == 1.0);
  CHECK(r.done);
  r = env_step(env, 0, 3);  // into the wall at cell 1
  CHECK(r.next_state == 0);
  CHECK(r.reward == 0.0);
  CHECK_FALSE(r.done);
  r = env_step(env, 0, 0);  // off the top edge
  CHECK(r.next_state == 0);
  r = env_step(env, 0, 1);
  CHECK(r.next_state == 4);
  CHECK(env_step(env, 4, 1, env.horizon - 1).done);
  CHECK_THROWS_AS(env_step(env, 0, 4), InputError);
  CHECK_THROWS_AS(env_step(env, 0, -1), InputError);

  env.reward_mode = RewardMode::Dense;
  CHECK(env_step(env, 0, 1).reward == -0.01);
  CHECK(env_step(env, 14, 3).reward == doctest::Approx(0.99));
  env.reward_mode = RewardMode::Zeroed;
  CHECK(env_step(env, 14, 3).reward == 0.0);
}

TEST_CASE("gridworld validation") {
  GridWorld env = make_gridworld(3, RewardMode::Sparse);
  env.goal = env.start;
  CHECK_THROWS_AS(env.validate(), ConfigError);
  env = make_gridworld(3, RewardMode::Sparse);
  env.walls = {5, 7};  // seals the goal in the corner
  CHECK_THROWS_AS(env.validate(), ConfigError);
}

TEST_CASE("optimal start value is gamma^(L-1) in sparse mode") {
  for (int size : {3, 5, 8}) {
    GridWorld env = make_gridworld(size, RewardMode::Sparse);
    if (size == 5) env.walls = {1, 6, 11, 16, 8, 13};
    env.validate();
    const std::vector<double> v = value_iteration(env);
    const int len = shortest_path_length(env, env.start);
    CAPTURE(size);
    CHECK(len >= 2 * (size - 1));
    CHECK(v[env.start] == doctest::Approx(std::pow(env.gamma, len - 1)).epsilon(1e-12));
  }
}

TEST_CASE("epsilon_greedy") {
  Rng rng = make_rng(1);
  const std::array<double, 4> q{0.1, 0.9, 0.3, 0.3};
  CHECK(epsilon_greedy(q, 0.0, rng) == 1);
  const std::array<double, 4> ties{0.5, 0.5, 0.1, 0.1};
  CHECK(epsilon_greedy(ties, 0.0, rng) == 0);
  CHECK_THROWS_AS(epsilon_greedy(std::span<const double>(), 0.1, rng), InputError);
  CHECK_THROWS_AS(epsilon_greedy(q, 1.5, rng), InputError);

  std::vector<int> counts(4, 0);
  for (int i = 0; i < 10000; ++i) ++counts[epsilon_greedy(q, 1.0, rng)];
  CHECK(chi_square_uniform(counts) < 11.345);  // chi2(3) at p = 0.01
}

TEST_CASE("epsilon schedule anneals linearly") {
  const EpsilonSchedule s;
  CHECK(s.at(0) == 1.0);
  CHECK(s.at(5000) == doctest::Approx(0.525));
  CHECK(s.at(10000) == 0.05);
  CHECK(s.at(50000) == 0.05);
}

TEST_CASE("replay buffer FIFO and sampling") {
  Rng rng = make_rng(2);
  ReplayBuffer one(3);
  one.push({1, 2, 0.5, 3, false});
  CHECK(one.sample(1, rng)[0] == Transition{1, 2, 0.5, 3, false});
  CHECK_THROWS_AS(one.sample(2, rng), InputError);

  ReplayBuffer buf(4);
  for (int i = 0; i < 5; ++i) buf.push({i, 0, 0.0, i, false});
  CHECK(buf.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(buf.at(i).state == static_cast<int>(i) + 1);

  ReplayBuffer ten(10);
  for (int i = 0; i < 10; ++i) ten.push({i, 0, 0.0, i, false});
  std::vector<int> counts(10, 0);
  for (int draw = 0; draw < 1000; ++draw)
    for (const Transition& t : ten.sample(10, rng)) ++counts[t.state];
  CHECK(chi_square_uniform(counts) < 21.666);  // chi2(9) at p = 0.01
}

TEST_CASE("replay buffer serialization") {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) buf.push({i, i % 4, 0.25 * i, i + 1, i % 2 == 0});
  std::stringstream ss;
  buf.write(ss);
  const ReplayBuffer back = ReplayBuffer::read(ss);
  CHECK(back.capacity() == 3);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back.at(i) == buf.at(i));
  std::stringstream bad("PLABRB2.........");
  CHECK_THROWS_AS(ReplayBuffer::read(bad), FormatError);
}

TEST_CASE("TD targets") {
  // Networks with zero weights output their final bias for every input.
  QNetwork online, target;
  online.net = Params(MlpSpec({1, 1, 4}));
  target.net = Params(MlpSpec({1, 1, 4}));
  online.net.bias(1) << 1, 2, 0, 0;
  target.net.bias(1) << 5, 3, 0, 0;
  Batch b;
  b.x = Matrix::Zero(2, 1);
  b.x_next = Matrix::Zero(2, 1);
  b.actions = {0, 1};
  b.rewards = Vector::Constant(2, 1.0);
  b.done = {false, true};
  const Vector dd = td_targets(online, target, b, 0.9, Algorithm::DoubleDqn);
  CHECK(dd(0) == doctest::Approx(3.7).epsilon(1e-15));
  CHECK(dd(1) == 1.0);
  const Vector dqn = td_targets(online, target, b, 0.9, Algorithm::Dqn);
  CHECK(dqn(0) == doctest::Approx(5.5).epsilon(1e-15));
  const Vector myopic = td_targets(online, target, b, 0.0, Algorithm::Dqn);
  CHECK(myopic(0) == 1.0);
  CHECK(myopic(1) == 1.0);

  b.x = Matrix::Zero(2, 3);
  CHECK_THROWS_AS(td_targets(online, target, b, 0.9, Algorithm::Dqn), InputError);
}

TEST_CASE("TD, RC and combined gradients match finite differences") {
  const GridWorld env = tiny_world();
  for (int variant = 0; variant < 4; ++variant) {
    QNetConfig nc = tiny_net();
    nc.concat_random_features = variant >= 2;
    std::optional<InferConfig> infer;
    std::optional<RcConfig> rc;
    if (variant % 2 == 1) {
      infer = InferConfig{.k = 3};
      rc = RcConfig{.num_heads = 2, .cumulant_scale = 1.0};
    }
    QNetwork online = make_qnetwork(env.num_cells(), nc, 3 + variant, infer, rc);
    QNetwork target = online;
    jitter(online, 10 + variant);
    CHECK(online.net.size() <= 500);
    const Batch b = tiny_batch(env, 7, 20 + variant);
    for (Algorithm algo : {Algorithm::Dqn, Algorithm::DoubleDqn}) {
      CAPTURE(variant);
      const LossGrads td = td_loss(online, target, b, env.gamma, algo);
      CHECK(relative_error(td.grads.net.flat(), finite_difference(online.net, [&] {
                             return td_loss(online, target, b, env.gamma, algo).loss;
                           })) < 1e-5);
      const AgentLoss all = agent_loss(online, target, b, env.gamma, algo);
      const auto total = [&] { return agent_loss(online, target, b, env.gamma, algo).total; };
      CHECK(relative_error(all.grads.net.flat(), finite_difference(online.net, total)) < 1e-5);
      if (online.concat_head)
        CHECK(relative_error(all.grads.concat_head->flat(), finite_difference(*online.concat_head, total)) < 1e-5);
      if (online.infer)
        CHECK(relative_error(all.grads.infer_heads->flat(), finite_difference(online.infer->heads, total)) < 1e-5);
      if (online.rc_heads) {
        CHECK(relative_error(all.grads.rc_heads->flat(), finite_difference(*online.rc_heads, total)) < 1e-5);
        const LossGrads rcl = rc_aux_loss(online, target, b, env.gamma);
        const auto rc_only = [&] { return rc_aux_loss(online, target, b, env.gamma).loss; };
        CHECK(relative_error(rcl.grads.net.flat(), finite_difference(online.net, rc_only)) < 1e-5);
        CHECK(relative_error(rcl.grads.rc_heads->flat(), finite_difference(*online.rc_heads, rc_only)) < 1e-5);
      }
    }
  }
}

TEST_CASE("rc loss needs rc heads; zero cumulants and heads are a fixed point") {
  const GridWorld env = tiny_world();
  QNetwork plain = make_qnetwork(env.num_cells(), tiny_net(), 1, std::nullopt, std::nullopt);
  const Batch b = tiny_batch(env, 5, 1);
  CHECK_THROWS_AS(rc_aux_loss(plain, plain, b, 0.9), InputError);

  QNetwork q = make_qnetwork(env.num_cells(), tiny_net(), 1, std::nullopt, RcConfig{});
  q.cumulant_net->set_zero();
  q.rc_heads->set_zero();
  const LossGrads l = rc_aux_loss(q, q, b, 0.9);
  CHECK(l.loss == 0.0);
  for (double g : l.grads.rc_heads->flat()) CHECK(g == 0.0);
  for (double g : l.grads.net.flat()) CHECK(g == 0.0);
}

TEST_CASE("rc heads on a tabular chain converge to the discounted cumulant returns") {
  // Chain 0 -> 1 -> 2 -> terminal; one-hot features pass through an
  // identity trunk, so the heads are tabular.
  const double gamma = 0.8;
  QNetConfig nc;
  nc.hidden = {3};
  QNetwork q = make_qnetwork(3, nc, 5, std::nullopt, RcConfig{.num_heads = 2, .cumulant_scale = 1.0});
  q.net.weight(0) = RowMatrix::Identity(3, 3);
  q.net.bias(0).setZero();
  const std::vector<Transition> ts{{0, 0, 0.0, 1, false}, {1, 0, 0.0, 2, false}, {2, 0, 0.0, 0, true}};
  const Batch b = make_batch(3, ts);
  const Matrix c = q.cumulants(Matrix::Identity(3, 3));

  for (int it = 0; it < 4000; ++it) {
    const QNetwork target = q;  // refreshed every step
    const LossGrads l = rc_aux_loss(q, target, b, gamma);
    auto w = q.rc_heads->flat();
    auto g = l.grads.rc_heads->flat();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.5 * g[i];
  }
  // Oracle: backward value iteration on the chain.
  const Matrix h = forward(*q.rc_heads, Matrix::Identity(3, 3)).outputs;
  for (int j = 0; j < 2; ++j) {
    const double v2 = c(2, j);
    const double v1 = c(1, j) + gamma * v2;
    const double v0 = c(0, j) + gamma * v1;
    CHECK(h(0, j) == doctest::Approx(v0).epsilon(1e-9));
    CHECK(h(1, j) == doctest::Approx(v1).epsilon(1e-9));
    CHECK(h(2, j) == doctest::Approx(v2).epsilon(1e-9));
  }
  CHECK(q.cumulant_scale == 1.0);
  CHECK(RcConfig{}.cumulant_scale == 10.0);
}

TEST_CASE("width multiplier doubles the feature layer") {
  QNetConfig nc = tiny_net();
  nc.width_multiplier = 2;
  const QNetwork q = make_qnetwork(9, nc, 1, InferConfig{}, std::nullopt);
  CHECK(q.net.spec().widths() == std::vector<int>{9, 6, 10, 4});
  CHECK(q.infer->heads.spec().widths() == std::vector<int>{10, 10});
}

TEST_CASE("agent defaults") {
  const AgentConfig cfg;
  CHECK(cfg.rank_samples == 5000);
  CHECK(cfg.target_update_period == 1000);
  CHECK(cfg.learn_start == 1000);
  CHECK(cfg.buffer_capacity == 50000);
  CHECK(cfg.epsilon.decay_steps == 10000);
  CHECK(ProbeConfig{}.num_target_seeds == 10);
  CHECK(ProbeConfig{}.budget_steps == 2000);
}

namespace {

AgentConfig small_agent() {
  AgentConfig cfg;
  cfg.network = tiny_net();
  cfg.total_steps = 1400;
  cfg.learn_start = 1;
  cfg.batch_size = 8;
  cfg.checkpoint_period = 200;
  cfg.rank_samples = 100;
  cfg.buffer_capacity = 500;
  cfg.epsilon.decay_steps = 500;
  return cfg;
}

}  // namespace

TEST_CASE("training is deterministic and frozen parts never move") {
  const GridWorld env = tiny_world();
  AgentConfig cfg = small_agent();
  cfg.infer = InferConfig{.k = 2};
  cfg.rc = RcConfig{.num_heads = 2};
  cfg.network.concat_random_features = true;
  cfg.algorithm = Algorithm::DoubleDqn;
  const AgentResult a = train_agent(env, cfg, 42);
  const AgentResult b = train_agent(env, cfg, 42);
  REQUIRE(a.log.rows.size() == 7);
  std::ostringstream ca, cb;
  std::vector<std::vector<double>> ra, rb;
  for (const auto& r : a.log.rows) ra.push_back(training_csv_row(r));
  for (const auto& r : b.log.rows) rb.push_back(training_csv_row(r));
  csv::write(ca, training_csv_header(), ra);
  csv::write(cb, training_csv_header(), rb);
  CHECK(ca.str() == cb.str());
  CHECK(a.online.net == b.online.net);
  CHECK(a.log.episodes.size() == b.log.episodes.size());

  const QNetwork fresh = make_qnetwork(env.num_cells(), cfg.network, 42, cfg.infer, cfg.rc);
  CHECK(*a.online.random_trunk == *fresh.random_trunk);
  CHECK(*a.online.cumulant_net == *fresh.cumulant_net);
  CHECK(a.online.infer->init->trunk == fresh.infer->init->trunk);
  CHECK(a.online.infer->init->heads == fresh.infer->init->heads);
  CHECK_FALSE(a.online.net == fresh.net);
  const Matrix x = Matrix::Identity(9, 9);
  CHECK(features(*a.online.random_trunk, x) == features(*fresh.random_trunk, x));

  CHECK(train_agent(env, cfg, 43).online.net != a.online.net);
}

TEST_CASE("target network only changes at update events") {
  const GridWorld env = tiny_world();
  AgentConfig cfg = small_agent();
  const fs::path dir = fresh_dir("plab_t_target");
  train_agent(env, cfg, 7, dir);
  // Updates start once 8 transitions exist, so learner step 1000 falls at
  // environment step 1007.
  const auto target_at = [&](int step) { return load_params(dir / ("step_" + std::to_string(step)) / "params.bin")[1]; };
  const auto online_at = [&](int step) { return load_params(dir / ("step_" + std::to_string(step)) / "params.bin")[0]; };
  const QNetwork init = make_qnetwork(env.num_cells(), cfg.network, 7, std::nullopt, std::nullopt);
  for (int step : {200, 400, 600, 800, 1000}) CHECK(target_at(step) == init.net);
  CHECK_FALSE(target_at(1200) == init.net);
  CHECK(target_at(1200) == target_at(1400));
  CHECK_FALSE(target_at(1200) == online_at(1200));
}

TEST_CASE("checkpoints and capacity probe") {
  const GridWorld env = tiny_world();
  AgentConfig cfg = small_agent();
  cfg.total_steps = 400;
  const fs::path dir = fresh_dir("plab_t_ckpt");
  const AgentResult res = train_agent(env, cfg, 3, dir);
  const fs::path ck = dir / "step_400";
  REQUIRE(fs::exists(ck / "params.bin"));
  REQUIRE(fs::exists(ck / "buffer.bin"));
  REQUIRE(fs::exists(ck / "rank.csv"));
  const csv::Table rank = csv::read_file(ck / "rank.csv");
  CHECK(rank.rows.size() == 1);
  CHECK(rank.rows[0][3] == res.log.rows.back().effective_dim);
  CHECK(load_params(ck / "params.bin")[0] == res.online.net);
  CHECK(ReplayBuffer::load(ck / "buffer.bin").size() == 400);

  const std::string params_before = slurp(ck / "params.bin");
  const std::string buffer_before = slurp(ck / "buffer.bin");
  ProbeConfig pc;
  pc.num_target_seeds = 3;
  pc.budget_steps = 50;
  const CapacityResult probe = probe_checkpoint_capacity(ck, pc);
  CHECK(slurp(ck / "params.bin") == params_before);
  CHECK(slurp(ck / "buffer.bin") == buffer_before);
  CHECK(probe.per_seed_mse.size() == 3);

  // Delegation oracle: the same inputs and seeds through the capacity module.
  const ProbeInputs in = load_probe_inputs(ck, 0.1);
  CHECK(in.inputs.rows() == 40);
  for (Eigen::Index i = 0; i < 40; ++i) {
    const int state = ReplayBuffer::load(ck / "buffer.bin").at(static_cast<std::size_t>(i)).state;
    CHECK(in.inputs(i, state) == 1.0);
  }
  CHECK(in.learner.spec().output_width() == 1);
  CHECK(forward(in.learner, in.inputs).outputs.col(0) == forward(res.online.net, in.inputs).outputs.col(0));
  const CapacityResult direct = target_fitting_capacity(probe_spec(in, pc));
  CHECK(direct.per_seed_mse == probe.per_seed_mse);

  const fs::path empty = fresh_dir("plab_t_empty");
  fs::create_directories(empty);
  save_params(empty / "params.bin", std::vector<Params>{res.online.net, res.online.net});
  ReplayBuffer(4).save(empty / "buffer.bin");
  CHECK_THROWS_AS(probe_checkpoint_capacity(empty), InputError);
}

TEST_CASE("training log CSV header") {
  CHECK(training_csv_header() ==
        std::vector<std::string>{"step", "episode_return", "epsilon", "td_loss", "infer_loss", "effective_dim", "srank"});
}
