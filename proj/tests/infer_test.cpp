#include "doctest.h"

#include "plab/error.hpp"
#include "plab/infer.hpp"
#include "plab/tasks.hpp"
#include "test_support.hpp"

using namespace plab;
using plab::testing::finite_difference;
using plab::testing::random_matrix;
using plab::testing::relative_error;

TEST_CASE("InferConfig defaults") {
  const InferConfig cfg;
  CHECK(cfg.k == 10);
  CHECK(cfg.beta == 100.0);
  CHECK(cfg.alpha == 0.1);
}

TEST_CASE("attaching heads leaves the base network bit-identical") {
  const Params base = init_params(MlpSpec({5, 8, 6, 2}), 21);
  const Params before = base;
  Rng rng = make_rng(1);
  const Matrix x = random_matrix(rng, 4, 5);
  const Matrix out_before = forward(base, x).outputs;
  const AuxHeads aux = attach_aux_heads(base, InferConfig{});
  CHECK(base == before);
  CHECK(forward(base, x).outputs == out_before);
  const Matrix g = aux_outputs(aux.heads, features(base, x));
  CHECK(g.rows() == 4);
  CHECK(g.cols() == 10);
  CHECK(aux.init->trunk == base);
  CHECK(aux.init->heads == aux.heads);
}

TEST_CASE("heads need a hidden layer") {
  CHECK_THROWS_AS(attach_aux_heads(init_params(MlpSpec({3, 2}), 1), InferConfig{}), InputError);
}

TEST_CASE("InFeR loss and gradient vanish at initialization with beta = 1") {
  const Params base = init_params(MlpSpec({4, 7, 5, 1}), 2);
  const AuxHeads aux = attach_aux_heads(base, {.k = 3, .beta = 1.0});
  Rng rng = make_rng(2);
  const Matrix x = random_matrix(rng, 6, 4);
  CHECK(infer_loss(base, aux, x, 1.0) == 0.0);
  const InferTerm term = infer_term(aux, x, features(base, x), 1.0);
  CHECK(term.d_features.isZero(0.0));
  for (double v : term.head_grads.flat()) CHECK(v == 0.0);
}

TEST_CASE("InFeR loss with beta = 0 is the mean squared head norm") {
  const Params base = init_params(MlpSpec({4, 7, 5, 1}), 3);
  const AuxHeads aux = attach_aux_heads(base, {.k = 4});
  Rng rng = make_rng(3);
  const Matrix x = random_matrix(rng, 9, 4);
  const Matrix g = aux_outputs(aux.heads, features(base, x));
  CHECK(infer_loss(base, aux, x, 0.0) == doctest::Approx(g.squaredNorm() / 9.0).epsilon(1e-14));
}

TEST_CASE("InFeR loss hand example: one head, g = 2, g0 = 1, beta = 100") {
  Params trunk(MlpSpec({1, 1, 1}));
  trunk.weight(0)(0, 0) = 1.0;
  Params heads0(MlpSpec({1, 1}));
  heads0.weight(0)(0, 0) = 1.0;
  AuxHeads aux;
  aux.init = std::make_shared<const FrozenInit>(FrozenInit{trunk, heads0});
  aux.heads = heads0;
  aux.heads.weight(0)(0, 0) = 2.0;
  const Matrix x = Matrix::Ones(1, 1);
  CHECK(infer_loss(trunk, aux, x, 100.0) == 9604.0);
}

TEST_CASE("alpha = 0 reproduces the main-loss gradients exactly") {
  const Params base = init_params(MlpSpec({4, 6, 5, 2}), 4);
  AuxHeads aux = attach_aux_heads(base, {.k = 3});
  for (double& v : aux.heads.flat()) v *= 1.7;
  Rng rng = make_rng(4);
  const Matrix x = random_matrix(rng, 5, 4);
  const Matrix y = random_matrix(rng, 5, 2);
  InferConfig cfg{.k = 3, .alpha = 0.0};
  const CombinedLossGrad c = combined_loss_grad(mse_loss_fn(y), base, aux, x, cfg);
  const LossGrad plain = loss_and_grad(base, x, y);
  CHECK(c.base_grads == plain.grads);
  CHECK(c.total == plain.loss);
  CHECK(c.infer > 0.0);
}

TEST_CASE("combined loss gradient matches finite differences") {
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    Params base = init_params(MlpSpec({3, 8, 6, 2}), 10 + trial);
    InferConfig cfg{.k = 1 + trial % 4, .beta = trial % 2 ? 100.0 : 3.0, .alpha = 0.1, .head_seed = 7};
    AuxHeads aux = attach_aux_heads(base, cfg);
    for (double& v : base.flat()) v += 0.05 * standard_normal(rng);
    for (double& v : aux.heads.flat()) v += 0.05 * standard_normal(rng);
    const Matrix x = random_matrix(rng, 6, 3);
    const Matrix y = random_matrix(rng, 6, 2);
    const auto total = [&] { return combined_loss_grad(mse_loss_fn(y), base, aux, x, cfg).total; };
    const CombinedLossGrad c = combined_loss_grad(mse_loss_fn(y), base, aux, x, cfg);
    CAPTURE(trial);
    CHECK(relative_error(c.base_grads.flat(), finite_difference(base, total)) < 1e-5);
    CHECK(relative_error(c.head_grads.flat(), finite_difference(aux.heads, total)) < 1e-5);
  }
}

TEST_CASE("training never mutates the frozen initial parameters") {
  const Dataset data = synth_inputs(1, 40, 6, 4);
  Params learner = init_params(MlpSpec({6, 10, 10, 1}), 1);
  InferConfig cfg;
  AuxHeads aux = attach_aux_heads(learner, cfg);
  const FrozenInit before = *aux.init;
  const Matrix g0 = aux_outputs(aux.init->heads, features(aux.init->trunk, data.inputs));
  const Matrix y = eval_target(make_target(TargetKind::RandomNet, 3, 6), data);
  train_on_targets(learner, &aux, &cfg, data.inputs, y, 50, 8, {}, 1);
  CHECK(aux.init->trunk == before.trunk);
  CHECK(aux.init->heads == before.heads);
  CHECK(aux_outputs(aux.init->heads, features(aux.init->trunk, data.inputs)) == g0);
  CHECK_FALSE(aux.heads == before.heads);
}
