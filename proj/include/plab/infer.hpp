#pragma once

// Initial-feature regularization: k linear heads on the penultimate
// features, regressed toward beta times their outputs under the frozen
// initial parameters.

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>

#include "plab/nn.hpp"

namespace plab {

struct InferConfig {
  int k = 10;
  double beta = 100.0;
  double alpha = 0.1;
  std::uint64_t head_seed = 0;

  void validate() const;
};

// Parameters at attachment time. Never mutated after creation.
struct FrozenInit {
  Params trunk;
  Params heads;
};

struct AuxHeads {
  Params heads;  // linear map [d, k]
  std::shared_ptr<const FrozenInit> init;
};

// Base parameters are left untouched; heads come from their own RNG stream.
AuxHeads attach_aux_heads(const Params& base, const InferConfig& cfg);

// Head outputs g(x) for precomputed features (n x d -> n x k).
Matrix aux_outputs(const Params& heads, const Matrix& features);

// Mean over the batch of sum_i (g_i(x; theta) - beta * g_i(x; theta0))^2.
double infer_loss(const Params& base, const AuxHeads& aux, const Matrix& batch, double beta);

// Loss value plus gradients w.r.t. the live features and head parameters,
// for callers that already ran the trunk forward pass.
struct InferTerm {
  double loss = 0.0;
  Matrix d_features;
  Params head_grads;
};
InferTerm infer_term(const AuxHeads& aux, const Matrix& batch, const Matrix& live_features, double beta);

// Main objective on the network outputs: returns (loss, dLoss/dOutputs).
using MainLossFn = std::function<std::pair<double, Matrix>(const Matrix& outputs)>;

struct CombinedLossGrad {
  double total = 0.0;
  double main = 0.0;
  double infer = 0.0;
  Params base_grads;
  Params head_grads;
};

// total = main + alpha * infer. With alpha == 0 the base gradients are
// exactly the main-loss gradients.
CombinedLossGrad combined_loss_grad(const MainLossFn& main_loss, const Params& base, const AuxHeads& aux,
                                    const Matrix& batch, const InferConfig& cfg);

MainLossFn mse_loss_fn(const Matrix& targets);

}  // namespace plab
