#include "plab/infer.hpp"

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab {

void InferConfig::validate() const {
  if (k < 1) throw ConfigError("infer.k must be >= 1");
  if (!(beta >= 0.0)) throw ConfigError("infer.beta must be non-negative");
  if (!(alpha >= 0.0)) throw ConfigError("infer.alpha must be non-negative");
}

AuxHeads attach_aux_heads(const Params& base, const InferConfig& cfg) {
  cfg.validate();
  if (base.spec().num_layers() < 2)
    throw InputError("auxiliary heads need a network with at least one hidden layer");
  const MlpSpec head_spec({base.spec().feature_width(), cfg.k});
  AuxHeads aux;
  aux.heads = init_params(head_spec, derive_seed(cfg.head_seed, 0x1f5e));
  aux.init = std::make_shared<const FrozenInit>(FrozenInit{snapshot_params(base), snapshot_params(aux.heads)});
  return aux;
}

Matrix aux_outputs(const Params& heads, const Matrix& features) { return forward(heads, features).outputs; }

InferTerm infer_term(const AuxHeads& aux, const Matrix& batch, const Matrix& live_features, double beta) {
  if (!aux.init) throw InputError("auxiliary heads have no frozen initial parameters");
  if (aux.init->heads.spec() != aux.heads.spec()) throw InputError("frozen heads do not match live heads");
  const Matrix g = aux_outputs(aux.heads, live_features);
  const Matrix g0 = aux_outputs(aux.init->heads, features(aux.init->trunk, batch));
  const Matrix diff = g - beta * g0;
  const double n = static_cast<double>(batch.rows());

  InferTerm term;
  term.loss = diff.squaredNorm() / n;
  const Matrix d_g = (2.0 / n) * diff;
  term.head_grads = Params(aux.heads.spec(), aux.heads.seed());
  term.head_grads.weight(0).noalias() = live_features.transpose() * d_g;
  term.head_grads.bias(0) = d_g.colwise().sum().transpose();
  term.d_features = d_g * aux.heads.weight(0).transpose();
  return term;
}

double infer_loss(const Params& base, const AuxHeads& aux, const Matrix& batch, double beta) {
  if (aux.init && aux.init->trunk.spec() != base.spec()) throw InputError("frozen trunk does not match base network");
  return infer_term(aux, batch, features(base, batch), beta).loss;
}

CombinedLossGrad combined_loss_grad(const MainLossFn& main_loss, const Params& base, const AuxHeads& aux,
                                    const Matrix& batch, const InferConfig& cfg) {
  cfg.validate();
  const ForwardCache cache = forward_cached(base, batch);
  auto [main_value, d_out] = main_loss(cache.outputs());
  InferTerm term = infer_term(aux, batch, cache.features(), cfg.beta);

  CombinedLossGrad out;
  out.main = main_value;
  out.infer = term.loss;
  out.total = main_value + cfg.alpha * term.loss;
  if (cfg.alpha == 0.0) {
    out.base_grads = backward(base, cache, d_out);
    out.head_grads = Params(aux.heads.spec(), aux.heads.seed());
    return out;
  }
  const Matrix d_feat = cfg.alpha * term.d_features;
  out.base_grads = backward(base, cache, d_out, &d_feat);
  for (double& v : term.head_grads.flat()) v *= cfg.alpha;
  out.head_grads = std::move(term.head_grads);
  return out;
}

MainLossFn mse_loss_fn(const Matrix& targets) {
  return [targets](const Matrix& outputs) {
    if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols())
      throw InputError("targets must be n x output_width");
    const Matrix diff = outputs - targets;
    const double count = static_cast<double>(diff.size());
    return std::pair<double, Matrix>{diff.squaredNorm() / count, (2.0 / count) * diff};
  };
}

}  // namespace plab
