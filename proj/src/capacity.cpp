#include "plab/capacity.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "plab/error.hpp"
#include "plab/linalg.hpp"
#include "plab/rng.hpp"

namespace plab {

FeatureMatrix::FeatureMatrix(Matrix data) : data_(std::move(data)) {
  if (data_.rows() < 1 || data_.cols() < 1) throw InputError("feature matrix must be at least 1x1");
  if (!data_.allFinite()) throw InputError("feature matrix has non-finite entries");
}

FeatureMatrix build_feature_matrix(const Params& params, const Matrix& inputs) {
  return FeatureMatrix(features(params, inputs));
}

Vector scaled_singular_values(const FeatureMatrix& fm) {
  return singular_values(fm.data()) / std::sqrt(static_cast<double>(fm.n()));
}

int count_above(const Vector& singular_values, double epsilon) {
  if (!(epsilon >= 0.0)) throw InputError("epsilon must be non-negative");
  int count = 0;
  for (Eigen::Index i = 0; i < singular_values.size(); ++i)
    if (singular_values(i) > epsilon) ++count;
  return count;
}

int effective_dim(const FeatureMatrix& fm, double epsilon) {
  return count_above(scaled_singular_values(fm), epsilon);
}

int srank_of(const Vector& sv, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw InputError("srank delta must lie in (0,1)");
  const double total = sv.sum();
  if (!(total > 0.0)) throw NumericalError("srank undefined for an all-zero feature matrix");
  double running = 0.0;
  for (Eigen::Index k = 0; k < sv.size(); ++k) {
    running += sv(k);
    if (running >= (1.0 - delta) * total) return static_cast<int>(k + 1);
  }
  return static_cast<int>(sv.size());
}

int srank(const FeatureMatrix& fm, double delta) { return srank_of(singular_values(fm.data()), delta); }

RankReport rank_report(const FeatureMatrix& fm, double epsilon, double delta) {
  RankReport r;
  r.n = fm.n();
  r.d = fm.d();
  r.epsilon = epsilon;
  r.delta = delta;
  r.singular_values = scaled_singular_values(fm);
  r.effective_dim = count_above(r.singular_values, epsilon);
  r.srank = r.singular_values.sum() > 0.0 ? srank_of(r.singular_values, delta) : 0;
  return r;
}

std::vector<std::string> rank_csv_header() {
  std::vector<std::string> h = {"n", "d", "epsilon", "effective_dim", "srank"};
  for (int i = 1; i <= 16; ++i) h.push_back("sv" + std::to_string(i));
  return h;
}

std::vector<double> rank_csv_row(const RankReport& r) {
  std::vector<double> row = {static_cast<double>(r.n), static_cast<double>(r.d), r.epsilon,
                             static_cast<double>(r.effective_dim), static_cast<double>(r.srank)};
  for (Eigen::Index i = 0; i < 16; ++i) row.push_back(i < r.singular_values.size() ? r.singular_values(i) : 0.0);
  return row;
}

EpochSampler::EpochSampler(Eigen::Index n, std::uint64_t seed) : order_(n), cursor_(n), state_(seed) {
  if (n < 1) throw InputError("cannot sample batches from an empty set");
  std::iota(order_.begin(), order_.end(), Eigen::Index{0});
}

std::vector<Eigen::Index> EpochSampler::next(int batch_size) {
  if (batch_size < 1) throw InputError("batch size must be >= 1");
  std::vector<Eigen::Index> out;
  out.reserve(batch_size);
  while (static_cast<int>(out.size()) < batch_size) {
    if (cursor_ == order_.size()) {
      Rng rng = make_rng(state_++);
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng, i)]);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

double fit_regression(Params& params, const Matrix& inputs, const Matrix& targets, int steps, int batch_size,
                      const OptimizerConfig& optimizer, std::uint64_t batch_seed) {
  if (inputs.rows() != targets.rows()) throw InputError("inputs and targets differ in row count");
  if (steps < 0) throw InputError("step budget must be non-negative");
  Optimizer opt(optimizer);
  EpochSampler sampler(inputs.rows(), batch_seed);
  for (int s = 0; s < steps; ++s) {
    const auto idx = sampler.next(batch_size);
    LossGrad lg = loss_and_grad(params, gather_rows(inputs, idx), gather_rows(targets, idx));
    opt.step(params, lg.grads);
  }
  return mse(forward(params, inputs).outputs, targets);
}

CapacityResult target_fitting_capacity(const TargetFittingSpec& spec) {
  if (spec.budget_steps < 0) throw InputError("budget_steps must be non-negative");
  if (spec.num_target_seeds < 1) throw InputError("num_target_seeds must be >= 1");
  if (spec.batch_size < 1) throw InputError("batch_size must be >= 1");
  if (!spec.target_sampler) throw InputError("target sampler is required");
  CapacityResult result;
  for (int i = 0; i < spec.num_target_seeds; ++i) {
    const TargetFunction target = spec.target_sampler(derive_seed(spec.target_seed, static_cast<std::uint64_t>(i)));
    const Matrix y = target(spec.inputs);
    Params net = snapshot_params(spec.initial);
    result.per_seed_mse.push_back(fit_regression(net, spec.inputs, y, spec.budget_steps, spec.batch_size,
                                                 spec.optimizer, derive_seed(spec.batch_seed, i)));
  }
  result.mean_mse = std::accumulate(result.per_seed_mse.begin(), result.per_seed_mse.end(), 0.0) /
                    static_cast<double>(result.per_seed_mse.size());
  return result;
}

}  // namespace plab
