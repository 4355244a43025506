#pragma once

// Capacity measures: feature rank (effective dimension), srank and
// target-fitting capacity.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "plab/nn.hpp"

namespace plab {

inline constexpr double kDefaultRankEpsilon = 0.01;
inline constexpr double kDefaultSrankDelta = 0.01;

// n x d matrix of feature rows, one per sampled input.
class FeatureMatrix {
 public:
  explicit FeatureMatrix(Matrix data);

  const Matrix& data() const { return data_; }
  Eigen::Index n() const { return data_.rows(); }
  Eigen::Index d() const { return data_.cols(); }

 private:
  Matrix data_;
};

FeatureMatrix build_feature_matrix(const Params& params, const Matrix& inputs);

// Singular values of Phi / sqrt(n), descending.
Vector scaled_singular_values(const FeatureMatrix& fm);

// Number of singular values of Phi / sqrt(n) strictly greater than epsilon.
int effective_dim(const FeatureMatrix& fm, double epsilon = kDefaultRankEpsilon);
int count_above(const Vector& singular_values, double epsilon);

// Smallest k whose leading singular values hold a (1 - delta) share of the
// total singular-value mass. Throws NumericalError when every value is zero.
int srank(const FeatureMatrix& fm, double delta = kDefaultSrankDelta);
int srank_of(const Vector& singular_values, double delta);

struct RankReport {
  Eigen::Index n = 0;
  Eigen::Index d = 0;
  Vector singular_values;  // of Phi / sqrt(n)
  int effective_dim = 0;
  int srank = 0;  // 0 when the feature matrix is identically zero
  double epsilon = kDefaultRankEpsilon;
  double delta = kDefaultSrankDelta;
};

RankReport rank_report(const FeatureMatrix& fm, double epsilon = kDefaultRankEpsilon,
                       double delta = kDefaultSrankDelta);

// CSV: n,d,epsilon,effective_dim,srank,sv1..sv16 (zero padded).
std::vector<std::string> rank_csv_header();
std::vector<double> rank_csv_row(const RankReport& report);

// A target function maps an n x input_width batch to n x output_width values.
using TargetFunction = std::function<Matrix(const Matrix&)>;
// Builds an independent target function from a seed.
using TargetSampler = std::function<TargetFunction(std::uint64_t)>;

struct TargetFittingSpec {
  Params initial;  // architecture + starting parameters
  OptimizerConfig optimizer;
  Matrix inputs;  // empirical input distribution; also the evaluation set
  TargetSampler target_sampler;
  int budget_steps = 2000;
  int batch_size = 32;
  int num_target_seeds = 10;
  std::uint64_t target_seed = 0;  // target i is drawn with derive_seed(target_seed, i)
  std::uint64_t batch_seed = 0;
};

struct CapacityResult {
  double mean_mse = 0.0;
  std::vector<double> per_seed_mse;
};

CapacityResult target_fitting_capacity(const TargetFittingSpec& spec);

// Deterministic mini-batch index stream: reshuffles the n rows every epoch.
class EpochSampler {
 public:
  EpochSampler(Eigen::Index n, std::uint64_t seed);
  std::vector<Eigen::Index> next(int batch_size);

 private:
  std::vector<Eigen::Index> order_;
  std::size_t cursor_;
  std::uint64_t state_;
};

Matrix gather_rows(const Matrix& m, const std::vector<Eigen::Index>& rows);

// Trains `params` on (inputs, targets) for `steps` mini-batch MSE steps with
// a fresh optimizer. Returns the MSE over all rows afterwards.
double fit_regression(Params& params, const Matrix& inputs, const Matrix& targets, int steps, int batch_size,
                      const OptimizerConfig& optimizer, std::uint64_t batch_seed);

}  // namespace plab
