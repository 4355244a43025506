#pragma once

// Feedforward ReLU networks with a flat, canonically ordered parameter store.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace plab {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Layer widths, input first and output last. ReLU on every hidden layer,
// identity on the output. The penultimate width is the feature dimension;
// a depth-1 network uses its raw input as features.
class MlpSpec {
 public:
  MlpSpec() = default;
  explicit MlpSpec(std::vector<int> widths);

  const std::vector<int>& widths() const { return widths_; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  int feature_width() const { return widths_[widths_.size() - 2]; }
  int num_layers() const { return static_cast<int>(widths_.size()) - 1; }
  std::size_t num_params() const { return offsets_.back(); }

  // Offsets into the flat store: layer-major, weights (row-major fan_in x
  // fan_out) before biases.
  std::size_t weight_offset(int layer) const { return offsets_[2 * layer]; }
  std::size_t bias_offset(int layer) const { return offsets_[2 * layer + 1]; }

  friend bool operator==(const MlpSpec& a, const MlpSpec& b) { return a.widths_ == b.widths_; }

 private:
  std::vector<int> widths_;
  std::vector<std::size_t> offsets_{0};
};

class Params {
 public:
  Params() = default;
  // Zero-filled parameters for `spec`.
  explicit Params(MlpSpec spec, std::uint64_t seed = 0);

  const MlpSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  Eigen::Map<RowMatrix> weight(int layer);
  Eigen::Map<const RowMatrix> weight(int layer) const;
  Eigen::Map<Vector> bias(int layer);
  Eigen::Map<const Vector> bias(int layer) const;

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::size_t size() const { return data_.size(); }

  void set_zero();

  // Element-wise (bitwise for finite values) equality, including spec and seed.
  friend bool operator==(const Params& a, const Params& b) {
    return a.spec_ == b.spec_ && a.seed_ == b.seed_ && a.data_ == b.data_;
  }

 private:
  MlpSpec spec_;
  std::vector<double> data_;
  std::uint64_t seed_ = 0;
};

// Truncated-normal weights (|z| <= 2 sigma, sigma = 1/sqrt(fan_in)), zero biases.
Params init_params(const MlpSpec& spec, std::uint64_t seed);

// Deep copy; the returned value shares no storage with `params`.
inline Params snapshot_params(const Params& params) { return params; }

struct ForwardResult {
  Matrix outputs;   // n x output_width
  Matrix features;  // n x feature_width
};

// Activations of every layer, kept for the backward pass.
// acts[0] is the input batch, acts[num_layers] the outputs.
struct ForwardCache {
  std::vector<Matrix> acts;

  const Matrix& outputs() const { return acts.back(); }
  const Matrix& features() const { return acts[acts.size() - 2]; }
};

ForwardCache forward_cached(const Params& params, const Matrix& batch);
ForwardResult forward(const Params& params, const Matrix& batch);
// Features only; skips the output layer.
Matrix features(const Params& params, const Matrix& batch);

// Reverse-mode gradient given dL/d(outputs) and, optionally, an extra
// dL/d(features) contribution from heads that read the features.
Params backward(const Params& params, const ForwardCache& cache, const Matrix& d_outputs,
                const Matrix* d_features = nullptr);

struct LossGrad {
  double loss = 0.0;
  Params grads;
};

// Mean squared error over batch rows and output columns.
LossGrad loss_and_grad(const Params& params, const Matrix& batch, const Matrix& targets);
double mse(const Matrix& predictions, const Matrix& targets);

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {});

  // One update over a set of parameter blocks. Moment buffers are allocated
  // on the first call and must keep matching shapes afterwards.
  void step(std::span<Params* const> params, std::span<const Params* const> grads);
  void step(Params& params, const Params& grads);

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_count_; }
  void reset();

 private:
  OptimizerConfig cfg_;
  std::int64_t step_count_ = 0;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
};

// Binary checkpoint: "PLAB1", u32 layer count + 1, u32 widths, u64 seed,
// then the flat parameters as little-endian f64.
void write_params(std::ostream& out, const Params& params);
Params read_params(std::istream& in);
// A params file holds one or more consecutive records.
void save_params(const std::filesystem::path& path, std::span<const Params> records);
std::vector<Params> load_params(const std::filesystem::path& path);

}  // namespace plab
