#include "plab/nn.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "plab/binio.hpp"
#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab {

double standard_normal(Rng& rng) {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

MlpSpec::MlpSpec(std::vector<int> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw InputError("MlpSpec needs at least an input and an output width");
  for (int w : widths_)
    if (w < 1) throw InputError("MlpSpec widths must be >= 1");
  offsets_.reserve(2 * widths_.size());
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const std::size_t fan_in = widths_[l];
    const std::size_t fan_out = widths_[l + 1];
    offsets_.push_back(offsets_.back() + fan_in * fan_out);
    offsets_.push_back(offsets_.back() + fan_out);
  }
}

Params::Params(MlpSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), data_(spec_.num_params(), 0.0), seed_(seed) {}

Eigen::Map<RowMatrix> Params::weight(int layer) {
  return {data_.data() + spec_.weight_offset(layer), spec_.widths()[layer], spec_.widths()[layer + 1]};
}
Eigen::Map<const RowMatrix> Params::weight(int layer) const {
  return {data_.data() + spec_.weight_offset(layer), spec_.widths()[layer], spec_.widths()[layer + 1]};
}
Eigen::Map<Vector> Params::bias(int layer) {
  return {data_.data() + spec_.bias_offset(layer), spec_.widths()[layer + 1]};
}
Eigen::Map<const Vector> Params::bias(int layer) const {
  return {data_.data() + spec_.bias_offset(layer), spec_.widths()[layer + 1]};
}

void Params::set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

Params init_params(const MlpSpec& spec, std::uint64_t seed) {
  Params p(spec, seed);
  for (int l = 0; l < spec.num_layers(); ++l) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(l));
    const double sigma = 1.0 / std::sqrt(static_cast<double>(spec.widths()[l]));
    auto w = p.weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        double z;
        do {
          z = standard_normal(rng);
        } while (std::abs(z) > 2.0);
        w(i, j) = sigma * z;
      }
  }
  return p;
}

namespace {

void check_batch(const Params& params, const Matrix& batch) {
  if (batch.cols() != params.spec().input_width())
    throw InputError("batch width " + std::to_string(batch.cols()) + " does not match input width " +
                     std::to_string(params.spec().input_width()));
}

Matrix affine(const Matrix& in, const Params& params, int layer) {
  Matrix z = in * params.weight(layer);
  z.rowwise() += params.bias(layer).transpose();
  return z;
}

}  // namespace

ForwardCache forward_cached(const Params& params, const Matrix& batch) {
  check_batch(params, batch);
  const int depth = params.spec().num_layers();
  ForwardCache cache;
  cache.acts.reserve(depth + 1);
  cache.acts.push_back(batch);
  for (int l = 0; l < depth; ++l) {
    Matrix z = affine(cache.acts.back(), params, l);
    if (l + 1 < depth) z = z.cwiseMax(0.0);
    cache.acts.push_back(std::move(z));
  }
  return cache;
}

ForwardResult forward(const Params& params, const Matrix& batch) {
  ForwardCache cache = forward_cached(params, batch);
  ForwardResult out;
  out.outputs = std::move(cache.acts.back());
  out.features = std::move(cache.acts[cache.acts.size() - 2]);
  return out;
}

Matrix features(const Params& params, const Matrix& batch) {
  check_batch(params, batch);
  const int depth = params.spec().num_layers();
  Matrix h = batch;
  for (int l = 0; l + 1 < depth; ++l) h = affine(h, params, l).cwiseMax(0.0);
  return h;
}

Params backward(const Params& params, const ForwardCache& cache, const Matrix& d_outputs,
                const Matrix* d_features) {
  const MlpSpec& spec = params.spec();
  const int depth = spec.num_layers();
  const Matrix& out = cache.outputs();
  if (d_outputs.rows() != out.rows() || d_outputs.cols() != out.cols())
    throw InputError("d_outputs shape does not match network outputs");
  if (d_features != nullptr &&
      (d_features->rows() != out.rows() || d_features->cols() != spec.feature_width()))
    throw InputError("d_features shape does not match network features");

  Params grads(spec, params.seed());
  Matrix delta = d_outputs;  // dL/dz of the current layer
  for (int l = depth - 1; l >= 0; --l) {
    const Matrix& in = cache.acts[l];
    grads.weight(l).noalias() = in.transpose() * delta;
    grads.bias(l) = delta.colwise().sum().transpose();
    if (l == 0) break;
    Matrix d_in = delta * params.weight(l).transpose();
    if (l == depth - 1 && d_features != nullptr) d_in += *d_features;
    // ReLU subgradient at 0 is 0: the post-activation is positive iff the
    // pre-activation is.
    delta = (in.array() > 0.0).select(d_in.array(), 0.0).matrix();
  }
  return grads;
}

double mse(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols())
    throw InputError("prediction/target shape mismatch");
  return (predictions - targets).squaredNorm() / static_cast<double>(predictions.size());
}

LossGrad loss_and_grad(const Params& params, const Matrix& batch, const Matrix& targets) {
  ForwardCache cache = forward_cached(params, batch);
  const Matrix& pred = cache.outputs();
  if (targets.rows() != pred.rows() || targets.cols() != pred.cols())
    throw InputError("targets must be n x output_width");
  const Matrix diff = pred - targets;
  const double count = static_cast<double>(diff.size());
  LossGrad out;
  out.loss = diff.squaredNorm() / count;
  out.grads = backward(params, cache, (2.0 / count) * diff);
  return out;
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) throw InputError("learning rate must be positive");
  if (!(cfg_.beta1 > 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 > 0.0 && cfg_.beta2 < 1.0 && cfg_.eps > 0.0))
    throw InputError("Adam betas must lie in (0,1) and eps must be positive");
}

void Optimizer::reset() {
  step_count_ = 0;
  first_moment_.clear();
  second_moment_.clear();
}

void Optimizer::step(Params& params, const Params& grads) {
  Params* p[] = {&params};
  const Params* g[] = {&grads};
  step(p, g);
}

void Optimizer::step(std::span<Params* const> params, std::span<const Params* const> grads) {
  if (params.size() != grads.size()) throw InputError("optimizer: params/grads block count mismatch");
  for (std::size_t b = 0; b < params.size(); ++b)
    if (params[b]->size() != grads[b]->size()) throw InputError("optimizer: params/grads shape mismatch");

  if (cfg_.kind == OptimizerKind::Sgd) {
    for (std::size_t b = 0; b < params.size(); ++b) {
      auto p = params[b]->flat();
      auto g = grads[b]->flat();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg_.learning_rate * g[i];
    }
    ++step_count_;
    return;
  }

  if (first_moment_.empty()) {
    for (std::size_t b = 0; b < params.size(); ++b) {
      first_moment_.emplace_back(params[b]->size(), 0.0);
      second_moment_.emplace_back(params[b]->size(), 0.0);
    }
  }
  if (first_moment_.size() != params.size()) throw InputError("optimizer: block count changed between steps");
  for (std::size_t b = 0; b < params.size(); ++b)
    if (first_moment_[b].size() != params[b]->size())
      throw InputError("optimizer: accumulator shape does not match params");

  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b]->flat();
    auto g = grads[b]->flat();
    auto& m = first_moment_[b];
    auto& v = second_moment_[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

namespace {
constexpr char kMagic[5] = {'P', 'L', 'A', 'B', '1'};
}

void write_params(std::ostream& out, const Params& params) {
  out.write(kMagic, sizeof(kMagic));
  const auto& widths = params.spec().widths();
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(widths.size()));
  for (int w : widths) binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  binio::put_le<std::uint64_t>(out, params.seed());
  for (double v : params.flat()) binio::put_f64(out, v);
}

Params read_params(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic))) throw FormatError("truncated params header");
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kMagic)))
    throw FormatError("bad params magic (expected PLAB1)");
  const auto count = binio::get_le<std::uint32_t>(in, "width count");
  if (count < 2 || count > 4096) throw FormatError("implausible width count " + std::to_string(count));
  std::vector<int> widths(count);
  for (auto& w : widths) {
    const auto v = binio::get_le<std::uint32_t>(in, "width");
    if (v == 0 || v > (1u << 24)) throw FormatError("implausible layer width " + std::to_string(v));
    w = static_cast<int>(v);
  }
  const auto seed = binio::get_le<std::uint64_t>(in, "seed");
  Params p(MlpSpec(std::move(widths)), seed);
  for (double& v : p.flat()) v = binio::get_f64(in, "parameters");
  return p;
}

void save_params(const std::filesystem::path& path, std::span<const Params> records) {
  binio::atomic_write(path, [&](std::ostream& out) {
    for (const Params& p : records) write_params(out, p);
  });
}

std::vector<Params> load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Params> out;
  while (in.peek() != std::char_traits<char>::eof()) out.push_back(read_params(in));
  if (out.empty()) throw FormatError("empty params file " + path.string());
  return out;
}

}  // namespace plab
