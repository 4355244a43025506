#include "plab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "plab/error.hpp"
#include "plab/rng.hpp"

namespace plab {

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path, std::size_t offset) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(path.string() + ": truncated header at offset " + std::to_string(offset));
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::vector<unsigned char> read_payload(std::istream& in, const std::filesystem::path& path, std::size_t bytes,
                                        std::size_t offset) {
  std::vector<unsigned char> buf(bytes);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes)))
    throw FormatError(path.string() + ": truncated payload (expected " + std::to_string(bytes) +
                      " bytes from offset " + std::to_string(offset) + ")");
  return buf;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels) {
  std::ifstream in(images, std::ios::binary);
  if (!in) throw IoError("cannot open " + images.string());
  const auto magic = read_be32(in, images, 0);
  if (magic != 2051)
    throw FormatError(images.string() + ": bad magic " + std::to_string(magic) + " at offset 0 (expected 2051)");
  const auto count = read_be32(in, images, 4);
  const auto rows = read_be32(in, images, 8);
  const auto cols = read_be32(in, images, 12);
  const std::size_t dim = std::size_t{rows} * cols;
  const auto pixels = read_payload(in, images, std::size_t{count} * dim, 16);

  Dataset data;
  data.source = DataSource::IdxFile;
  data.inputs.resize(count, static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      data.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pixels[i * dim + j] / 255.0;

  if (labels) {
    std::ifstream lin(*labels, std::ios::binary);
    if (!lin) throw IoError("cannot open " + labels->string());
    const auto lmagic = read_be32(lin, *labels, 0);
    if (lmagic != 2049)
      throw FormatError(labels->string() + ": bad magic " + std::to_string(lmagic) +
                        " at offset 0 (expected 2049)");
    const auto lcount = read_be32(lin, *labels, 4);
    if (lcount != count)
      throw FormatError("label count " + std::to_string(lcount) + " does not match image count " +
                        std::to_string(count));
    const auto raw = read_payload(lin, *labels, lcount, 8);
    std::vector<int> out(raw.begin(), raw.end());
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out[i] > 9)
        throw FormatError(labels->string() + ": label " + std::to_string(out[i]) + " out of range at offset " +
                          std::to_string(8 + i));
    data.labels = std::move(out);
  }
  return data;
}

Matrix synth_centers(std::uint64_t seed, int dim, int num_clusters) {
  Rng rng = make_rng(seed, 1);
  Matrix centers(num_clusters, dim);
  for (int c = 0; c < num_clusters; ++c)
    for (int j = 0; j < dim; ++j) centers(c, j) = 0.2 + 0.6 * uniform01(rng);
  return centers;
}

Dataset synth_inputs(std::uint64_t seed, int n, int dim, int num_clusters) {
  if (n < 1 || dim < 1 || num_clusters < 1) throw InputError("synth_inputs: n, dim and num_clusters must be >= 1");
  const Matrix centers = synth_centers(seed, dim, num_clusters);
  Rng rng = make_rng(seed, 2);
  Dataset data;
  data.source = DataSource::Synthetic;
  data.inputs.resize(n, dim);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(num_clusters)));
    labels[i] = c % 10;
    for (int j = 0; j < dim; ++j)
      data.inputs(i, j) = std::clamp(centers(c, j) + 0.05 * standard_normal(rng), 0.0, 1.0);
  }
  data.labels = std::move(labels);
  return data;
}

Dataset subsample(const Dataset& data, int n, std::uint64_t seed) {
  if (n < 1 || n > data.size()) throw InputError("subsample size out of range");
  std::vector<Eigen::Index> idx(data.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  Rng rng = make_rng(seed, 3);
  for (int i = 0; i < n; ++i)
    std::swap(idx[i], idx[i + uniform_index(rng, static_cast<std::uint64_t>(data.size() - i))]);
  idx.resize(n);
  Dataset out;
  out.source = data.source;
  out.inputs = gather_rows(data.inputs, idx);
  if (data.labels) {
    std::vector<int> l(n);
    for (int i = 0; i < n; ++i) l[i] = (*data.labels)[idx[i]];
    out.labels = std::move(l);
  }
  return out;
}

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::RandomNet: return "random";
    case TargetKind::Hash: return "hash";
    case TargetKind::Threshold: return "threshold";
  }
  return "?";
}

TargetKind parse_target_kind(const std::string& name) {
  if (name == "random") return TargetKind::RandomNet;
  if (name == "hash") return TargetKind::Hash;
  if (name == "threshold") return TargetKind::Threshold;
  throw ConfigError("unknown target kind '" + name + "' (expected random, hash or threshold)");
}

TargetFn make_target(TargetKind kind, std::uint64_t seed_or_index, int input_dim) {
  TargetFn t;
  t.kind = kind;
  t.seed = seed_or_index;
  switch (kind) {
    case TargetKind::RandomNet:
    case TargetKind::Hash: {
      if (input_dim < 1) throw InputError("target input dimension must be >= 1");
      const MlpSpec spec({input_dim, kTargetHiddenWidth, kTargetHiddenWidth, 1});
      t.generator = std::make_shared<const Params>(init_params(spec, seed_or_index));
      t.scale = kind == TargetKind::RandomNet ? kRandomNetScale : kHashScale;
      break;
    }
    case TargetKind::Threshold:
      t.threshold_index = static_cast<int>(seed_or_index);
      t.scale = 1.0;
      break;
  }
  return t;
}

Matrix eval_target(const TargetFn& t, const Matrix& inputs) {
  switch (t.kind) {
    case TargetKind::RandomNet:
    case TargetKind::Hash: {
      if (!t.generator) throw InputError("target has no generator network");
      if (inputs.cols() != t.generator->spec().input_width())
        throw InputError("target input dimension mismatch: got " + std::to_string(inputs.cols()) + ", expected " +
                         std::to_string(t.generator->spec().input_width()));
      Matrix out = forward(*t.generator, inputs).outputs;
      if (t.kind == TargetKind::RandomNet) return t.scale * out;
      return (t.scale * out.array()).sin().matrix();
    }
    case TargetKind::Threshold:
      throw InputError("threshold targets need labelled inputs (missing labels)");
  }
  return {};
}

Matrix eval_target(const TargetFn& t, const Dataset& data) {
  if (t.kind != TargetKind::Threshold) return eval_target(t, data.inputs);
  if (!data.labels) throw InputError("threshold targets need labelled inputs (missing labels)");
  Matrix out(data.size(), 1);
  for (Eigen::Index i = 0; i < data.size(); ++i) out(i, 0) = (*data.labels)[i] < t.threshold_index ? 1.0 : 0.0;
  return out;
}

int default_steps_per_iter(TargetKind kind) { return kind == TargetKind::Hash ? 5000 : 3000; }

TargetFn sequence_target(const SequenceConfig& cfg, int iteration, int input_dim) {
  const int i = cfg.fixed_target ? 0 : iteration;
  if (cfg.task == TargetKind::Threshold) return make_target(cfg.task, static_cast<std::uint64_t>(i), input_dim);
  return make_target(cfg.task, derive_seed(cfg.task_seed, static_cast<std::uint64_t>(i)), input_dim);
}

double train_on_targets(Params& learner, AuxHeads* aux, const InferConfig* infer, const Matrix& inputs,
                        const Matrix& targets, int steps, int batch_size, const OptimizerConfig& optimizer,
                        std::uint64_t batch_seed) {
  if ((aux == nullptr) != (infer == nullptr)) throw InputError("InFeR heads and config must be given together");
  if (inputs.rows() != targets.rows()) throw InputError("inputs and targets differ in row count");
  if (aux == nullptr) return fit_regression(learner, inputs, targets, steps, batch_size, optimizer, batch_seed);

  Optimizer opt(optimizer);
  EpochSampler sampler(inputs.rows(), batch_seed);
  for (int s = 0; s < steps; ++s) {
    const auto idx = sampler.next(batch_size);
    const Matrix x = gather_rows(inputs, idx);
    CombinedLossGrad lg = combined_loss_grad(mse_loss_fn(gather_rows(targets, idx)), learner, *aux, x, *infer);
    Params* p[] = {&learner, &aux->heads};
    const Params* g[] = {&lg.base_grads, &lg.head_grads};
    opt.step(p, g);
  }
  return mse(forward(learner, inputs).outputs, targets);
}

SequenceResult run_sequence(const SequenceConfig& cfg, const Dataset& data) {
  if (cfg.learner.input_width() != data.dim())
    throw InputError("learner input width " + std::to_string(cfg.learner.input_width()) +
                     " does not match dataset dimension " + std::to_string(data.dim()));
  if (cfg.learner.output_width() != 1) throw InputError("sequence learner must have a scalar output");
  if (cfg.num_iterations < 1 || cfg.steps_per_iter < 0 || cfg.batch_size < 1)
    throw InputError("invalid sequence protocol sizes");

  SequenceResult result;
  Params learner = init_params(cfg.learner, cfg.learner_seed);
  std::optional<AuxHeads> aux;
  if (cfg.infer) aux = attach_aux_heads(learner, *cfg.infer);

  for (int it = 0; it < cfg.num_iterations; ++it) {
    const TargetFn target = sequence_target(cfg, it, static_cast<int>(data.dim()));
    const Matrix y = eval_target(target, data);
    IterationRecord rec;
    rec.iteration = it;
    rec.steps = cfg.steps_per_iter;
    rec.final_mse = train_on_targets(learner, aux ? &*aux : nullptr, cfg.infer ? &*cfg.infer : nullptr, data.inputs,
                                     y, cfg.steps_per_iter, cfg.batch_size, cfg.optimizer,
                                     derive_seed(cfg.batch_seed, static_cast<std::uint64_t>(it)));
    const RankReport rank =
        rank_report(build_feature_matrix(learner, data.inputs), cfg.rank_epsilon, cfg.srank_delta);
    rec.effective_dim = rank.effective_dim;
    rec.srank = rank.srank;
    result.records.push_back(rec);
  }
  result.final_params = std::move(learner);
  return result;
}

std::vector<std::string> sequence_csv_header() { return {"iteration", "final_mse", "effective_dim", "srank", "steps"}; }

std::vector<double> sequence_csv_row(const IterationRecord& r) {
  return {static_cast<double>(r.iteration), r.final_mse, static_cast<double>(r.effective_dim),
          static_cast<double>(r.srank), static_cast<double>(r.steps)};
}

}  // namespace plab
