#include "plab/td.hpp"

#include <cmath>

#include "plab/capacity.hpp"
#include "plab/error.hpp"
#include "plab/linalg.hpp"
#include "plab/rng.hpp"

namespace plab {

void Mrp::validate() const {
  if (P.rows() == 0 || P.rows() != P.cols()) throw InputError("MRP transition matrix must be square and non-empty");
  if (R.size() != P.rows()) throw InputError("MRP reward vector length does not match the state count");
  if (!P.allFinite() || !R.allFinite()) throw InputError("MRP has non-finite entries");
  if ((P.array() < 0.0).any()) throw InputError("MRP transition matrix has negative entries");
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    if (std::abs(P.row(i).sum() - 1.0) > 1e-12)
      throw InputError("MRP transition row " + std::to_string(i) + " does not sum to 1");
  if (!(gamma > 0.0 && gamma < 1.0)) throw InputError("MRP gamma must lie in (0,1)");
}

Mrp random_mrp(int num_states, double gamma, std::uint64_t seed) {
  if (num_states < 1) throw InputError("MRP needs at least one state");
  Rng rng = make_rng(seed, 0);
  Mrp m;
  m.gamma = gamma;
  m.P.resize(num_states, num_states);
  for (int i = 0; i < num_states; ++i) {
    // Dirichlet(1,...,1): normalized unit exponentials.
    double sum = 0.0;
    for (int j = 0; j < num_states; ++j) {
      m.P(i, j) = -std::log(1.0 - uniform01(rng));
      sum += m.P(i, j);
    }
    m.P.row(i) /= sum;
  }
  Rng reward_rng = make_rng(seed, 1);
  m.R.resize(num_states);
  for (int i = 0; i < num_states; ++i) m.R(i) = standard_normal(reward_rng);
  m.validate();
  return m;
}

FlowState init_flow(const Matrix& phi0, int num_heads, double alpha, double beta, double sigma_sq,
                    std::uint64_t seed) {
  if (num_heads < 1) throw InputError("ensemble flow needs at least one head");
  if (!phi0.allFinite()) throw InputError("initial features have non-finite entries");
  if (!(sigma_sq >= 0.0)) throw InputError("head variance must be non-negative");
  FlowState s;
  s.phi = phi0;
  s.alpha = alpha;
  s.beta = beta;
  s.sigma_sq = sigma_sq;
  s.w.resize(phi0.cols(), num_heads);
  Rng rng = make_rng(seed, 0);
  const double sd = std::sqrt(sigma_sq);
  for (Eigen::Index m = 0; m < num_heads; ++m)
    for (Eigen::Index j = 0; j < phi0.cols(); ++j) s.w(j, m) = sd * standard_normal(rng);
  return s;
}

std::pair<Matrix, Matrix> flow_derivative(const Mrp& mrp, const FlowState& s, bool fixed_weights) {
  // Column m of the TD error matrix: R + gamma P Phi w_m - Phi w_m.
  const Matrix phi_w = s.phi * s.w;
  Matrix err = mrp.gamma * (mrp.P * phi_w) - phi_w;
  err.colwise() += mrp.R;
  Matrix d_phi = s.alpha * (err * s.w.transpose());
  Matrix d_w = fixed_weights ? Matrix::Zero(s.w.rows(), s.w.cols()) : Matrix(s.beta * (s.phi.transpose() * err));
  return {std::move(d_phi), std::move(d_w)};
}

namespace {

void check_bounded(const FlowState& s) {
  const auto bad = [](const Matrix& m) { return !m.allFinite() || (m.size() > 0 && m.cwiseAbs().maxCoeff() > 1e12); };
  if (bad(s.phi) || bad(s.w)) throw NumericalError("ensemble flow diverged at t=" + std::to_string(s.t));
}

}  // namespace

std::vector<FlowState> simulate_ensemble_flow(const Mrp& mrp, const FlowState& initial, const FlowOptions& opt) {
  mrp.validate();
  if (!(opt.dt > 0.0)) throw InputError("dt must be positive");
  if (!(opt.t_end >= opt.dt)) throw InputError("t_end must be at least dt");
  if (initial.phi.rows() != mrp.P.rows()) throw InputError("feature rows do not match the MRP state count");
  if (initial.w.rows() != initial.phi.cols()) throw InputError("head dimension does not match the feature width");
  if (opt.snapshot_stride < 0) throw InputError("snapshot stride must be non-negative");

  const auto steps = static_cast<std::int64_t>(std::llround(opt.t_end / opt.dt));
  const double h = opt.t_end / static_cast<double>(steps);
  std::vector<FlowState> out{initial};
  FlowState s = initial;
  const double t0 = initial.t;
  FlowState tmp = s;
  for (std::int64_t k = 1; k <= steps; ++k) {
    const auto [k1p, k1w] = flow_derivative(mrp, s, opt.fixed_weights);
    tmp.phi = s.phi + 0.5 * h * k1p;
    tmp.w = s.w + 0.5 * h * k1w;
    const auto [k2p, k2w] = flow_derivative(mrp, tmp, opt.fixed_weights);
    tmp.phi = s.phi + 0.5 * h * k2p;
    tmp.w = s.w + 0.5 * h * k2w;
    const auto [k3p, k3w] = flow_derivative(mrp, tmp, opt.fixed_weights);
    tmp.phi = s.phi + h * k3p;
    tmp.w = s.w + h * k3w;
    const auto [k4p, k4w] = flow_derivative(mrp, tmp, opt.fixed_weights);
    s.phi += (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    if (!opt.fixed_weights) s.w += (h / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
    s.t = t0 + h * static_cast<double>(k);
    check_bounded(s);
    if (k == steps || (opt.snapshot_stride > 0 && k % opt.snapshot_stride == 0)) out.push_back(s);
  }
  return out;
}

NoiseVector NoiseVector::draw(int d, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  NoiseVector n;
  n.eps.resize(d);
  for (int i = 0; i < d; ++i) n.eps(i) = standard_normal(rng);
  return n;
}

Matrix closed_form_phi(const Mrp& mrp, const Matrix& phi0, double t, const std::optional<NoiseVector>& noise) {
  mrp.validate();
  if (phi0.rows() != mrp.P.rows()) throw InputError("feature rows do not match the MRP state count");
  if (noise && noise->eps.size() != phi0.cols()) throw InputError("noise length does not match the feature width");
  if (!(t >= 0.0)) throw InputError("time must be non-negative");
  if (t == 0.0) return phi0;
  const Eigen::Index n = mrp.P.rows();
  const Matrix a = Matrix::Identity(n, n) - mrp.gamma * mrp.P;
  const Matrix decay = matrix_exponential(-t * a);
  if (!noise) return decay * phi0;
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) throw NumericalError("I - gamma P is singular");
  const Matrix c = lu.solve(mrp.R) * noise->eps.transpose();
  return decay * (phi0 - c) + c;
}

RankPoint rank_point(double t, const Matrix& phi, double epsilon) {
  RankPoint p;
  p.t = t;
  const FeatureMatrix fm(phi);
  const Vector sv = scaled_singular_values(fm);
  p.effective_dim = count_above(sv, epsilon);
  p.frobenius_norm = phi.norm();
  p.top_singular_values = Vector::Zero(4);
  for (Eigen::Index i = 0; i < std::min<Eigen::Index>(4, sv.size()); ++i) p.top_singular_values(i) = sv(i);
  return p;
}

std::vector<RankPoint> rank_over_time(const std::vector<FlowState>& trajectory, double epsilon) {
  std::vector<RankPoint> out;
  out.reserve(trajectory.size());
  for (const FlowState& s : trajectory) out.push_back(rank_point(s.t, s.phi, epsilon));
  return out;
}

std::vector<std::string> trajectory_csv_header() { return {"t", "frobenius_norm", "effective_dim", "sv1", "sv2", "sv3", "sv4"}; }

std::vector<double> trajectory_csv_row(const RankPoint& p) {
  return {p.t,
          p.frobenius_norm,
          static_cast<double>(p.effective_dim),
          p.top_singular_values(0),
          p.top_singular_values(1),
          p.top_singular_values(2),
          p.top_singular_values(3)};
}

}  // namespace plab
