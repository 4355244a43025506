#pragma once

// Continuous-time linear TD feature dynamics with an ensemble of linear
// heads, its infinite-ensemble closed form and rank diagnostics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "plab/nn.hpp"

namespace plab {

// Markov reward process: row-stochastic P, expected rewards R, discount.
struct Mrp {
  Matrix P;
  Vector R;
  double gamma = 0.9;

  int num_states() const { return static_cast<int>(P.rows()); }
  // Throws InputError unless P is square, non-negative, rows sum to 1
  // within 1e-12, R matches, and gamma lies in (0,1).
  void validate() const;
};

// Dirichlet(1, ..., 1) transition rows and standard-normal rewards.
Mrp random_mrp(int num_states, double gamma, std::uint64_t seed);

struct FlowState {
  Matrix phi;  // |X| x d
  Matrix w;    // d x M, one column per head
  double t = 0.0;
  double alpha = 1.0;  // feature learning rate
  double beta = 0.0;   // head learning rate
  double sigma_sq = 1.0;
};

// Heads drawn i.i.d. N(0, sigma_sq).
FlowState init_flow(const Matrix& phi0, int num_heads, double alpha, double beta, double sigma_sq,
                    std::uint64_t seed);

// Time derivatives (dPhi, dW) of the ensemble flow at `s`.
std::pair<Matrix, Matrix> flow_derivative(const Mrp& mrp, const FlowState& s, bool fixed_weights);

struct FlowOptions {
  double dt = 1e-3;
  double t_end = 1.0;
  bool fixed_weights = true;  // beta treated as 0
  int snapshot_stride = 0;    // steps between snapshots; 0 keeps only start and end
};

// RK4 from `initial` to t_end. The step count is round(t_end / dt) and the
// step is adjusted to land on t_end exactly. Throws NumericalError naming t
// when any entry leaves [-1e12, 1e12] or stops being finite.
std::vector<FlowState> simulate_ensemble_flow(const Mrp& mrp, const FlowState& initial, const FlowOptions& opt);

struct NoiseVector {
  Vector eps;

  static NoiseVector draw(int d, std::uint64_t seed);
};

// exp(-t(I - gamma P)) Phi0, or with noise
// exp(-t(I - gamma P)) (Phi0 - C) + C where C = (I - gamma P)^{-1} R eps^T.
Matrix closed_form_phi(const Mrp& mrp, const Matrix& phi0, double t, const std::optional<NoiseVector>& noise = {});

struct RankPoint {
  double t = 0.0;
  int effective_dim = 0;
  double frobenius_norm = 0.0;
  Vector top_singular_values;  // of Phi / sqrt(|X|), four entries, zero padded
};

std::vector<RankPoint> rank_over_time(const std::vector<FlowState>& trajectory, double epsilon);
RankPoint rank_point(double t, const Matrix& phi, double epsilon);

// CSV: t,frobenius_norm,effective_dim,sv1..sv4
std::vector<std::string> trajectory_csv_header();
std::vector<double> trajectory_csv_row(const RankPoint& p);

}  // namespace plab
