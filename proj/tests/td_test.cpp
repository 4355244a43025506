#include "doctest.h"

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>

#include "plab/capacity.hpp"
#include "plab/error.hpp"
#include "plab/linalg.hpp"
#include "plab/td.hpp"
#include "test_support.hpp"

using namespace plab;
using plab::testing::random_matrix;

namespace {

// Plain 60-term Taylor series, accumulated in long double.
Matrix taylor_exp(const Matrix& a, int terms = 60) {
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const LMatrix al = a.cast<long double>();
  LMatrix term = LMatrix::Identity(a.rows(), a.cols());
  LMatrix sum = term;
  for (int k = 1; k < terms; ++k) {
    term = (term * al) / static_cast<long double>(k);
    sum += term;
  }
  return sum.cast<double>();
}

// Taylor on A / 2^s with ||A / 2^s|| <= 1/2, then repeated squaring.
Matrix taylor_exp_scaled(const Matrix& a) {
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int s = 0;
  while (norm / std::ldexp(1.0, s) > 0.5) ++s;
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const LMatrix al = (a / std::ldexp(1.0, s)).cast<long double>();
  LMatrix term = LMatrix::Identity(a.rows(), a.cols());
  LMatrix sum = term;
  for (int k = 1; k < 40; ++k) {
    term = (term * al) / static_cast<long double>(k);
    sum += term;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum.cast<double>();
}

Matrix random_phi(std::uint64_t seed, int n, int d) {
  Rng rng = make_rng(seed);
  return random_matrix(rng, n, d);
}

}  // namespace

TEST_CASE("matrix exponential trivial cases") {
  CHECK(matrix_exponential(Matrix::Zero(4, 4)) == Matrix::Identity(4, 4));
  Vector a(3);
  a << -2.0, 0.5, 3.0;
  const Matrix e = matrix_exponential(a.asDiagonal());
  for (int i = 0; i < 3; ++i) CHECK(e(i, i) == doctest::Approx(std::exp(a(i))).epsilon(1e-14));
  CHECK(std::abs(e(0, 1)) < 1e-300);
  CHECK_THROWS_AS(matrix_exponential(Matrix::Zero(2, 3)), InputError);
}

TEST_CASE("matrix exponential matches a 60-term Taylor series for small norms") {
  Rng rng = make_rng(60);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_matrix(rng, 5, 5);
    a *= (0.1 + 1.9 * uniform01(rng)) / a.cwiseAbs().colwise().sum().maxCoeff();
    CHECK((matrix_exponential(a) - taylor_exp(a)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("matrix exponential relative accuracy up to norm 10") {
  Rng rng = make_rng(61);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 7));
    Matrix a = random_matrix(rng, n, n);
    a *= (1.0 + 9.0 * uniform01(rng)) / a.cwiseAbs().colwise().sum().maxCoeff();
    const Matrix oracle = taylor_exp_scaled(a);
    CHECK((matrix_exponential(a) - oracle).norm() <= 1e-10 * oracle.norm());
  }
}

TEST_CASE("random MRPs are valid and seeded") {
  const Mrp m = random_mrp(6, 0.9, 3);
  CHECK_NOTHROW(m.validate());
  CHECK(m.P == random_mrp(6, 0.9, 3).P);
  CHECK_FALSE(m.P == random_mrp(6, 0.9, 4).P);
  Mrp bad = m;
  bad.P(0, 0) += 1e-9;
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad = m;
  bad.gamma = 1.0;
  CHECK_THROWS_AS(bad.validate(), InputError);
}

TEST_CASE("I - gamma P has spectrum with real part at least 1 - gamma") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Mrp m = random_mrp(5, 0.9, seed);
    const Matrix a = Matrix::Identity(5, 5) - m.gamma * m.P;
    const Eigen::VectorXcd ev = Eigen::EigenSolver<Matrix>(a).eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) CHECK(ev(i).real() >= 1.0 - m.gamma - 1e-12);
  }
}

TEST_CASE("closed form at t = 0 is the initial condition") {
  const Mrp m = random_mrp(5, 0.9, 1);
  const Matrix phi0 = random_phi(1, 5, 3);
  CHECK(closed_form_phi(m, phi0, 0.0) == phi0);
  CHECK(closed_form_phi(m, phi0, 0.0, NoiseVector::draw(3, 2)) == phi0);
}

TEST_CASE("closed form on the symmetric two-state chain decays along eigenvectors") {
  Mrp m;
  m.P = Matrix::Constant(2, 2, 0.5);
  m.R = Vector::Zero(2);
  m.gamma = 0.9;
  // Eigenvectors of I - gamma P: (1,1)/sqrt2 with eigenvalue 0.1 and
  // (1,-1)/sqrt2 with eigenvalue 1.
  Vector u(2), v(2);
  u << 1.0, 1.0;
  v << 1.0, -1.0;
  u /= std::sqrt(2.0);
  v /= std::sqrt(2.0);
  const Matrix phi0 = random_phi(2, 2, 3);
  for (double t : {0.5, 2.0, 7.0}) {
    const Matrix phi = closed_form_phi(m, phi0, t);
    const Matrix expect = std::exp(-0.1 * t) * u * (u.transpose() * phi0) + std::exp(-t) * v * (v.transpose() * phi0);
    CHECK((phi - expect).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("zero reward: both closed forms agree and decay under the spectral bound") {
  Mrp m = random_mrp(5, 0.9, 5);
  m.R.setZero();
  const Matrix phi0 = random_phi(5, 5, 4);
  const NoiseVector eps = NoiseVector::draw(4, 9);
  double last = phi0.norm();
  for (double t : {1.0, 5.0, 20.0, 60.0, 100.0}) {
    const Matrix a = closed_form_phi(m, phi0, t);
    const Matrix b = closed_form_phi(m, phi0, t, eps);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(a.norm() <= std::exp(-(1.0 - m.gamma) * t) * phi0.norm() * (1.0 + 1e-9));
    CHECK(a.norm() < last);
    last = a.norm();
  }
  const Matrix end = closed_form_phi(m, phi0, 100.0);
  CHECK(end.norm() < 1e-3 * phi0.norm());
  CHECK(rank_point(100.0, end, 0.01).effective_dim == 0);
}

TEST_CASE("reward case converges to the noise fixed point") {
  const Mrp m = random_mrp(4, 0.8, 6);
  const Matrix phi0 = random_phi(6, 4, 2);
  const NoiseVector eps = NoiseVector::draw(2, 6);
  const Matrix a = Matrix::Identity(4, 4) - m.gamma * m.P;
  const Matrix fixed = a.fullPivLu().solve(m.R) * eps.eps.transpose();
  CHECK((closed_form_phi(m, phi0, 400.0, eps) - fixed).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("flow with zero heads leaves the features constant") {
  const Mrp m = random_mrp(5, 0.9, 7);
  FlowState s = init_flow(random_phi(7, 5, 3), 8, 1.0, 1.0, 0.0, 7);
  CHECK(s.w.isZero(0.0));
  const auto traj = simulate_ensemble_flow(m, s, {.dt = 0.01, .t_end = 1.0});
  CHECK(traj.back().phi == s.phi);
  CHECK(traj.back().t == doctest::Approx(1.0));
}

TEST_CASE("flow derivative matches the per-head sum") {
  const Mrp m = random_mrp(4, 0.9, 8);
  const FlowState s = init_flow(random_phi(8, 4, 3), 5, 0.3, 0.7, 1.0, 8);
  const auto [dphi, dw] = flow_derivative(m, s, false);
  Matrix expect_phi = Matrix::Zero(4, 3);
  Matrix expect_w(3, 5);
  for (int k = 0; k < 5; ++k) {
    const Vector w = s.w.col(k);
    const Vector err = m.R + m.gamma * m.P * s.phi * w - s.phi * w;
    expect_phi += 0.3 * err * w.transpose();
    expect_w.col(k) = 0.7 * s.phi.transpose() * err;
  }
  CHECK((dphi - expect_phi).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((dw - expect_w).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(flow_derivative(m, s, true).second.isZero(0.0));
}

TEST_CASE("halving dt barely moves the RK4 endpoint") {
  const Mrp m = random_mrp(5, 0.9, 9);
  const FlowState s = init_flow(random_phi(9, 5, 4), 32, 1.0 / 32, 0.1, 1.0, 9);
  const Matrix a = simulate_ensemble_flow(m, s, {.dt = 1e-2, .t_end = 2.0, .fixed_weights = false}).back().phi;
  const Matrix b = simulate_ensemble_flow(m, s, {.dt = 5e-3, .t_end = 2.0, .fixed_weights = false}).back().phi;
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("RK4 error on the single-head linear flow shrinks like dt^4") {
  // With one fixed head the flow is linear: vec(Phi)' = -alpha (w w^T kron A) vec(Phi)
  // + alpha vec(R w^T). Its exact solution comes from an augmented exponential.
  const Mrp m = random_mrp(3, 0.9, 10);
  const FlowState s = init_flow(random_phi(10, 3, 2), 1, 1.5, 0.0, 1.0, 10);
  const Matrix a = Matrix::Identity(3, 3) - m.gamma * m.P;
  const Vector w = s.w.col(0);
  const Matrix k = s.alpha * Eigen::kroneckerProduct(w * w.transpose(), a).eval();
  Matrix rw = s.alpha * m.R * w.transpose();
  Matrix aug = Matrix::Zero(7, 7);
  aug.topLeftCorner(6, 6) = -k;
  aug.topRightCorner(6, 1) = Eigen::Map<const Vector>(rw.data(), 6);
  Vector z(7);
  z << Eigen::Map<const Vector>(s.phi.data(), 6), 1.0;
  const double t = 3.0;
  const Vector exact = matrix_exponential(t * aug) * z;
  const Matrix exact_phi = Eigen::Map<const Matrix>(exact.data(), 3, 2);

  const auto err = [&](double dt) {
    return (simulate_ensemble_flow(m, s, {.dt = dt, .t_end = t}).back().phi - exact_phi).cwiseAbs().maxCoeff();
  };
  const double e1 = err(0.2), e2 = err(0.1);
  CAPTURE(e1);
  CAPTURE(e2);
  CHECK(e1 / e2 > 10.0);
  CHECK(e1 / e2 < 24.0);
}

TEST_CASE("divergent flows raise an error naming the time") {
  Mrp m = random_mrp(3, 0.9, 11);
  FlowState s = init_flow(random_phi(11, 3, 2), 4, -50.0, 0.0, 1.0, 11);
  try {
    simulate_ensemble_flow(m, s, {.dt = 1e-2, .t_end = 50.0});
    FAIL("expected divergence");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("t=") != std::string::npos);
  }
}

TEST_CASE("rank over time: initial rank and zero-reward decay") {
  Mrp m = random_mrp(5, 0.9, 12);
  m.R.setZero();
  const Matrix phi0 = random_phi(12, 5, 4);
  const FlowState s = init_flow(phi0, 256, 1.0 / 256, 0.0, 1.0, 12);
  const auto traj = simulate_ensemble_flow(m, s, {.dt = 1e-2, .t_end = 30.0, .snapshot_stride = 500});
  REQUIRE(traj.size() == 7);
  const auto ranks = rank_over_time(traj, 0.01);
  CHECK(ranks.front().effective_dim == 4);
  CHECK(ranks.front().t == 0.0);
  CHECK(ranks.back().frobenius_norm < ranks.front().frobenius_norm);
  for (std::size_t i = 1; i < ranks.size(); ++i) CHECK(ranks[i].frobenius_norm < ranks[i - 1].frobenius_norm);
  CHECK(trajectory_csv_row(ranks.front()).size() == trajectory_csv_header().size());
}

TEST_CASE("ensemble flow approaches the closed form as heads grow") {
  Mrp m = random_mrp(5, 0.9, 13);
  m.R.setZero();
  const Matrix phi0 = random_phi(13, 5, 4);
  const Matrix cf = closed_form_phi(m, phi0, 2.0);
  double prev = 1e300;
  for (int heads : {16, 256, 4096}) {
    double mean = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const FlowState s = init_flow(phi0, heads, 1.0 / heads, 0.0, 1.0, 100 + seed);
      mean += (simulate_ensemble_flow(m, s, {.dt = 1e-2, .t_end = 2.0}).back().phi - cf).cwiseAbs().maxCoeff();
    }
    mean /= 5.0;
    CAPTURE(heads);
    CHECK(mean < prev);
    prev = mean;
  }
  CHECK(prev < 0.05);
}
