#include "plab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "plab/error.hpp"

namespace plab {

namespace {

constexpr int kMaxSweeps = 80;

// Column norms of `w` after orthogonalizing its columns in place.
Vector jacobi_column_norms(Matrix& w) {
  const Eigen::Index m = w.rows();
  const Eigen::Index n = w.cols();
  const double eps = std::numeric_limits<double>::epsilon();
  const double tol = std::max<double>(static_cast<double>(m), 1.0) * eps;
  // Columns at roundoff level relative to the whole matrix carry no rank
  // information; rotating them against each other only churns noise.
  const double negligible = eps * eps * w.squaredNorm();
  bool rotated = true;
  int sweep = 0;
  while (rotated) {
    if (++sweep > kMaxSweeps) throw NumericalError("Jacobi SVD did not converge");
    rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        auto cp = w.col(p);
        auto cq = w.col(q);
        const double alpha = cp.squaredNorm();
        const double beta = cq.squaredNorm();
        const double gamma = cp.dot(cq);
        if (alpha <= negligible || beta <= negligible) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha) * std::sqrt(beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index i = 0; i < m; ++i) {
          const double xp = cp(i);
          const double xq = cq(i);
          cp(i) = c * xp - s * xq;
          cq(i) = s * xp + c * xq;
        }
      }
    }
  }
  Vector norms(n);
  for (Eigen::Index j = 0; j < n; ++j) norms(j) = w.col(j).norm();
  return norms;
}

}  // namespace

Vector singular_values(const Matrix& a) {
  if (!a.allFinite()) throw InputError("singular_values: matrix has non-finite entries");
  if (a.size() == 0) return Vector();
  Matrix work = a.rows() >= a.cols() ? a : Matrix(a.transpose());
  if (work.rows() > 2 * work.cols()) {
    Eigen::HouseholderQR<Matrix> qr(work);
    work = qr.matrixQR().topRows(work.cols()).triangularView<Eigen::Upper>();
  }
  Vector sv = jacobi_column_norms(work);
  std::sort(sv.data(), sv.data() + sv.size(), std::greater<>());
  const double floor = static_cast<double>(std::max(a.rows(), a.cols())) *
                       std::numeric_limits<double>::epsilon() * (sv.size() > 0 ? sv(0) : 0.0);
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) <= floor) sv(i) = 0.0;
  return sv;
}

Matrix matrix_exponential(const Matrix& a) {
  if (a.rows() != a.cols()) throw InputError("matrix_exponential: matrix must be square");
  if (!a.allFinite()) throw InputError("matrix_exponential: non-finite entries");
  const Eigen::Index n = a.rows();
  if (n == 0) return Matrix();

  static constexpr double b[] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                                 1187353796428800.0,  129060195264000.0,   10559470521600.0,
                                 670442572800.0,      33522128640.0,       1323241920.0,
                                 40840800.0,          960960.0,            16380.0,
                                 182.0,               1.0};
  constexpr double theta13 = 5.371920351148152;

  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  if (norm1 == 0.0) return Matrix::Identity(n, n);
  int squarings = 0;
  if (norm1 > theta13) squarings = static_cast<int>(std::ceil(std::log2(norm1 / theta13)));
  const Matrix as = a / std::ldexp(1.0, squarings);

  const Matrix id = Matrix::Identity(n, n);
  const Matrix a2 = as * as;
  const Matrix a4 = a2 * a2;
  const Matrix a6 = a4 * a2;
  const Matrix u_inner = a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id;
  const Matrix u = as * u_inner;
  const Matrix v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id;

  Eigen::PartialPivLU<Matrix> lu(v - u);
  Matrix r = lu.solve(v + u);
  for (int i = 0; i < squarings; ++i) r = r * r;
  if (!r.allFinite()) throw NumericalError("matrix_exponential overflowed");
  return r;
}

}  // namespace plab
