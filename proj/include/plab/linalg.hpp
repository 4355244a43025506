#pragma once

#include "plab/nn.hpp"

namespace plab {

// Singular values in descending order, computed by one-sided (Hestenes)
// Jacobi rotations, after a Householder QR reduction when the matrix is
// much taller than wide. Values at or below max(n, d) * machine-eps *
// sigma_max are set to exactly zero, so a numerically rank-deficient matrix
// reports its numerical rank.
Vector singular_values(const Matrix& a);

// exp(A) by scaling and squaring with a degree-13 Pade approximant.
Matrix matrix_exponential(const Matrix& a);

}  // namespace plab
