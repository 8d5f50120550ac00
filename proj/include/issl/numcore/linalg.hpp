// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "issl/numcore/matrix.hpp"

namespace issl {

// Thin SVD: m (r x c) = U diag(S) Vt with k = min(r, c),
// U r x k, S length k non-increasing and non-negative, Vt k x c.
struct SvdResult {
  Matrix U;
  std::vector<double> S;
  Matrix Vt;
};

// One-sided (Hestenes) Jacobi. Any convergent SVD could stand in here; the
// callers only rely on the contract above. Throws NumericalError if the
// sweeps fail to converge or the input is not finite.
SvdResult svd(const Matrix& m);

// Symmetric eigendecomposition m = Q diag(values) Q^T, values in descending
// order, eigenvectors as columns of Q. Cyclic Jacobi rotations.
struct SymEigenResult {
  std::vector<double> values;
  Matrix vectors;
};

SymEigenResult sym_eigen(const Matrix& m);

// (m + eps I)^{-1/2} for symmetric positive semidefinite m. Eigenvalues of
// m + eps I that are not positive relative to the largest one (below
// 1e-13 * max) are dropped, giving the pseudo-inverse square root on the
// numerical null space.
Matrix sym_inv_sqrt(const Matrix& m, double eps);
// Same, reusing an existing decomposition of m.
Matrix sym_inv_sqrt(const SymEigenResult& eig, double eps);

}  // namespace issl
