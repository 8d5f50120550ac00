// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Regularized canonical correlation analysis and its projection-weighted
// summary.

#pragma once

#include <vector>

#include "issl/numcore/linalg.hpp"
#include "issl/numcore/matrix.hpp"

namespace issl {

struct CCAModel {
  Matrix directions_x;  // d_x x m, columns u_i
  Matrix directions_y;  // d_y x m, columns v_i
  std::vector<double> correlations;  // rho_i, non-increasing, in [0, 1]
  double eps_x = 0.0, eps_y = 0.0;
  Matrix mean_x, mean_y;  // 1 x d training means

  std::size_t size() const { return correlations.size(); }
};

// rho_i are the singular values of (Sxx + eps_x I)^{-1/2} Sxy (Syy + eps_y I)^{-1/2}
// with Sxx, Syy, Sxy the sample covariances of the mean-centred views.
// m = min(d_x, d_y). Throws DimensionError on row mismatch, ContractError for
// n < 2 and NumericalError for non-finite data.
CCAModel cca_fit(const Matrix& X, const Matrix& Y, double eps_x, double eps_y);

// Weights alpha_i proportional to sum_j |<h_i, x_j>| where h_i is the unit-norm
// canonical variate X u_i and x_j the columns of the centred X; returns
// sum_i alpha_i rho_i with alpha normalised to sum to one. Directions whose
// training correlation is numerically zero (rho_i <= 1e-8 rho_1) are not
// determined by the fit, e.g. past the rank of a one-hot view, and get
// weight zero.
std::vector<double> pwcca_weights(const CCAModel& model, const Matrix& X);
double pwcca_score(const CCAModel& model, const Matrix& X);

// Score on held-out rows: correlations of the projected views on (X, Y),
// clipped to [0, 1], weighted by pwcca_weights on X.
double heldout_score(const CCAModel& model, const Matrix& X, const Matrix& Y);

// Shared work for many fits against the same training rows: the
// decompositions of both covariance blocks. Scores for one (eps_x, eps_y)
// then cost one small SVD.
class CCAProblem {
 public:
  CCAProblem(const Matrix& X, const Matrix& Y);
  // Reuses the Y-side decomposition of another problem over the same rows.
  CCAProblem(const Matrix& X, const CCAProblem& same_y);

  CCAModel fit(double eps_x, double eps_y) const;
  std::size_t rows() const { return n_; }

 private:
  struct Side {
    Matrix mean;
    Matrix centered;
    SymEigenResult eig;
  };
  static Side make_side(const Matrix& M);

  std::size_t n_ = 0;
  Side x_, y_;
  Matrix cross_;  // Qx^T Sxy Qy
};

}  // namespace issl
