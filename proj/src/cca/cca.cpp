// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/cca/cca.hpp"

#include <algorithm>
#include <cmath>

#include "issl/numcore/errors.hpp"

namespace issl {

namespace {

// (lambda + eps)^{-1/2}, zero on the numerical null space.
std::vector<double> inv_sqrt_scales(const std::vector<double>& values, double eps) {
  double top = 0.0;
  for (double v : values) top = std::max(top, v + eps);
  std::vector<double> s(values.size(), 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i] + eps;
    if (v > 1e-13 * top && v > 0.0) s[i] = 1.0 / std::sqrt(v);
  }
  return s;
}

Matrix scale_columns(const Matrix& m, const std::vector<double>& s) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] *= s[c];
  }
  return out;
}

Matrix centered_copy(const Matrix& m) {
  Matrix c = m;
  center_columns(c);
  return c;
}

double correlation(const Matrix& a, std::size_t ca, const Matrix& b, std::size_t cb) {
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    sab += a(r, ca) * b(r, cb);
    saa += a(r, ca) * a(r, ca);
    sbb += b(r, cb) * b(r, cb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

CCAProblem::Side CCAProblem::make_side(const Matrix& M) {
  if (!M.all_finite()) throw NumericalError("cca: non-finite data");
  Side s;
  s.mean = column_means(M);
  s.centered = centered_copy(M);
  Matrix cov = matmul_tn(s.centered, s.centered);
  cov *= 1.0 / static_cast<double>(M.rows() - 1);
  s.eig = sym_eigen(cov);
  return s;
}

CCAProblem::CCAProblem(const Matrix& X, const Matrix& Y) : n_(X.rows()) {
  if (X.rows() != Y.rows())
    throw DimensionError("cca: views have " + X.shape_string() + " and " + Y.shape_string());
  if (n_ < 2) throw ContractError("cca: need at least two rows");
  x_ = make_side(X);
  y_ = make_side(Y);
  Matrix sxy = matmul_tn(x_.centered, y_.centered);
  sxy *= 1.0 / static_cast<double>(n_ - 1);
  cross_ = matmul(matmul_tn(x_.eig.vectors, sxy), y_.eig.vectors);
  if (!cross_.all_finite()) throw NumericalError("cca: non-finite covariance");
}

CCAProblem::CCAProblem(const Matrix& X, const CCAProblem& same_y) : n_(X.rows()), y_(same_y.y_) {
  if (X.rows() != same_y.n_)
    throw DimensionError("cca: views have " + X.shape_string() + " and " +
                         same_y.y_.centered.shape_string());
  x_ = make_side(X);
  Matrix sxy = matmul_tn(x_.centered, y_.centered);
  sxy *= 1.0 / static_cast<double>(n_ - 1);
  cross_ = matmul(matmul_tn(x_.eig.vectors, sxy), y_.eig.vectors);
  if (!cross_.all_finite()) throw NumericalError("cca: non-finite covariance");
}

CCAModel CCAProblem::fit(double eps_x, double eps_y) const {
  if (eps_x < 0.0 || eps_y < 0.0) throw ConfigError("cca: regularizers must be non-negative");
  const std::vector<double> sx = inv_sqrt_scales(x_.eig.values, eps_x);
  const std::vector<double> sy = inv_sqrt_scales(y_.eig.values, eps_y);
  // In the eigenbases the whitened cross-covariance is diag(sx) C diag(sy);
  // the rotations do not change its singular values.
  Matrix t = cross_;
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) t(r, c) *= sx[r] * sy[c];
  const SvdResult d = svd(t);

  CCAModel m;
  m.eps_x = eps_x;
  m.eps_y = eps_y;
  m.mean_x = x_.mean;
  m.mean_y = y_.mean;
  m.directions_x = matmul(scale_columns(x_.eig.vectors, sx), d.U);
  m.directions_y = matmul(scale_columns(y_.eig.vectors, sy), transpose(d.Vt));
  m.correlations.resize(d.S.size());
  for (std::size_t i = 0; i < d.S.size(); ++i) m.correlations[i] = std::clamp(d.S[i], 0.0, 1.0);
  return m;
}

CCAModel cca_fit(const Matrix& X, const Matrix& Y, double eps_x, double eps_y) {
  return CCAProblem(X, Y).fit(eps_x, eps_y);
}

std::vector<double> pwcca_weights(const CCAModel& model, const Matrix& X) {
  if (X.cols() != model.directions_x.rows())
    throw DimensionError("pwcca: data " + X.shape_string() + " vs directions " +
                         model.directions_x.shape_string());
  const Matrix xc = centered_copy(X);
  Matrix h = matmul(xc, model.directions_x);
  for (std::size_t c = 0; c < h.cols(); ++c) {
    double norm = 0.0;
    for (std::size_t r = 0; r < h.rows(); ++r) norm += h(r, c) * h(r, c);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < h.rows(); ++r) h(r, c) = norm > 0.0 ? h(r, c) / norm : 0.0;
  }
  const Matrix proj = matmul_tn(h, xc);  // m x d_x, entry (i, j) = <h_i, x_j>
  std::vector<double> alpha(proj.rows(), 0.0);
  const double floor = model.size() > 0 ? 1e-8 * model.correlations[0] : 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < proj.rows(); ++i) {
    if (floor > 0.0 && model.correlations[i] <= floor) continue;
    for (double v : proj.row(i)) alpha[i] += std::abs(v);
    total += alpha[i];
  }
  for (double& a : alpha)
    a = total > 0.0 ? a / total : 1.0 / static_cast<double>(alpha.size());
  return alpha;
}

double pwcca_score(const CCAModel& model, const Matrix& X) {
  const std::vector<double> alpha = pwcca_weights(model, X);
  double s = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) s += alpha[i] * model.correlations[i];
  return std::clamp(s, 0.0, 1.0);
}

double heldout_score(const CCAModel& model, const Matrix& X, const Matrix& Y) {
  if (X.rows() != Y.rows())
    throw DimensionError("cca: views have " + X.shape_string() + " and " + Y.shape_string());
  const Matrix u = matmul(centered_copy(X), model.directions_x);
  const Matrix v = matmul(centered_copy(Y), model.directions_y);
  const std::vector<double> alpha = pwcca_weights(model, X);
  double s = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i)
    s += alpha[i] * std::clamp(correlation(u, i, v, i), 0.0, 1.0);
  return std::clamp(s, 0.0, 1.0);
}

}  // namespace issl
