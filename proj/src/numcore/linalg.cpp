// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/numcore/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "issl/numcore/errors.hpp"

namespace issl {

namespace {

constexpr int kMaxSweeps = 80;
constexpr double kOrthTol = 1e-15;

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void rotate(double* a, double* b, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i];
    const double y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// Hestenes Jacobi on a tall matrix (rows >= cols). Columns are kept as rows
// of `cols_t` so each rotation touches contiguous memory.
SvdResult svd_tall(const Matrix& m) {
  const std::size_t r = m.rows();
  const std::size_t n = m.cols();
  Matrix cols_t = transpose(m);  // n x r
  Matrix v_t = Matrix::identity(n);

  bool converged = n < 2;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* ap = cols_t.row(p).data();
        double* aq = cols_t.row(q).data();
        const double alpha = dot(ap, ap, r);
        const double beta = dot(aq, aq, r);
        const double gamma = dot(ap, aq, r);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kOrthTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(ap, aq, r, c, s);
        rotate(v_t.row(p).data(), v_t.row(q).data(), n, c, s);
      }
    }
    converged = !rotated;
  }
  if (!converged) throw NumericalError("svd: one-sided Jacobi did not converge");

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* a = cols_t.row(j).data();
    sigma[j] = std::sqrt(dot(a, a, r));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult out{Matrix(r, n), std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.S[k] = sigma[j];
    const auto a = cols_t.row(j);
    if (sigma[j] > 0.0) {
      for (std::size_t i = 0; i < r; ++i) out.U(i, k) = a[i] / sigma[j];
    }
    const auto v = v_t.row(j);
    std::copy(v.begin(), v.end(), out.Vt.row(k).begin());
  }
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m) {
  if (!m.all_finite()) throw NumericalError("svd: non-finite input");
  if (m.rows() >= m.cols()) return svd_tall(m);
  SvdResult t = svd_tall(transpose(m));
  return SvdResult{transpose(t.Vt), std::move(t.S), transpose(t.U)};
}

SymEigenResult sym_eigen(const Matrix& m) {
  if (m.rows() != m.cols())
    throw DimensionError("sym_eigen: matrix must be square, got " + m.shape_string());
  if (!m.all_finite()) throw NumericalError("sym_eigen: non-finite input");
  const std::size_t n = m.rows();
  Matrix a = m;
  // Symmetrize to remove rounding asymmetry from the caller.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
  Matrix v_t = Matrix::identity(n);  // rows are eigenvectors

  const double scale = frobenius_norm(a);
  bool converged = n < 2 || scale == 0.0;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) <= 1e-15 * scale) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // Rows p and q, then columns p and q by symmetry.
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = a(k, p);
          const double akq = a(k, q);
          const double np = c * akp - s * akq;
          const double nq = s * akp + c * akq;
          a(k, p) = a(p, k) = np;
          a(k, q) = a(q, k) = nq;
        }
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        rotate(v_t.row(p).data(), v_t.row(q).data(), n, c, s);
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) > 1e-12 * scale)
      throw NumericalError("sym_eigen: Jacobi rotations did not converge");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymEigenResult out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    const auto v = v_t.row(order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v[i];
  }
  return out;
}

Matrix sym_inv_sqrt(const SymEigenResult& eig, double eps) {
  const std::size_t n = eig.values.size();
  double top = 0.0;
  for (double l : eig.values) top = std::max(top, l + eps);
  const double floor = 1e-13 * top;
  // Q diag(w) Q^T with w = (l + eps)^{-1/2}, built as (Q diag(sqrt w)) (.)^T.
  Matrix scaled(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double l = eig.values[k] + eps;
    if (!(l > floor) || l <= 0.0) continue;
    const double w = std::pow(l, -0.25);
    for (std::size_t i = 0; i < n; ++i) scaled(i, k) = eig.vectors(i, k) * w;
  }
  return matmul_nt(scaled, scaled);
}

Matrix sym_inv_sqrt(const Matrix& m, double eps) {
  if (eps < 0.0) throw ContractError("sym_inv_sqrt: eps must be non-negative");
  return sym_inv_sqrt(sym_eigen(m), eps);
}

}  // namespace issl
