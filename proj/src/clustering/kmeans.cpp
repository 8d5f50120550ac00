// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/clustering/kmeans.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include "issl/numcore/binary_io.hpp"
#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"

namespace issl {

namespace {

struct Assignment {
  std::vector<int> labels;
  std::vector<double> dist;  // squared distance to the assigned centroid
  double inertia = 0.0;
};

// Distances come from the expansion |p|^2 + |c|^2 - 2 p.c computed blockwise
// with a matrix product; every centroid within rounding distance of the
// best is then rechecked exactly, so the result equals a direct scan.
Assignment nearest(const Matrix& points, const Matrix& means) {
  constexpr std::size_t kBlock = 512;
  const std::size_t k = means.rows();
  Assignment a;
  a.labels.resize(points.rows());
  a.dist.resize(points.rows());
  std::vector<double> cnorm(k);
  double cmax = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    cnorm[j] = squared_distance(means.row(j), std::vector<double>(means.cols(), 0.0));
    cmax = std::max(cmax, cnorm[j]);
  }
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < points.rows(); b0 += kBlock) {
    const std::size_t b1 = std::min(points.rows(), b0 + kBlock);
    const Matrix cross = matmul_nt(slice_rows(points, b0, b1), means);
    for (std::size_t i = b0; i < b1; ++i) {
      auto p = points.row(i);
      double pn = 0.0;
      for (double v : p) pn += v * v;
      auto row = cross.row(i - b0);
      double lo = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) lo = std::min(lo, cnorm[j] - 2.0 * row[j]);
      const double tol = 1e-9 * (pn + cmax) + 1e-300;
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        if (cnorm[j] - 2.0 * row[j] > lo + tol) continue;
        const double d = squared_distance(p, means.row(j));
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(j);
        }
      }
      a.labels[i] = best;
      a.dist[i] = best_d;
      a.inertia += best_d;
    }
  }
  return a;
}

}  // namespace

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows();
  if (n < k || k == 0)
    throw InsufficientPointsError("kmeans: need at least k = " + std::to_string(k) +
                                  " points, got " + std::to_string(n));
  Matrix means(k, points.cols());
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  std::copy(points.row(first).begin(), points.row(first).end(), means.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), means.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng.below(n));
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), means.row(c).begin());
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(points.row(i), means.row(c)));
  }
  return means;
}

Centroids lloyd(const Matrix& points, Matrix initial_means, std::size_t max_iter) {
  const std::size_t n = points.rows();
  const std::size_t k = initial_means.rows();
  const std::size_t d = points.cols();
  if (initial_means.cols() != d)
    throw DimensionError("lloyd: means " + initial_means.shape_string() + " vs points " +
                         points.shape_string());
  Centroids c;
  c.means = std::move(initial_means);
  Assignment cur = nearest(points, c.means);
  c.inertia_history.push_back(cur.inertia);

  for (std::size_t it = 0; it < max_iter; ++it) {
    Matrix next(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = static_cast<std::size_t>(cur.labels[i]);
      ++counts[j];
      auto dst = next.row(j);
      auto src = points.row(i);
      for (std::size_t q = 0; q < d; ++q) dst[q] += src[q];
    }
    std::vector<double> far = cur.dist;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] > 0) {
        for (double& v : next.row(j)) v /= static_cast<double>(counts[j]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its centroid.
      const auto pick = static_cast<std::size_t>(std::max_element(far.begin(), far.end()) - far.begin());
      std::copy(points.row(pick).begin(), points.row(pick).end(), next.row(j).begin());
      far[pick] = -1.0;
      log::debug("kmeans: re-seeded empty cluster ", j, " at point ", pick);
    }
    Assignment upd = nearest(points, next);
    const double prev = c.inertia_history.back();
    if (upd.inertia > prev + 1e-9 * std::max(1.0, prev))
      throw NumericalError("kmeans: inertia increased from " + std::to_string(prev) + " to " +
                           std::to_string(upd.inertia));
    c.means = std::move(next);
    c.inertia_history.push_back(upd.inertia);
    c.iterations = it + 1;
    const bool fixpoint = upd.labels == cur.labels;
    cur = std::move(upd);
    if (fixpoint) {
      c.converged = true;
      break;
    }
  }
  c.inertia = cur.inertia;
  return c;
}

Centroids kmeans_fit(const Matrix& points, std::size_t k, std::uint64_t seed,
                     std::size_t max_iter) {
  if (!points.all_finite()) throw NumericalError("kmeans: non-finite points");
  Rng rng(seed);
  Matrix init = kmeans_plus_plus(points, k, rng);
  return lloyd(points, std::move(init), max_iter);
}

PseudoLabelSequence assign(const Matrix& points, const Centroids& c) {
  if (points.cols() != c.dim())
    throw DimensionError("assign: points " + points.shape_string() + " vs centroids " +
                         c.means.shape_string());
  return {nearest(points, c.means).labels, static_cast<int>(c.k())};
}

Matrix subsample_rows(const Matrix& points, std::size_t max_rows, Rng& rng) {
  if (points.rows() <= max_rows) return points;
  std::vector<std::size_t> idx(points.rows());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first max_rows entries become the sample.
  for (std::size_t i = 0; i < max_rows; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(max_rows);
  std::sort(idx.begin(), idx.end());
  return gather_rows(points, idx);
}

void write_centroids(const std::filesystem::path& path, const Centroids& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  bin::put_magic(os, "ISKM");
  bin::put_i32(os, static_cast<std::int32_t>(c.k()));
  bin::put_i32(os, static_cast<std::int32_t>(c.dim()));
  for (double v : c.means.data()) bin::put_f64(os, v);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Centroids read_centroids(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  bin::expect_magic(is, "ISKM", path.string());
  const std::int32_t k = bin::get_i32(is);
  const std::int32_t d = bin::get_i32(is);
  if (k <= 0 || d <= 0) throw FormatError(path.string() + ": bad centroid dimensions");
  Centroids c;
  c.means = Matrix(static_cast<std::size_t>(k), static_cast<std::size_t>(d));
  for (double& v : c.means.data()) v = bin::get_f64(is);
  return c;
}

}  // namespace issl
