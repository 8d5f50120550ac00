// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>

#include "doctest.h"
#include "gradcheck.hpp"
#include "issl/clustering/kmeans.hpp"
#include "issl/numcore/errors.hpp"

using namespace issl;
using issl::testing::random_matrix;

namespace {

Matrix random_points(Rng& rng, std::size_t n, std::size_t d) {
  Matrix m(n, d);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

// Brute-force nearest centroid and total inertia, written without shared helpers.
std::pair<std::vector<int>, double> brute_assign(const Matrix& p, const Matrix& c) {
  std::vector<int> lab(p.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double best = 1e300;
    for (std::size_t j = 0; j < c.rows(); ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < p.cols(); ++q) s += (p(i, q) - c(j, q)) * (p(i, q) - c(j, q));
      if (s < best) {
        best = s;
        lab[i] = static_cast<int>(j);
      }
    }
    total += best;
  }
  return {lab, total};
}

}  // namespace

TEST_CASE("two separated clusters are recovered exactly") {
  Matrix p{{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}, {10.0, 10.0}, {10.0, 10.0}};
  const Centroids c = kmeans_fit(p, 2, 1);
  CHECK(c.inertia == 0.0);
  const auto lab = assign(p, c).labels;
  CHECK(lab[0] == lab[1]);
  CHECK(lab[1] == lab[2]);
  CHECK(lab[3] == lab[4]);
  CHECK(lab[0] != lab[3]);
  CHECK(c.means(static_cast<std::size_t>(lab[0]), 0) == 0.0);
  CHECK(c.means(static_cast<std::size_t>(lab[3]), 1) == 10.0);
}

TEST_CASE("k = 1 converges to the global mean") {
  Rng rng(2);
  const Matrix p = random_points(rng, 40, 3);
  const Centroids c = kmeans_fit(p, 1, 3);
  const Matrix mu = column_means(p);
  CHECK(max_abs_diff(c.means, mu) <= 1e-12);
}

TEST_CASE("inertia never increases on random instances") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(mix_seed(seed, 77));
    const std::size_t n = 20 + rng.below(200);
    const std::size_t d = 1 + rng.below(6);
    const std::size_t k = 1 + rng.below(12);
    const Matrix p = random_points(rng, n, d);
    const Centroids c = kmeans_fit(p, k, seed);
    for (std::size_t i = 1; i < c.inertia_history.size(); ++i)
      CHECK(c.inertia_history[i] <= c.inertia_history[i - 1] + 1e-12);
    CHECK(brute_assign(p, c.means).second == doctest::Approx(c.inertia).epsilon(1e-12));
  }
}

TEST_CASE("lloyd matches a plain reference implementation from the same start") {
  Rng rng(11);
  const Matrix p = random_points(rng, 150, 4);
  Rng init_rng(12);
  const Matrix init = kmeans_plus_plus(p, 5, init_rng);
  const Centroids c = lloyd(p, init, 100);
  REQUIRE(c.converged);

  Matrix ref = init;
  for (int it = 0; it < 100; ++it) {
    const auto lab = brute_assign(p, ref).first;
    Matrix next(5, 4);
    std::vector<double> cnt(5, 0.0);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      cnt[static_cast<std::size_t>(lab[i])] += 1.0;
      for (std::size_t q = 0; q < 4; ++q) next(static_cast<std::size_t>(lab[i]), q) += p(i, q);
    }
    for (std::size_t j = 0; j < 5; ++j) {
      REQUIRE(cnt[j] > 0.0);
      for (std::size_t q = 0; q < 4; ++q) next(j, q) /= cnt[j];
    }
    if (brute_assign(p, next).first == lab) {
      ref = next;
      break;
    }
    ref = next;
  }
  CHECK(max_abs_diff(c.means, ref) <= 1e-12);
}

TEST_CASE("assignment equals brute force and breaks ties to the lowest index") {
  Rng rng(13);
  const Matrix p = random_points(rng, 300, 5);
  const Centroids c = kmeans_fit(p, 7, 4);
  CHECK(assign(p, c).labels == brute_assign(p, c.means).first);
  CHECK(assign(p, c).vocab_size == 7);

  Centroids tie;
  tie.means = Matrix{{1.0}, {-1.0}, {1.0}};
  CHECK(assign(Matrix{{0.0}}, tie).labels[0] == 0);
  CHECK(assign(Matrix{{1.0}}, tie).labels[0] == 0);
}

TEST_CASE("empty clusters are re-seeded") {
  // Two starting means on top of each other: the second gets no points.
  Matrix p{{0.0}, {0.1}, {5.0}, {5.2}};
  const Centroids c = lloyd(p, Matrix{{0.0}, {0.0}}, 10);
  CHECK(c.inertia == doctest::Approx(0.005 + 0.02));
}

TEST_CASE("fits are deterministic for a fixed seed") {
  Rng rng(14);
  const Matrix p = random_points(rng, 200, 3);
  CHECK(kmeans_fit(p, 6, 9).means == kmeans_fit(p, 6, 9).means);
}

TEST_CASE("fewer points than clusters is an error") {
  CHECK_THROWS_AS(kmeans_fit(Matrix(3, 2, 1.0), 4, 0), InsufficientPointsError);
}

TEST_CASE("subsampling keeps order and size") {
  Matrix p(100, 1);
  for (std::size_t i = 0; i < 100; ++i) p(i, 0) = static_cast<double>(i);
  Rng rng(15);
  const Matrix s = subsample_rows(p, 30, rng);
  REQUIRE(s.rows() == 30);
  for (std::size_t i = 1; i < 30; ++i) CHECK(s(i, 0) > s(i - 1, 0));
  CHECK(subsample_rows(p, 500, rng) == p);
}

TEST_CASE("centroid file round trip") {
  Rng rng(16);
  Centroids c;
  c.means = random_points(rng, 4, 3);
  const auto path = std::filesystem::temp_directory_path() / "issl_test.iskm";
  write_centroids(path, c);
  CHECK(read_centroids(path).means == c.means);
  std::filesystem::remove(path);
}

TEST_CASE("assignment matches a direct scan, ties to the lowest index") {
  Rng rng(31);
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t n = 50 + rng.below(1200), k = 2 + rng.below(40), d = 1 + rng.below(12);
    Matrix pts = random_matrix(rng, n, d, 1.0 + 100.0 * rng.uniform());
    Centroids c;
    c.means = random_matrix(rng, k, d);
    // Duplicate a centroid to force exact ties.
    std::copy(c.means.row(0).begin(), c.means.row(0).end(), c.means.row(k - 1).begin());
    const PseudoLabelSequence got = assign(pts, c);
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = squared_distance(pts.row(i), c.means.row(0));
      for (std::size_t j = 1; j < k; ++j) {
        const double dd = squared_distance(pts.row(i), c.means.row(j));
        if (dd < bd) bd = dd, best = static_cast<int>(j);
      }
      CHECK(got.labels[i] == best);
    }
  }
}
