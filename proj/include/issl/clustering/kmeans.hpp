// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "issl/numcore/matrix.hpp"
#include "issl/numcore/rng.hpp"

namespace issl {

struct Centroids {
  Matrix means;  // k x dim
  double inertia = 0.0;
  // Inertia after every assignment step, starting with the initialization.
  std::vector<double> inertia_history;
  std::size_t iterations = 0;
  bool converged = false;

  std::size_t k() const { return means.rows(); }
  std::size_t dim() const { return means.cols(); }
};

struct PseudoLabelSequence {
  std::vector<int> labels;
  int vocab_size = 0;

  std::size_t size() const { return labels.size(); }
};

double squared_distance(std::span<const double> a, std::span<const double> b);

// k-means++ seeding: first centre uniform, the rest by D^2 sampling.
Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, Rng& rng);

// Lloyd iterations from the given means until the assignment stops changing
// or max_iter updates have run. A cluster left empty after an assignment is
// re-seeded at the point farthest from its current centroid. Throws
// NumericalError if inertia ever increases.
Centroids lloyd(const Matrix& points, Matrix initial_means, std::size_t max_iter);

// k-means++ followed by Lloyd. Throws InsufficientPointsError when n < k.
Centroids kmeans_fit(const Matrix& points, std::size_t k, std::uint64_t seed,
                     std::size_t max_iter = 100);

// Nearest centroid by squared Euclidean distance, lowest index on ties.
PseudoLabelSequence assign(const Matrix& points, const Centroids& c);

// At most max_rows rows drawn uniformly without replacement, original order kept.
Matrix subsample_rows(const Matrix& points, std::size_t max_rows, Rng& rng);

// "ISKM" | int32 k | int32 dim | k*dim float64, little-endian.
void write_centroids(const std::filesystem::path& path, const Centroids& c);
Centroids read_centroids(const std::filesystem::path& path);

}  // namespace issl
