// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "issl/numcore/rng.hpp"

namespace issl {

struct MaskSpec {
  // Sorted, unique frame indices in [0, T).
  std::vector<std::size_t> masked_indices;
  // Sampled (start, length) spans; they may overlap.
  std::vector<std::pair<std::size_t, std::size_t>> spans;

  bool empty() const { return masked_indices.empty(); }
  std::size_t size() const { return masked_indices.size(); }
  std::vector<bool> flags(std::size_t num_frames) const;
};

// Number of span starts is mask_prob * T rounded stochastically (at least
// one when mask_prob > 0); starts are drawn without replacement from
// [0, T - span]. Requires T >= span.
MaskSpec sample_mask(std::size_t num_frames, double mask_prob, std::size_t span, Rng& rng);

}  // namespace issl
