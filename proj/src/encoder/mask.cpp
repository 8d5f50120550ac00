// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/encoder/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "issl/numcore/errors.hpp"

namespace issl {

std::vector<bool> MaskSpec::flags(std::size_t num_frames) const {
  std::vector<bool> f(num_frames, false);
  for (std::size_t i : masked_indices) {
    if (i >= num_frames)
      throw ContractError("mask index " + std::to_string(i) + " outside " +
                          std::to_string(num_frames) + " frames");
    f[i] = true;
  }
  return f;
}

MaskSpec sample_mask(std::size_t num_frames, double mask_prob, std::size_t span, Rng& rng) {
  if (mask_prob < 0.0 || mask_prob > 1.0) throw ConfigError("mask_prob must lie in [0, 1]");
  if (span == 0) throw ConfigError("mask_span must be positive");
  MaskSpec m;
  if (mask_prob == 0.0) return m;
  if (num_frames < span)
    throw ContractError("sample_mask: " + std::to_string(num_frames) +
                        " frames is shorter than mask span " + std::to_string(span));
  const std::size_t positions = num_frames - span + 1;
  const double want = mask_prob * static_cast<double>(num_frames);
  auto starts_n = static_cast<std::size_t>(std::floor(want + rng.uniform()));
  starts_n = std::clamp<std::size_t>(starts_n, 1, positions);

  std::vector<std::size_t> pos(positions);
  std::iota(pos.begin(), pos.end(), 0);
  for (std::size_t i = 0; i < starts_n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(positions - i));
    std::swap(pos[i], pos[j]);
  }
  pos.resize(starts_n);
  std::sort(pos.begin(), pos.end());

  std::vector<bool> f(num_frames, false);
  for (std::size_t s : pos) {
    m.spans.emplace_back(s, span);
    for (std::size_t t = s; t < s + span; ++t) f[t] = true;
  }
  for (std::size_t t = 0; t < num_frames; ++t)
    if (f[t]) m.masked_indices.push_back(t);
  return m;
}

}  // namespace issl
