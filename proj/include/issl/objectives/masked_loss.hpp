// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Masked prediction loss: -log softmax over cos(x, e_c') / tau for c' in a
// candidate set. The predictive policy uses the whole label vocabulary; the
// contrastive policy uses the target plus K labels of other masked frames of
// the same utterance.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "issl/clustering/kmeans.hpp"
#include "issl/encoder/mask.hpp"
#include "issl/numcore/autograd.hpp"
#include "issl/numcore/rng.hpp"

namespace issl {

enum class Policy { predictive, contrastive };

Policy parse_policy(const std::string& s);
std::string to_string(Policy p);

struct Codebook {
  ag::Parameter embeddings;  // V x E
  double temperature = 0.1;

  std::size_t vocab_size() const { return embeddings.value.rows(); }
  std::size_t dim() const { return embeddings.value.cols(); }
};

// Gaussian embeddings scaled by 1/sqrt(E). Throws ConfigError for V < 2 or tau <= 0.
Codebook make_codebook(std::size_t vocab, std::size_t dim, double temperature, std::uint64_t seed);

struct CandidateSet {
  int target = 0;
  std::vector<int> candidates;  // labels, duplicates allowed, includes target
  std::size_t target_pos = 0;   // candidates[target_pos] == target
};

// Throws DegenerateInputError when either vector is zero.
double cosine_sim(std::span<const double> a, std::span<const double> b);

// C = {0, ..., V-1}.
CandidateSet predictive_candidates(std::size_t vocab, int target);

// K negatives drawn with replacement from the masked frames other than t,
// mapped to their labels; the target is appended last. With no other masked
// frame the predictive set over `vocab` is returned and *fell_back is set.
CandidateSet contrastive_candidates(const MaskSpec& mask, const PseudoLabelSequence& labels,
                                    std::size_t t, std::size_t k, std::size_t vocab, Rng& rng,
                                    std::vector<std::size_t>* negative_frames = nullptr,
                                    bool* fell_back = nullptr);

// Single-frame loss evaluated directly. Throws ContractError if the target
// is not at target_pos.
double masked_loss(std::span<const double> x, const CandidateSet& cand, const Codebook& cb);

// Weighted sum over rows i of -log softmax_j(cos(x_i, t_{cand_ij}) / tau)
// at the target position. `targets` holds one row per candidate column.
ag::Var similarity_loss(ag::Var outputs, ag::Var targets,
                        const std::vector<std::vector<std::size_t>>& candidates,
                        const std::vector<std::size_t>& target_pos, double temperature,
                        const std::vector<double>& weights);

// Gradient-tracked batch loss against codebook embeddings.
ag::Var masked_loss(ag::Var outputs, ag::Var embeddings, const std::vector<CandidateSet>& sets,
                    double temperature, const std::vector<double>& weights);

// Candidate sets for every masked frame of a batch of utterances.
struct MaskedTargets {
  std::vector<std::size_t> rows;  // row of each masked frame in the stacked batch
  std::vector<CandidateSet> sets;
  std::vector<double> weights;    // 1 / (masked frames in utterance * utterances)
  std::size_t fallbacks = 0;
};

MaskedTargets build_targets(Policy policy, const std::vector<MaskSpec>& masks,
                            std::span<const PseudoLabelSequence* const> labels, std::size_t vocab,
                            std::size_t k, Rng& rng);

}  // namespace issl
