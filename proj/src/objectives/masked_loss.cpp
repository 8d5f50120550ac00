// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/objectives/masked_loss.hpp"

#include <algorithm>
#include <cmath>

#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"

namespace issl {

Policy parse_policy(const std::string& s) {
  if (s == "predictive") return Policy::predictive;
  if (s == "contrastive") return Policy::contrastive;
  throw ConfigError("unknown objective policy '" + s + "' (expected predictive or contrastive)");
}

std::string to_string(Policy p) { return p == Policy::predictive ? "predictive" : "contrastive"; }

Codebook make_codebook(std::size_t vocab, std::size_t dim, double temperature,
                       std::uint64_t seed) {
  if (vocab < 2) throw ConfigError("codebook needs at least 2 labels");
  if (dim == 0) throw ConfigError("codebook dimension must be positive");
  if (!(temperature > 0.0)) throw ConfigError("codebook temperature must be positive");
  Rng rng(seed);
  Matrix e(vocab, dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : e.data()) v = s * rng.normal();
  return {ag::Parameter("codebook", std::move(e)), temperature};
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("cosine_sim: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine_sim: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

CandidateSet predictive_candidates(std::size_t vocab, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= vocab)
    throw ContractError("label " + std::to_string(target) + " outside vocabulary of " +
                        std::to_string(vocab));
  CandidateSet c;
  c.target = target;
  c.candidates.resize(vocab);
  for (std::size_t i = 0; i < vocab; ++i) c.candidates[i] = static_cast<int>(i);
  c.target_pos = static_cast<std::size_t>(target);
  return c;
}

CandidateSet contrastive_candidates(const MaskSpec& mask, const PseudoLabelSequence& labels,
                                    std::size_t t, std::size_t k, std::size_t vocab, Rng& rng,
                                    std::vector<std::size_t>* negative_frames, bool* fell_back) {
  if (t >= labels.size())
    throw ContractError("frame " + std::to_string(t) + " outside label sequence of " +
                        std::to_string(labels.size()));
  const auto& idx = mask.masked_indices;
  const auto it = std::lower_bound(idx.begin(), idx.end(), t);
  if (it == idx.end() || *it != t)
    throw ContractError("frame " + std::to_string(t) + " is not masked");
  const int target = labels.labels[t];
  if (negative_frames != nullptr) negative_frames->clear();
  if (fell_back != nullptr) *fell_back = false;
  if (idx.size() < 2) {
    log::debug("contrastive: frame ", t, " has no other masked frame, using all labels");
    if (fell_back != nullptr) *fell_back = true;
    return predictive_candidates(vocab, target);
  }
  const auto self = static_cast<std::size_t>(it - idx.begin());
  CandidateSet c;
  c.target = target;
  c.candidates.reserve(k + 1);
  for (std::size_t n = 0; n < k; ++n) {
    // Uniform over the other masked positions: skip over our own slot.
    auto j = static_cast<std::size_t>(rng.below(idx.size() - 1));
    if (j >= self) ++j;
    const std::size_t frame = idx[j];
    if (negative_frames != nullptr) negative_frames->push_back(frame);
    c.candidates.push_back(labels.labels[frame]);
  }
  c.candidates.push_back(target);
  c.target_pos = k;
  return c;
}

double masked_loss(std::span<const double> x, const CandidateSet& cand, const Codebook& cb) {
  if (cand.target_pos >= cand.candidates.size() || cand.candidates[cand.target_pos] != cand.target)
    throw ContractError("masked_loss: target " + std::to_string(cand.target) +
                        " is not in the candidate set");
  std::vector<double> logits;
  logits.reserve(cand.candidates.size());
  for (int c : cand.candidates) {
    if (c < 0 || static_cast<std::size_t>(c) >= cb.vocab_size())
      throw ContractError("masked_loss: candidate label " + std::to_string(c) + " out of range");
    logits.push_back(cosine_sim(x, cb.embeddings.value.row(static_cast<std::size_t>(c))) /
                     cb.temperature);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  // Same summation order as the batched path: ascending label.
  std::vector<std::size_t> order(logits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cand.candidates[a] < cand.candidates[b];
  });
  double z = 0.0;
  for (std::size_t i : order) z += std::exp(logits[i] - mx);
  return mx + std::log(z) - logits[cand.target_pos];
}

ag::Var similarity_loss(ag::Var outputs, ag::Var targets,
                        const std::vector<std::vector<std::size_t>>& candidates,
                        const std::vector<std::size_t>& target_pos, double temperature,
                        const std::vector<double>& weights) {
  if (!(temperature > 0.0)) throw ConfigError("similarity_loss: temperature must be positive");
  ag::Var sims = ag::matmul_nt(ag::normalize_rows(outputs), ag::normalize_rows(targets));
  return ag::candidate_cross_entropy(ag::scale(sims, 1.0 / temperature), candidates, target_pos,
                                     weights);
}

ag::Var masked_loss(ag::Var outputs, ag::Var embeddings, const std::vector<CandidateSet>& sets,
                    double temperature, const std::vector<double>& weights) {
  std::vector<std::vector<std::size_t>> cols(sets.size());
  std::vector<std::size_t> pos(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const CandidateSet& s = sets[i];
    if (s.target_pos >= s.candidates.size() || s.candidates[s.target_pos] != s.target)
      throw ContractError("masked_loss: target " + std::to_string(s.target) +
                          " is not in the candidate set of row " + std::to_string(i));
    cols[i].assign(s.candidates.begin(), s.candidates.end());
    pos[i] = s.target_pos;
  }
  return similarity_loss(outputs, embeddings, cols, pos, temperature, weights);
}

MaskedTargets build_targets(Policy policy, const std::vector<MaskSpec>& masks,
                            std::span<const PseudoLabelSequence* const> labels, std::size_t vocab,
                            std::size_t k, Rng& rng) {
  if (masks.size() != labels.size())
    throw ContractError("build_targets: " + std::to_string(masks.size()) + " masks for " +
                        std::to_string(labels.size()) + " label sequences");
  std::size_t active = 0;
  for (const MaskSpec& m : masks) active += m.empty() ? 0 : 1;
  MaskedTargets out;
  const std::uint64_t base = rng.next_u64();
  std::size_t offset = 0;
  for (std::size_t u = 0; u < masks.size(); ++u) {
    const MaskSpec& m = masks[u];
    const PseudoLabelSequence& lab = *labels[u];
    // Each utterance draws negatives from its own stream.
    Rng urng(mix_seed(base, u));
    for (std::size_t t : m.masked_indices) {
      if (t >= lab.size())
        throw ContractError("build_targets: masked frame " + std::to_string(t) +
                            " outside labels of length " + std::to_string(lab.size()));
      out.rows.push_back(offset + t);
      if (policy == Policy::predictive) {
        out.sets.push_back(predictive_candidates(vocab, lab.labels[t]));
      } else {
        bool fb = false;
        out.sets.push_back(contrastive_candidates(m, lab, t, k, vocab, urng, nullptr, &fb));
        out.fallbacks += fb ? 1 : 0;
      }
      out.weights.push_back(1.0 / (static_cast<double>(m.size()) * static_cast<double>(active)));
    }
    offset += lab.size();
  }
  return out;
}

}  // namespace issl
