// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Product quantizer trained with straight-through Gumbel softmax.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "issl/numcore/autograd.hpp"
#include "issl/numcore/rng.hpp"

namespace issl {

struct ProductQuantizer {
  std::size_t groups = 2;
  std::size_t entries = 32;       // V_g
  std::size_t codeword_dim = 0;   // concatenated width; each group holds codeword_dim / groups
  ag::Parameter logits_w, logits_b;  // in x G*V_g, 1 x G*V_g
  std::vector<ag::Parameter> codebooks;  // per group V_g x codeword_dim / groups
  double temperature = 2.0;

  // V_g^G, saturating at SIZE_MAX.
  std::size_t effective_vocab() const;
  std::vector<ag::Parameter*> parameters();
};

ProductQuantizer make_quantizer(std::size_t input_dim, std::size_t groups, std::size_t entries,
                                std::size_t codeword_dim, std::uint64_t seed);

struct QuantizeOutput {
  ag::Var embedding;   // N x codeword_dim, concatenated selected codewords
  ag::Var mean_probs;  // 1 x G*V_g, batch-averaged noise-free softmax
  std::vector<std::vector<int>> codes;  // N x G
};

// With `stochastic`, Gumbel noise is drawn from rng and the temperature is
// applied; otherwise codes are the noise-free argmax. With `hard` unset the
// embedding mixes codewords by the relaxed distribution instead.
QuantizeOutput quantize(ag::Graph& g, ag::Var frames, ProductQuantizer& q, Rng& rng,
                        bool stochastic, bool train, bool hard = true);

// One frame, evaluated outside any training graph.
struct FrameCode {
  std::vector<int> code;
  std::vector<double> embedding;
  std::vector<double> probs;  // G*V_g noise-free group softmax
};
FrameCode quantize_frame(std::span<const double> frame, const ProductQuantizer& q, Rng& rng,
                         bool stochastic);

// (G*V - sum_g exp(H(p_g))) / (G*V) for G x V rows. Throws ContractError if a
// row is not a probability vector within 1e-9.
double diversity_loss(const Matrix& mean_probs);

double combined_loss(double masked, double diversity, double alpha);

// Linear anneal from `start` at step 0 to `end` at step == total.
double gumbel_temperature(std::size_t step, std::size_t total, double start, double end);

}  // namespace issl
