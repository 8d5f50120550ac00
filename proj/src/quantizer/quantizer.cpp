// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/quantizer/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "issl/numcore/errors.hpp"

namespace issl {

std::size_t ProductQuantizer::effective_vocab() const {
  std::size_t v = 1;
  for (std::size_t g = 0; g < groups; ++g) {
    if (v > std::numeric_limits<std::size_t>::max() / entries)
      return std::numeric_limits<std::size_t>::max();
    v *= entries;
  }
  return v;
}

std::vector<ag::Parameter*> ProductQuantizer::parameters() {
  std::vector<ag::Parameter*> out{&logits_w, &logits_b};
  for (ag::Parameter& c : codebooks) out.push_back(&c);
  return out;
}

ProductQuantizer make_quantizer(std::size_t input_dim, std::size_t groups, std::size_t entries,
                                std::size_t codeword_dim, std::uint64_t seed) {
  if (groups < 1) throw ConfigError("quantizer: need at least one group");
  if (entries < 2) throw ConfigError("quantizer: need at least two entries per group");
  if (codeword_dim == 0 || codeword_dim % groups != 0)
    throw ConfigError("quantizer: codeword_dim " + std::to_string(codeword_dim) +
                      " must be a positive multiple of groups " + std::to_string(groups));
  Rng rng(seed);
  ProductQuantizer q;
  q.groups = groups;
  q.entries = entries;
  q.codeword_dim = codeword_dim;
  Matrix w(input_dim, groups * entries);
  const double ws = 1.0 / std::sqrt(static_cast<double>(input_dim));
  for (double& v : w.data()) v = ws * rng.normal();
  q.logits_w = {"quantizer.logits.w", std::move(w)};
  q.logits_b = {"quantizer.logits.b", Matrix(1, groups * entries)};
  const std::size_t part = codeword_dim / groups;
  for (std::size_t g = 0; g < groups; ++g) {
    Matrix c(entries, part);
    for (double& v : c.data()) v = rng.uniform(-1.0, 1.0);
    q.codebooks.emplace_back("quantizer.codebook" + std::to_string(g), std::move(c));
  }
  return q;
}

QuantizeOutput quantize(ag::Graph& g, ag::Var frames, ProductQuantizer& q, Rng& rng,
                        bool stochastic, bool train, bool hard) {
  if (stochastic && !(q.temperature > 0.0))
    throw ConfigError("quantizer: temperature must be positive");
  auto bind = [&](ag::Parameter& p) { return train ? g.param(p) : g.constant(p.value); };
  const std::size_t n = frames.rows();
  const std::size_t gv = q.groups * q.entries;
  ag::Var logits = ag::add_row(ag::matmul(frames, bind(q.logits_w)), bind(q.logits_b));
  Matrix noise(n, gv);
  if (stochastic)
    for (double& v : noise.data()) v = rng.gumbel();
  const double tau = stochastic ? q.temperature : 1.0;
  ag::Var onehot = ag::gumbel_softmax(logits, noise, tau, q.groups, hard);

  QuantizeOutput out;
  std::vector<ag::Var> parts;
  for (std::size_t gi = 0; gi < q.groups; ++gi)
    parts.push_back(ag::matmul(ag::slice_cols(onehot, gi * q.entries, q.entries),
                               bind(q.codebooks[gi])));
  out.embedding = ag::concat_cols(parts);
  out.mean_probs = ag::mean_rows(ag::group_softmax(logits, q.groups));

  // Codes are the per-group argmax of the perturbed logits, lowest index on ties.
  const Matrix& lv = logits.value();
  out.codes.assign(n, std::vector<int>(q.groups, 0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t gi = 0; gi < q.groups; ++gi) {
      std::size_t best = 0;
      for (std::size_t v = 1; v < q.entries; ++v) {
        const std::size_t c = gi * q.entries + v, b = gi * q.entries + best;
        if (lv(r, c) + noise(r, c) > lv(r, b) + noise(r, b)) best = v;
      }
      out.codes[r][gi] = static_cast<int>(best);
    }
  return out;
}

FrameCode quantize_frame(std::span<const double> frame, const ProductQuantizer& q, Rng& rng,
                         bool stochastic) {
  ag::Graph g;
  Matrix x(1, frame.size());
  std::copy(frame.begin(), frame.end(), x.row(0).begin());
  // Evaluation only reads parameter values.
  QuantizeOutput o =
      quantize(g, g.constant(std::move(x)), const_cast<ProductQuantizer&>(q), rng, stochastic, false);
  FrameCode fc;
  fc.code = o.codes[0];
  fc.embedding.assign(o.embedding.value().row(0).begin(), o.embedding.value().row(0).end());
  fc.probs.assign(o.mean_probs.value().row(0).begin(), o.mean_probs.value().row(0).end());
  return fc;
}

double diversity_loss(const Matrix& mean_probs) {
  const std::size_t G = mean_probs.rows(), V = mean_probs.cols();
  if (G == 0 || V == 0) throw ContractError("diversity_loss: empty usage statistics");
  double perplexity = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    double total = 0.0, h = 0.0;
    for (double p : mean_probs.row(g)) {
      if (!(p >= 0.0)) throw ContractError("diversity_loss: negative probability");
      total += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw ContractError("diversity_loss: group " + std::to_string(g) + " sums to " +
                          std::to_string(total));
    perplexity += std::exp(h);
  }
  const double gv = static_cast<double>(G * V);
  return (gv - perplexity) / gv;
}

double combined_loss(double masked, double diversity, double alpha) {
  if (alpha < 0.0) throw ConfigError("combined_loss: alpha must be non-negative");
  return masked + alpha * diversity;
}

double gumbel_temperature(std::size_t step, std::size_t total, double start, double end) {
  if (total == 0) return end;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return start + (end - start) * f;
}

}  // namespace issl
