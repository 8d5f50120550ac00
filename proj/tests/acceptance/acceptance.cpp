// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Criteria 6 and 7 train full models and take most of the time.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "issl/cca/cca.hpp"
#include "issl/cca/probe.hpp"
#include "issl/clustering/kmeans.hpp"
#include "issl/encoder/encoder.hpp"
#include "issl/numcore/log.hpp"
#include "issl/objectives/masked_loss.hpp"
#include "issl/pipeline/experiment.hpp"
#include "issl/quantizer/quantizer.hpp"

using namespace issl;
using issl::testing::max_gradient_error;
using issl::testing::max_parameter_error;
using issl::testing::random_matrix;
using issl::testing::relative_error;
using issl::testing::weighted_sum;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [failed]");
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

EncoderConfig grad_encoder() {
  EncoderConfig c;
  c.conv_layers = {{3, 4, 2}, {4, 3, 2}};
  c.model_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.final_proj_dim = 6;
  c.mask_span = 2;
  return c;
}

std::vector<double> noise_wave(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-0.8, 0.8);
  return w;
}

bool in_group(const std::string& name, std::initializer_list<const char*> suffixes) {
  const std::string tail = name.substr(name.find('.') + 1);
  return std::any_of(suffixes.begin(), suffixes.end(),
                     [&](const char* s) { return tail == s; });
}

Outcome criterion_gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  const int instances = 20;
  double conv = 0, attn = 0, attn_op = 0, ffn = 0, sim = 0, soft = 0, st = 0, div = 0;

  for (int s = 0; s < instances; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    Encoder enc(grad_encoder(), mix_seed(seed, "grad-encoder"));
    Rng rng(mix_seed(seed, "grad-waves"));
    const auto a = noise_wave(rng, 60), b = noise_wave(rng, 48);
    auto model = [&](ag::Graph& g) {
      const std::span<const double> waves[] = {a, b};
      ConvOutput c = enc.conv_encode(g, waves, true);
      Rng mrng(seed);
      std::vector<MaskSpec> masks = {sample_mask(c.segments[0], 0.2, 2, mrng), MaskSpec{}};
      EncoderOutput out = enc.forward(g, c, masks, true);
      return ag::add(weighted_sum(out.final_proj, seed), weighted_sum(out.layers[1], seed + 7));
    };
    auto conv_only = [&](ag::Graph& g) {
      const std::span<const double> waves[] = {a, b};
      return weighted_sum(enc.conv_encode(g, waves, true).features, seed);
    };
    std::vector<ag::Parameter*> pc, pa, pf;
    for (ag::Parameter* p : enc.parameters()) {
      if (p->name.rfind("conv", 0) == 0) pc.push_back(p);
      if (p->name.rfind("block", 0) == 0 && in_group(p->name, {"wq", "bq", "wk", "wv", "bv", "wo", "bo"}))
        pa.push_back(p);
      if (p->name.rfind("block", 0) == 0 && in_group(p->name, {"w1", "b1", "w2", "b2"}))
        pf.push_back(p);
    }
    conv = std::max(conv, max_parameter_error(conv_only, pc));
    attn = std::max(attn, max_parameter_error(model, pa));
    ffn = std::max(ffn, max_parameter_error(model, pf));

    // The attention operator itself, on inputs.
    {
      Rng r(mix_seed(seed, "grad-attention"));
      const std::size_t heads = 1 + r.below(2), d = 2 * heads + 2 * heads * r.below(2);
      const std::size_t t1 = 1 + r.below(5), t2 = 1 + r.below(5);
      auto fn = [&](ag::Graph&, const std::vector<ag::Var>& v) {
        return weighted_sum(ag::segment_attention(v[0], v[1], v[2], {t1, t2}, heads), seed);
      };
      attn_op = std::max(attn_op, max_gradient_error(fn, {random_matrix(r, t1 + t2, d),
                                                          random_matrix(r, t1 + t2, d),
                                                          random_matrix(r, t1 + t2, d)}));
    }

    // Codebook similarity loss, against outputs and embeddings.
    {
      Rng r(mix_seed(seed, "grad-similarity"));
      const std::size_t V = 3 + r.below(10), E = 2 + r.below(6), M = 1 + r.below(5);
      const double tau = r.uniform(0.1, 1.0);
      std::vector<CandidateSet> sets;
      std::vector<double> w;
      for (std::size_t i = 0; i < M; ++i) {
        if (s % 2 == 0) {
          sets.push_back(predictive_candidates(V, static_cast<int>(r.below(V))));
        } else {
          CandidateSet c;
          c.target = static_cast<int>(r.below(V));
          for (int k = 0; k < 6; ++k) c.candidates.push_back(static_cast<int>(r.below(V)));
          c.candidates.push_back(c.target);
          c.target_pos = 6;
          sets.push_back(c);
        }
        w.push_back(r.uniform(0.1, 1.0));
      }
      auto fn = [&](ag::Graph&, const std::vector<ag::Var>& in) {
        return masked_loss(in[0], in[1], sets, tau, w);
      };
      sim = std::max(sim, max_gradient_error(fn, {random_matrix(r, M, E), random_matrix(r, V, E)}));
    }

    // Quantizer: relaxed path exactly, straight-through against the relaxed
    // finite differences with the same noise.
    {
      ProductQuantizer q = make_quantizer(4, 2, 5, 6, mix_seed(seed, "grad-quantizer"));
      q.temperature = 0.5 + 0.1 * static_cast<double>(s % 10);
      Rng r(mix_seed(seed, "grad-frames"));
      const Matrix x = random_matrix(r, 6, 4);
      auto run = [&](ag::Graph& g, bool hard) {
        Rng noise(mix_seed(seed, "grad-gumbel"));
        return weighted_sum(quantize(g, g.constant(x), q, noise, true, true, hard).embedding, seed);
      };
      soft = std::max(soft, max_parameter_error([&](ag::Graph& g) { return run(g, false); },
                                                q.parameters()));
      q.logits_w.zero_grad();
      {
        ag::Graph g;
        g.backward(run(g, true));
      }
      const Matrix analytic = q.logits_w.grad;
      Matrix fd(analytic.rows(), analytic.cols());
      const double h = 1e-5;
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double orig = q.logits_w.value.data()[i];
        q.logits_w.value.data()[i] = orig + h;
        ag::Graph g1;
        const double up = run(g1, false).value()(0, 0);
        q.logits_w.value.data()[i] = orig - h;
        ag::Graph g2;
        const double down = run(g2, false).value()(0, 0);
        q.logits_w.value.data()[i] = orig;
        fd.data()[i] = (up - down) / (2 * h);
      }
      st = std::max(st, relative_error(analytic, fd));
    }

    // Diversity loss through the group softmax.
    {
      Rng r(mix_seed(seed, "grad-diversity"));
      const std::size_t G = 1 + r.below(3), V = 2 + r.below(8), N = 1 + r.below(6);
      auto fn = [&](ag::Graph&, const std::vector<ag::Var>& v) {
        return ag::diversity_loss(ag::mean_rows(ag::group_softmax(v[0], G)), G);
      };
      div = std::max(div, max_gradient_error(fn, {random_matrix(r, N, G * V)}));
    }
  }
  const double secs = seconds_since(t0);
  o.require(conv <= 1e-4, "conv " + fmt("%.1e", conv));
  o.require(attn <= 1e-4, "attention params " + fmt("%.1e", attn));
  o.require(attn_op <= 1e-4, "attention op " + fmt("%.1e", attn_op));
  o.require(ffn <= 1e-4, "ffn " + fmt("%.1e", ffn));
  o.require(sim <= 1e-4, "codebook similarity " + fmt("%.1e", sim));
  o.require(soft <= 1e-4, "quantizer soft " + fmt("%.1e", soft));
  o.require(st <= 1e-3, "straight-through " + fmt("%.1e", st));
  o.require(div <= 1e-4, "diversity " + fmt("%.1e", div));
  o.require(secs < 120.0, std::to_string(instances) + " instances each in " + fmt("%.1f s", secs));
  return o;
}

// ---------------------------------------------------------------------------
// 2. Loss identities

// Softmax cross-entropy over every class with cosine logits, written out.
double full_softmax_ce(const std::vector<double>& x, const Matrix& emb, int target, double tau) {
  double nx = 0.0;
  for (double v : x) nx += v * v;
  nx = std::sqrt(nx);
  std::vector<double> z(emb.rows());
  for (std::size_t c = 0; c < emb.rows(); ++c) {
    double dot = 0.0, ne = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * emb(c, i), ne += emb(c, i) * emb(c, i);
    z[c] = dot / (nx * std::sqrt(ne)) / tau;
  }
  double lse = 0.0;
  for (double v : z) lse += std::exp(v);
  return std::log(lse) - z[static_cast<std::size_t>(target)];
}

std::vector<double> normal_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Outcome criterion_losses() {
  Outcome o;
  Rng rng(mix_seed(2, "losses"));
  double uniform = 0.0;
  for (std::size_t V : {2u, 5u, 17u, 100u, 500u}) {
    Codebook cb = make_codebook(V, 8, 0.1, V);
    const auto row = normal_vec(rng, 8);
    for (std::size_t c = 0; c < V; ++c)
      std::copy(row.begin(), row.end(), cb.embeddings.value.row(c).begin());
    const auto x = normal_vec(rng, 8);
    uniform = std::max(uniform, std::abs(masked_loss(x, predictive_candidates(V, 1), cb) -
                                         std::log(static_cast<double>(V))));
  }
  o.require(uniform <= 1e-9, "uniform similarity vs log|C| " + fmt("%.1e", uniform));

  Codebook cb1 = make_codebook(4, 3, 0.1, 1);
  const double single = masked_loss(std::vector<double>{1, 2, 3}, CandidateSet{2, {2}, 0}, cb1);
  o.require(single == 0.0, "|C|=1 loss " + fmt("%g", single));

  double ce = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t V = 2 + rng.below(200), E = 2 + rng.below(20);
    const double tau = rng.uniform(0.05, 2.0);
    Codebook cb = make_codebook(V, E, tau, static_cast<std::uint64_t>(trial));
    const auto x = normal_vec(rng, E);
    const int c = static_cast<int>(rng.below(V));
    ce = std::max(ce, std::abs(masked_loss(x, predictive_candidates(V, c), cb) -
                               full_softmax_ce(x, cb.embeddings.value, c, tau)));
  }
  o.require(ce <= 1e-9, "predictive vs full-softmax oracle " + fmt("%.1e", ce));

  std::size_t mismatches = 0, cases = 0;
  for (std::size_t V = 2; V <= 16; ++V) {
    Codebook cb = make_codebook(V, 6, 0.1, V);
    const auto x = normal_vec(rng, 6);
    for (int c = 0; c < static_cast<int>(V); ++c) {
      CandidateSet contrastive;
      contrastive.target = c;
      for (int other = static_cast<int>(V) - 1; other >= 0; --other)
        if (other != c) contrastive.candidates.push_back(other);
      contrastive.candidates.push_back(c);
      contrastive.target_pos = V - 1;
      ++cases;
      if (masked_loss(x, contrastive, cb) != masked_loss(x, predictive_candidates(V, c), cb))
        ++mismatches;
    }
  }
  o.require(mismatches == 0, "contrastive == predictive exactly in " +
                                 std::to_string(cases - mismatches) + "/" + std::to_string(cases) +
                                 " cases (V <= 16)");
  return o;
}

// ---------------------------------------------------------------------------
// 3. CCA oracle suite

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

// Canonical correlations from Sxy (Syy + ey I)^-1 Syx v = rho^2 (Sxx + ex I) v.
std::vector<double> oracle_correlations(const Matrix& X, const Matrix& Y, double ex, double ey) {
  Eigen::MatrixXd x = to_eigen(X), y = to_eigen(Y);
  x.rowwise() -= x.colwise().mean();
  y.rowwise() -= y.colwise().mean();
  const double n1 = static_cast<double>(X.rows() - 1);
  Eigen::MatrixXd sxx = x.transpose() * x / n1, syy = y.transpose() * y / n1;
  const Eigen::MatrixXd sxy = x.transpose() * y / n1;
  sxx.diagonal().array() += ex;
  syy.diagonal().array() += ey;
  const Eigen::MatrixXd a = sxy * syy.llt().solve(sxy.transpose());
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(a, sxx);
  std::vector<double> rho;
  for (Eigen::Index i = 0; i < ges.eigenvalues().size(); ++i)
    rho.push_back(std::sqrt(std::max(0.0, ges.eigenvalues()(i))));
  std::sort(rho.rbegin(), rho.rend());
  rho.resize(std::min(X.cols(), Y.cols()));
  return rho;
}

Matrix prototype_mixture(Rng& rng, const std::vector<int>& labels, std::size_t dim,
                         double noise) {
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  const Matrix proto = random_matrix(rng, static_cast<std::size_t>(k), dim);
  Matrix x(labels.size(), dim);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < dim; ++c)
      x(i, c) = proto(static_cast<std::size_t>(labels[i]), c) + noise * rng.normal();
  return x;
}

Outcome criterion_cca() {
  Outcome o;
  Rng rng(mix_seed(3, "cca"));
  double oracle = 0.0, ones = 0.0, invariance = 0.0;
  double lo = 1.0, hi = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t dx = 1 + rng.below(10), dy = 1 + rng.below(6);
    const std::size_t n = 3 * (dx + dy) + rng.below(200 - 3 * (dx + dy) + 1);
    const Matrix x = random_matrix(rng, n, dx);
    Matrix y = matmul(x, random_matrix(rng, dx, dy));
    const double noise = 0.5 + 2.0 * rng.uniform();
    for (double& v : y.data()) v += noise * rng.normal();
    const double ex = inst % 2 == 0 ? 0.0 : 1e-3, ey = inst % 3 == 0 ? 0.0 : 1e-2;
    const CCAModel m = cca_fit(x, y, ex, ey);
    const std::vector<double> ref = oracle_correlations(x, y, ex, ey);
    for (std::size_t i = 0; i < ref.size(); ++i)
      oracle = std::max(oracle, std::abs(m.correlations[i] - ref[i]));

    const double score = pwcca_score(m, x);
    lo = std::min(lo, score), hi = std::max(hi, score);

    const CCAModel self = cca_fit(x, x, 0.0, 0.0);
    for (double r : self.correlations) ones = std::max(ones, std::abs(r - 1.0));

    Matrix a = random_matrix(rng, dx, dx);
    for (std::size_t i = 0; i < dx; ++i) a(i, i) += 3.0;
    const CCAModel m0 = cca_fit(x, y, 0.0, 0.0), mt = cca_fit(matmul(x, a), y, 0.0, 0.0);
    for (std::size_t i = 0; i < m0.size(); ++i)
      invariance = std::max(invariance, std::abs(m0.correlations[i] - mt.correlations[i]));
  }
  o.require(oracle <= 1e-8, "generalized eigensolver oracle, 100 instances " + fmt("%.1e", oracle));
  o.require(ones <= 1e-8, "Y = X gives rho = 1 " + fmt("%.1e", ones));
  o.require(invariance <= 1e-8, "invertible transform invariance " + fmt("%.1e", invariance));
  o.require(lo >= 0.0 && hi <= 1.0, "pwcca in [" + fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "]");

  // Permutation null: vectors that do encode the labels, scored against a
  // shuffled copy of them.
  std::vector<int> labels;
  for (int i = 0; i < 2400; ++i) labels.push_back(static_cast<int>(rng.below(10)));
  const std::vector<Matrix> layers = {prototype_mixture(rng, labels, 10, 0.5)};
  std::vector<int> shuffled = labels;
  rng.shuffle(std::span<int>(shuffled));
  ProbeConfig cfg;
  const double null_score = cca_evaluate(layers, shuffled, Unit::speaker, cfg, 6).layer_means[0];
  const double real_score = cca_evaluate(layers, labels, Unit::speaker, cfg, 6).layer_means[0];
  o.require(null_score <= 0.1, "permutation null at n = 2400 " + fmt("%.4f", null_score) +
                                   " (unpermuted " + fmt("%.3f", real_score) + ")");
  return o;
}

// ---------------------------------------------------------------------------
// 4. Protocol conformance

Outcome criterion_protocol() {
  Outcome o;
  Rng rng(mix_seed(4, "protocol"));
  const SamplingCaps caps;
  std::vector<int> phones;
  for (int t = 0; t < 50; ++t)
    for (int i = 0; i < 220 + 3 * t; ++i) phones.push_back(t);
  rng.shuffle(std::span<int>(phones));
  const auto p = sample_pool(phones, Unit::phoneme, caps, rng);
  std::map<int, std::size_t> pc;
  for (std::size_t i : p) pc[phones[i]]++;
  bool per_type = pc.size() == 39;
  for (auto [label, c] : pc) per_type = per_type && c == 200 && label >= 11;
  o.require(p.size() == 7800 && per_type,
            "phoneme pool " + std::to_string(p.size()) + " tokens over " +
                std::to_string(pc.size()) + " types, 200 each");

  std::vector<int> words;
  for (int t = 0; t < 700; ++t)
    for (int i = 0; i < 16 + (t % 7); ++i) words.push_back(t);
  rng.shuffle(std::span<int>(words));
  const auto w = sample_pool(words, Unit::word, caps, rng);
  std::map<int, std::size_t> wc;
  for (std::size_t i : w) wc[words[i]]++;
  bool word_types = wc.size() == 500;
  for (auto [label, c] : wc) word_types = word_types && c == 15;
  o.require(w.size() == 7500 && word_types,
            "word pool " + std::to_string(w.size()) + " tokens over " +
                std::to_string(wc.size()) + " types, 15 each");

  // Nine fits per reported score.
  std::vector<int> labels;
  for (int i = 0; i < 900; ++i) labels.push_back(static_cast<int>(rng.below(12)));
  const std::vector<Matrix> layers = {prototype_mixture(rng, labels, 6, 1.0),
                                      prototype_mixture(rng, labels, 6, 2.0)};
  const ProbeResult r = cca_evaluate(layers, labels, Unit::phoneme, ProbeConfig{}, 1);
  bool nine = r.fits.size() == 18 && r.layer_means.size() == 2;
  for (std::size_t l = 0; nine && l < 2; ++l) {
    double s = 0.0;
    std::set<std::size_t> idx;
    for (std::size_t f = 0; f < 9; ++f) {
      const FitRecord& fr = r.fits[l * 9 + f];
      nine = nine && fr.layer == l;
      idx.insert(fr.sample_index * 3 + fr.split_index);
      s += fr.score;
    }
    nine = nine && idx.size() == 9 && std::abs(r.layer_means[l] - s / 9.0) <= 1e-15;
  }
  o.require(nine, "each layer score is the mean of 9 fits (3 samples x 3 splits)");

  // Hand-computed middle thirds, as [first, last) frame offsets.
  const std::pair<std::size_t, std::size_t> expect[] = {
      {0, 1}, {1, 2}, {1, 2}, {1, 3}, {1, 4}, {2, 4}, {2, 5}, {2, 6}, {3, 6}, {3, 7}};
  std::size_t good = 0;
  for (std::size_t len = 1; len <= 10; ++len) good += middle_third(len) == expect[len - 1] ? 1 : 0;
  // And through pooling: frame value = its index.
  Matrix ramp(10, 1);
  for (std::size_t t = 0; t < 10; ++t) ramp(t, 0) = static_cast<double>(t);
  for (std::size_t len = 1; len <= 10; ++len) {
    const auto [a, b] = expect[len - 1];
    const double mean = (static_cast<double>(a) + static_cast<double>(b - 1)) / 2.0;
    good += pool_token(ramp, 0, len, Unit::phoneme)[0] == mean ? 1 : 0;
  }
  o.require(good == 20, "middle-third spans for lengths 1-10: " + std::to_string(good) + "/20");
  return o;
}

// ---------------------------------------------------------------------------
// 5. k-means

Outcome criterion_kmeans() {
  Outcome o;
  std::size_t monotone = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(mix_seed(seed, "kmeans-acceptance"));
    const std::size_t n = 20 + rng.below(300), d = 1 + rng.below(8), k = 1 + rng.below(15);
    const Matrix p = random_matrix(rng, n, d);
    const Centroids c = kmeans_fit(p, k, seed);
    bool ok = !c.inertia_history.empty();
    for (std::size_t i = 1; i < c.inertia_history.size(); ++i)
      ok = ok && c.inertia_history[i] <= c.inertia_history[i - 1];
    monotone += ok ? 1 : 0;
  }
  o.require(monotone == 50, "inertia non-increasing on " + std::to_string(monotone) + "/50");

  Matrix pts{{0.0, 1.0}, {0.0, -1.0}, {0.0, 0.0}, {20.0, 6.0}, {22.0, 6.0}};
  bool exact = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Centroids c = kmeans_fit(pts, 2, seed);
    const auto lab = assign(pts, c).labels;
    const auto a = static_cast<std::size_t>(lab[0]), b = static_cast<std::size_t>(lab[3]);
    exact = exact && a != b && lab[1] == lab[0] && lab[2] == lab[0] && lab[4] == lab[3] &&
            c.means(a, 0) == 0.0 && c.means(a, 1) == 0.0 && c.means(b, 0) == 21.0 &&
            c.means(b, 1) == 6.0;
  }
  o.require(exact, "separable two-cluster case recovers (0,0) and (21,6) exactly");
  return o;
}

// ---------------------------------------------------------------------------
// 6. Trend reproduction

struct SeedTrends {
  bool a = false, b = false, c = false, d = false;
  std::string numbers;
};

SeedTrends trends_for(const std::vector<ReportRow>& rows) {
  auto m = [&](const char* id, Unit u) { return final_layers_mean(rows, id, u); };
  SeedTrends t;
  t.a = true;
  t.b = true;
  for (const char* obj : {"predictive", "contrastive"}) {
    const std::string i1 = std::string("iter1-") + obj, i2 = std::string("iter2-") + obj;
    t.a = t.a && m(i2.c_str(), Unit::phoneme) > m(i1.c_str(), Unit::phoneme) &&
          m(i2.c_str(), Unit::word) > m(i1.c_str(), Unit::word);
    t.b = t.b && m(i2.c_str(), Unit::speaker) < m(i1.c_str(), Unit::speaker);
  }
  const double wp1 = m("iter1-predictive", Unit::word), wc1 = m("iter1-contrastive", Unit::word);
  const double wp2 = m("iter2-predictive", Unit::word), wc2 = m("iter2-contrastive", Unit::word);
  const double objective_gap = std::max(std::abs(wp1 - wc1), std::abs(wp2 - wc2));
  const double iteration_gap = std::min(std::abs(wp2 - wp1), std::abs(wc2 - wc1));
  t.c = objective_gap < iteration_gap;
  // The quantizer model sits nearer the first-iteration mean than the
  // second-iteration mean on both phoneme and word scores.
  t.d = true;
  for (Unit u : {Unit::phoneme, Unit::word}) {
    const double q = m("quantizer", u);
    const double it1 = (m("iter1-predictive", u) + m("iter1-contrastive", u)) / 2;
    const double it2 = (m("iter2-predictive", u) + m("iter2-contrastive", u)) / 2;
    t.d = t.d && std::abs(q - it1) < std::abs(q - it2);
  }
  char buf[512];
  std::snprintf(
      buf, sizeof buf,
      "phone p %.3f->%.3f c %.3f->%.3f q %.3f | word p %.3f->%.3f c %.3f->%.3f q %.3f | "
      "spk p %.3f->%.3f c %.3f->%.3f q %.3f r %.3f",
      m("iter1-predictive", Unit::phoneme), m("iter2-predictive", Unit::phoneme),
      m("iter1-contrastive", Unit::phoneme), m("iter2-contrastive", Unit::phoneme),
      m("quantizer", Unit::phoneme), wp1, wp2, wc1, wc2, m("quantizer", Unit::word),
      m("iter1-predictive", Unit::speaker), m("iter2-predictive", Unit::speaker),
      m("iter1-contrastive", Unit::speaker), m("iter2-contrastive", Unit::speaker),
      m("quantizer", Unit::speaker), m("random", Unit::speaker));
  t.numbers = buf;
  return t;
}

struct TrendOutcomes {
  Outcome a, b, c, d, runtime, protocol;
};

TrendOutcomes criterion_trends(const fs::path& work, const std::vector<std::uint64_t>& seeds,
                               std::size_t updates) {
  TrendOutcomes out;
  const auto t0 = Clock::now();
  int na = 0, nb = 0, nc = 0, nd = 0;
  std::string sa, sb, sc, sd;
  bool nine = true;
  for (std::uint64_t seed : seeds) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.total_updates = updates;
    const auto ts = Clock::now();
    const ExperimentResult r = run_experiment(cfg, work / ("trend-seed" + std::to_string(seed)));
    const SeedTrends t = trends_for(r.rows);
    std::printf("  seed %llu (%.0f s): %s\n", static_cast<unsigned long long>(seed),
                seconds_since(ts), t.numbers.c_str());
    std::fflush(stdout);
    auto mark = [&](bool ok, int& n, std::string& s) {
      n += ok ? 1 : 0;
      s += std::string(s.empty() ? "" : " ") + (ok ? "+" : "-");
    };
    mark(t.a, na, sa);
    mark(t.b, nb, sb);
    mark(t.c, nc, sc);
    mark(t.d, nd, sd);
    // Every summary value is the mean of nine report rows.
    std::map<std::tuple<std::string, int, std::size_t>, std::pair<double, int>> acc;
    for (const ReportRow& row : r.rows) {
      auto& e = acc[{row.model_id, static_cast<int>(row.unit), row.fit.layer}];
      e.first += row.fit.score;
      e.second += 1;
    }
    for (const auto& [k, v] : acc) nine = nine && v.second == 9;
  }
  const int need = static_cast<int>((2 * seeds.size() + 2) / 3);
  auto verdict = [&](Outcome& o, int n, const std::string& s, const std::string& what) {
    o.require(n >= need, what + ": holds in " + std::to_string(n) + "/" +
                             std::to_string(seeds.size()) + " seeds (" + s + ")");
  };
  verdict(out.a, na, sa, "iteration 2 > iteration 1 on phoneme and word, both objectives");
  verdict(out.b, nb, sb, "iteration 2 < iteration 1 on speaker, both objectives");
  verdict(out.c, nc, sc, "word |objective gap| < |iteration gap|");
  verdict(out.d, nd, sd, "quantizer baseline closer to iteration 1 than iteration 2");
  const double secs = seconds_since(t0);
  out.runtime.require(secs < 7200.0, std::to_string(seeds.size()) + " seeds x " +
                                         std::to_string(updates) + " updates/iteration in " +
                                         fmt("%.0f s", secs) + " (target 7200 s)");
  out.protocol.require(nine, "every (model, unit, layer) of every report has 9 fits");
  return out;
}

// ---------------------------------------------------------------------------
// 7. Determinism

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome criterion_determinism(const fs::path& work) {
  Outcome o;
  RunConfig cfg;
  cfg.seed = 7;
  cfg.total_updates = 100;
  cfg.synth.utterances_per_speaker = 10;
  const fs::path a = work / "determinism-a", b = work / "determinism-b";
  const ExperimentResult ra = run_experiment(cfg, a);
  const ExperimentResult rb = run_experiment(cfg, b);
  std::size_t files = 0, same = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (entry.path().extension() != ".csv") continue;
    const fs::path other = b / fs::relative(entry.path(), a);
    ++files;
    same += fs::exists(other) && slurp(entry.path()) == slurp(other) ? 1 : 0;
  }
  o.require(files > 2 && same == files, std::to_string(same) + "/" + std::to_string(files) +
                                            " CSV files byte-identical across two runs (" +
                                            std::to_string(ra.rows.size()) + " report rows)");
  o.require(slurp(ra.manifest_json) == slurp(rb.manifest_json), "manifests identical");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t updates = 5000;
  bool keep = false;
  app.add_option("--work-dir", work, "scratch directory for experiment runs")->capture_default_str();
  app.add_option("--only", only, "criterion numbers to run (default all)");
  app.add_option("--seeds", seeds, "seeds for the trend criterion")->capture_default_str();
  app.add_option("--updates", updates, "updates per iteration for the trend criterion")
      ->capture_default_str();
  app.add_flag("--keep", keep, "reuse finished stages from an earlier run in --work-dir");
  CLI11_PARSE(app, argc, argv);

  log::set_level(log::Level::kWarn);
  const fs::path wd = fs::absolute(work);
  if (!keep) fs::remove_all(wd);
  fs::create_directories(wd);

  auto wanted = [&](int n) { return only.empty() || std::count(only.begin(), only.end(), n) > 0; };
  int failures = 0;
  auto report = [&](const std::string& id, const std::string& name, const Outcome& o) {
    std::printf("%s %s %s: %s\n", o.pass ? "PASS" : "FAIL", id.c_str(), name.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };
  auto guarded = [&](const std::string& id, const std::string& name,
                     const std::function<Outcome()>& fn) {
    try {
      report(id, name, fn());
    } catch (const std::exception& e) {
      report(id, name, Outcome{false, std::string("exception: ") + e.what()});
    }
  };

  if (wanted(1)) guarded("1", "gradient suite", criterion_gradients);
  if (wanted(2)) guarded("2", "loss identities", criterion_losses);
  if (wanted(3)) guarded("3", "CCA oracle suite", criterion_cca);
  if (wanted(4)) guarded("4", "protocol conformance", criterion_protocol);
  if (wanted(5)) guarded("5", "k-means", criterion_kmeans);
  if (wanted(6)) {
    try {
      const TrendOutcomes t = criterion_trends(wd, seeds, updates);
      report("6a", "trend: later iteration gains phoneme/word", t.a);
      report("6b", "trend: later iteration loses speaker", t.b);
      report("6c", "trend: iteration matters more than objective", t.c);
      report("6d", "trend: quantizer patterns with iteration 1", t.d);
      report("6-runtime", "trend runtime", t.runtime);
      report("4-report", "protocol conformance in experiment reports", t.protocol);
    } catch (const std::exception& e) {
      report("6", "trend reproduction", Outcome{false, std::string("exception: ") + e.what()});
    }
  }
  if (wanted(7)) guarded("7", "determinism", [&] { return criterion_determinism(wd); });

  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
