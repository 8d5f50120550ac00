// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "gradcheck.hpp"
#include "issl/encoder/encoder.hpp"
#include "issl/numcore/errors.hpp"

using namespace issl;
using issl::testing::max_parameter_error;
using issl::testing::weighted_sum;

namespace {

EncoderConfig tiny_config() {
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

std::vector<double> noise(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-0.8, 0.8);
  return w;
}

// Output length of one strided valid convolution, written out directly.
std::size_t valid_len(std::size_t n, std::size_t k, std::size_t s) {
  return n < k ? 0 : 1 + (n - k) / s;
}

// Probability that a frame stays unmasked when n starts are drawn without
// replacement from N positions and w of them would cover it.
double unmasked_probability(std::size_t N, std::size_t n, std::size_t w) {
  double p = 1.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (N - j <= w) return 0.0;
    p *= static_cast<double>(N - w - j) / static_cast<double>(N - j);
  }
  return p;
}

}  // namespace

TEST_CASE("zero waveform gives a bias-only conv response") {
  Encoder enc(EncoderConfig{}, 1);
  ag::Graph g;
  std::vector<double> zero(1600, 0.0);
  const std::span<const double> waves[] = {zero};
  ConvOutput out = enc.conv_encode(g, waves, false);
  const Matrix& f = out.features.value();
  REQUIRE(f.rows() == 98);
  for (std::size_t t = 1; t < f.rows(); ++t)
    for (std::size_t c = 0; c < f.cols(); ++c) CHECK(f(t, c) == f(0, c));
}

TEST_CASE("frame count follows stride arithmetic") {
  const EncoderConfig cfg;
  CHECK(cfg.total_stride() == 16);
  CHECK(cfg.receptive_field() == 40);
  Encoder enc(tiny_config(), 2);
  Rng rng(3);
  for (std::size_t n = 100; n <= 200; ++n) {
    std::size_t expect = n;
    for (const ConvSpec& c : cfg.conv_layers) expect = valid_len(expect, c.kernel, c.stride);
    CHECK(cfg.frame_count(n) == expect);
    // With the default stack this equals a 40-sample window at a 16-sample hop.
    CHECK(cfg.frame_count(n) == (n - 40) / 16 + 1);

    ag::Graph g;
    const auto w = noise(rng, n);
    const std::span<const double> waves[] = {w};
    CHECK(enc.conv_encode(g, waves, false).features.rows() == enc.config().frame_count(n));
  }
}

TEST_CASE("conv stack gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Encoder enc(tiny_config(), seed);
    Rng rng(100 + seed);
    const auto a = noise(rng, 40);
    const auto b = noise(rng, 33);
    auto fn = [&](ag::Graph& g) {
      const std::span<const double> waves[] = {a, b};
      return weighted_sum(enc.conv_encode(g, waves, true).features, seed);
    };
    std::vector<ag::Parameter*> conv_params;
    for (ag::Parameter* p : enc.parameters())
      if (p->name.rfind("conv", 0) == 0 || p->name.rfind("feat_ln", 0) == 0)
        conv_params.push_back(p);
    CHECK(max_parameter_error(fn, conv_params) <= 1e-4);
  }
}

TEST_CASE("full model gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Encoder enc(tiny_config(), seed);
    Rng rng(200 + seed);
    const auto a = noise(rng, 60);
    const auto b = noise(rng, 48);
    auto fn = [&](ag::Graph& g) {
      const std::span<const double> waves[] = {a, b};
      ConvOutput conv = enc.conv_encode(g, waves, true);
      Rng mrng(seed);
      std::vector<MaskSpec> masks = {sample_mask(conv.segments[0], 0.2, 2, mrng), MaskSpec{}};
      EncoderOutput out = enc.forward(g, conv, masks, true);
      return ag::add(weighted_sum(out.final_proj, seed),
                     weighted_sum(out.layers[1], seed + 7));
    };
    CHECK(max_parameter_error(fn, enc.parameters()) <= 1e-4);
  }
}

TEST_CASE("zeroed block outputs make every layer an identity") {
  Encoder enc(EncoderConfig{}, 4);
  enc.zero_block_outputs();
  Rng rng(5);
  const LayerActivations acts = enc.extract(noise(rng, 2000));
  REQUIRE(acts.layers.size() == 7);
  for (std::size_t l = 1; l < acts.layers.size(); ++l) CHECK(acts.layers[l] == acts.layers[0]);
}

TEST_CASE("attention rows are probability distributions") {
  Encoder enc(EncoderConfig{}, 6);
  Rng rng(7);
  const auto a = noise(rng, 1200);
  const auto b = noise(rng, 900);
  ag::Graph g;
  const std::span<const double> waves[] = {a, b};
  ConvOutput conv = enc.conv_encode(g, waves, false);
  std::vector<std::vector<Matrix>> attn;
  enc.forward(g, conv, {MaskSpec{}, MaskSpec{}}, false, &attn);
  REQUIRE(attn.size() == 6);
  for (const auto& layer : attn) {
    REQUIRE(layer.size() == 2 * 4);
    for (const Matrix& p : layer)
      for (std::size_t r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (double v : p.row(r)) {
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
  }
}

TEST_CASE("batched utterances do not leak into each other") {
  Encoder enc(EncoderConfig{}, 8);
  Rng rng(9);
  const auto a = noise(rng, 1000);
  const auto b = noise(rng, 1400);
  auto run = [&](bool swap) {
    ag::Graph g;
    std::vector<std::span<const double>> waves = {a, b};
    if (swap) std::swap(waves[0], waves[1]);
    ConvOutput conv = enc.conv_encode(g, waves, false);
    return enc.forward(g, conv, {MaskSpec{}, MaskSpec{}}, false).final_proj.value();
  };
  const Matrix ab = run(false);
  const Matrix ba = run(true);
  const std::size_t ta = enc.config().frame_count(a.size());
  const std::size_t tb = enc.config().frame_count(b.size());
  REQUIRE(ab.rows() == ta + tb);
  // Row blocks may differ in the last bits because GEMM kernels round
  // differently depending on the row offset.
  CHECK(max_abs_diff(slice_rows(ab, 0, ta), slice_rows(ba, tb, ta + tb)) <= 1e-12);
  CHECK(max_abs_diff(slice_rows(ab, ta, ta + tb), slice_rows(ba, 0, tb)) <= 1e-12);
  CHECK(max_abs_diff(slice_rows(ab, 0, ta), enc.extract(a).final_proj) <= 1e-12);
}

TEST_CASE("empty mask equals the unmasked pass exactly") {
  Encoder enc(EncoderConfig{}, 10);
  Rng rng(11);
  const auto a = noise(rng, 1500);
  const LayerActivations ref = enc.extract(a);
  ag::Graph g;
  const std::span<const double> waves[] = {a};
  ConvOutput conv = enc.conv_encode(g, waves, true);
  EncoderOutput out = enc.forward(g, conv, {MaskSpec{}}, true);
  REQUIRE(out.layers.size() == ref.layers.size());
  for (std::size_t l = 0; l < ref.layers.size(); ++l) CHECK(out.layers[l].value() == ref.layers[l]);
  CHECK(out.final_proj.value() == ref.final_proj);
  CHECK(ref.final_proj.cols() == 256);
  CHECK(ref.num_frames() == enc.config().frame_count(1500));
}

TEST_CASE("masked frames change the masked rows") {
  Encoder enc(EncoderConfig{}, 12);
  Rng rng(13);
  const auto a = noise(rng, 1500);
  ag::Graph g;
  const std::span<const double> waves[] = {a};
  ConvOutput conv = enc.conv_encode(g, waves, false);
  MaskSpec m;
  m.masked_indices = {3, 4};
  m.spans = {{3, 2}};
  EncoderOutput out = enc.forward(g, conv, {m}, false);
  const Matrix pos = sinusoidal_positions(out.layers[0].rows(), 64);
  const Matrix& x0 = out.layers[0].value();
  for (std::size_t t : {3u, 4u}) {
    // Layer 0 at a masked frame is mask embedding plus position, shared up to position.
    double diff = 0.0;
    for (std::size_t c = 0; c < 64; ++c)
      diff += std::abs((x0(t, c) - pos(t, c)) - (x0(3, c) - pos(3, c)));
    CHECK(diff <= 1e-12);
  }
}

TEST_CASE("non-finite activations raise an error naming the layer") {
  Encoder enc(EncoderConfig{}, 14);
  for (ag::Parameter* p : enc.parameters())
    if (p->name == "block2.w1") p->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Rng rng(15);
  try {
    enc.extract(noise(rng, 1000));
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
  }
}

TEST_CASE("configuration errors") {
  EncoderConfig c;
  c.num_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  Encoder enc(EncoderConfig{}, 1);
  CHECK_THROWS_AS(enc.extract(std::vector<double>(20, 0.0)), EmptyFeatureError);
}

TEST_CASE("activation dump round trip") {
  Encoder enc(EncoderConfig{}, 16);
  Rng rng(17);
  const LayerActivations acts = enc.extract(noise(rng, 800));
  const auto path = std::filesystem::temp_directory_path() / "issl_test.isac";
  write_activations(path, acts);
  const LayerActivations back = read_activations(path);
  REQUIRE(back.layers.size() == acts.layers.size());
  for (std::size_t l = 0; l < acts.layers.size(); ++l) {
    REQUIRE(back.layers[l].same_shape(acts.layers[l]));
    for (std::size_t i = 0; i < acts.layers[l].size(); ++i)
      CHECK(back.layers[l].data()[i] ==
            static_cast<double>(static_cast<float>(acts.layers[l].data()[i])));
  }
  std::filesystem::remove(path);
}

TEST_CASE("mask sampling edge cases") {
  Rng rng(18);
  CHECK(sample_mask(50, 0.0, 10, rng).empty());
  const MaskSpec all = sample_mask(10, 0.08, 10, rng);
  CHECK(all.size() == 10);
  CHECK(all.spans.size() == 1);
  CHECK_THROWS_AS(sample_mask(5, 0.08, 10, rng), ContractError);
  for (int rep = 0; rep < 50; ++rep) {
    const MaskSpec m = sample_mask(120, 0.1, 7, rng);
    std::vector<bool> covered(120, false);
    for (auto [s, len] : m.spans)
      for (std::size_t t = s; t < s + len; ++t) covered[t] = true;
    CHECK(m.flags(120) == covered);
  }
}

TEST_CASE("masked fraction matches the overlap-aware expectation") {
  const std::size_t T = 1000, span = 10;
  const double prob = 0.08;
  const std::size_t N = T - span + 1;
  // prob * T is integral here, so exactly 80 starts are drawn.
  const std::size_t n = 80;
  double expect = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t lo = t + 1 >= span ? t + 1 - span : 0;
    const std::size_t hi = std::min(t, N - 1);
    expect += 1.0 - unmasked_probability(N, n, hi - lo + 1);
  }
  expect /= static_cast<double>(T);

  Rng rng(19);
  double total = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) total += static_cast<double>(sample_mask(T, prob, span, rng).size());
  const double frac = total / (draws * static_cast<double>(T));
  CHECK(std::abs(frac - expect) <= 0.1 * expect);
  CHECK(std::abs(frac - expect) <= 0.005);
}
