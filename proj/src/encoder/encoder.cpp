// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/encoder/encoder.hpp"

#include <cmath>
#include <fstream>

#include "issl/numcore/binary_io.hpp"
#include "issl/numcore/errors.hpp"
#include "issl/numcore/rng.hpp"

namespace issl {

namespace {

Matrix gaussian(Rng& rng, std::size_t r, std::size_t c, double stddev) {
  Matrix m(r, c);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

ag::Parameter linear_weight(const std::string& name, Rng& rng, std::size_t in, std::size_t out,
                            double gain = 1.0) {
  return {name, gaussian(rng, in, out, gain / std::sqrt(static_cast<double>(in)))};
}

ag::Parameter zeros(const std::string& name, std::size_t c) { return {name, Matrix(1, c)}; }
ag::Parameter ones(const std::string& name, std::size_t c) { return {name, Matrix(1, c, 1.0)}; }

void check_finite(const ag::Var& v, const std::string& where) {
  if (!v.value().all_finite()) throw NumericalError("encoder: non-finite activations in " + where);
}

}  // namespace

void EncoderConfig::validate() const {
  if (conv_layers.empty()) throw ConfigError("encoder: need at least one conv layer");
  for (const ConvSpec& c : conv_layers)
    if (c.channels == 0 || c.kernel == 0 || c.stride == 0)
      throw ConfigError("encoder: conv channels, kernel and stride must be positive");
  if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0)
    throw ConfigError("encoder: model_dim " + std::to_string(model_dim) +
                      " must be divisible by num_heads " + std::to_string(num_heads));
  if (ffn_dim == 0 || final_proj_dim == 0) throw ConfigError("encoder: zero ffn/final dim");
  if (mask_prob < 0.0 || mask_prob > 1.0) throw ConfigError("encoder: mask_prob outside [0,1]");
  if (mask_span == 0) throw ConfigError("encoder: mask_span must be positive");
}

std::size_t EncoderConfig::total_stride() const {
  std::size_t s = 1;
  for (const ConvSpec& c : conv_layers) s *= c.stride;
  return s;
}

std::size_t EncoderConfig::receptive_field() const {
  std::size_t rf = 1, jump = 1;
  for (const ConvSpec& c : conv_layers) {
    rf += (c.kernel - 1) * jump;
    jump *= c.stride;
  }
  return rf;
}

std::size_t EncoderConfig::frame_count(std::size_t num_samples) const {
  std::size_t n = num_samples;
  for (const ConvSpec& c : conv_layers) n = ag::conv_output_length(n, c.kernel, c.stride);
  return n;
}

Encoder::Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  std::size_t in = 1;
  for (std::size_t i = 0; i < cfg_.conv_layers.size(); ++i) {
    const ConvSpec& c = cfg_.conv_layers[i];
    const std::string p = "conv" + std::to_string(i);
    conv_w_.push_back(linear_weight(p + ".w", rng, in * c.kernel, c.channels, std::sqrt(2.0)));
    conv_b_.push_back(zeros(p + ".b", c.channels));
    in = c.channels;
  }
  const std::size_t d = cfg_.model_dim;
  feat_ln_g_ = ones("feat_ln.g", in);
  feat_ln_b_ = zeros("feat_ln.b", in);
  feat_w_ = linear_weight("feat_proj.w", rng, in, d);
  feat_b_ = zeros("feat_proj.b", d);
  Matrix me(1, d);
  for (double& v : me.data()) v = rng.uniform(-0.1, 0.1);
  mask_emb_ = {"mask_emb", me};

  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.num_layers));
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b;
    b.ln1_g = ones(p + "ln1.g", d);
    b.ln1_b = zeros(p + "ln1.b", d);
    b.wq = linear_weight(p + "wq", rng, d, d);
    b.bq = zeros(p + "bq", d);
    b.wk = linear_weight(p + "wk", rng, d, d);
    b.wv = linear_weight(p + "wv", rng, d, d);
    b.bv = zeros(p + "bv", d);
    b.wo = linear_weight(p + "wo", rng, d, d, out_gain);
    b.bo = zeros(p + "bo", d);
    b.ln2_g = ones(p + "ln2.g", d);
    b.ln2_b = zeros(p + "ln2.b", d);
    b.w1 = linear_weight(p + "w1", rng, d, cfg_.ffn_dim);
    b.b1 = zeros(p + "b1", cfg_.ffn_dim);
    b.w2 = linear_weight(p + "w2", rng, cfg_.ffn_dim, d, out_gain);
    b.b2 = zeros(p + "b2", d);
    blocks_.push_back(std::move(b));
  }
  final_ln_g_ = ones("final_ln.g", d);
  final_ln_b_ = zeros("final_ln.b", d);
  final_w_ = linear_weight("final_proj.w", rng, d, cfg_.final_proj_dim);
  final_b_ = zeros("final_proj.b", cfg_.final_proj_dim);
}

std::vector<ag::Parameter*> Encoder::parameters() {
  std::vector<ag::Parameter*> out;
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    out.push_back(&conv_w_[i]);
    out.push_back(&conv_b_[i]);
  }
  for (ag::Parameter* p : {&feat_ln_g_, &feat_ln_b_, &feat_w_, &feat_b_, &mask_emb_}) out.push_back(p);
  for (Block& b : blocks_)
    for (ag::Parameter* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.wv, &b.bv, &b.wo,
                             &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
      out.push_back(p);
  for (ag::Parameter* p : {&final_ln_g_, &final_ln_b_, &final_w_, &final_b_}) out.push_back(p);
  return out;
}

std::vector<const ag::Parameter*> Encoder::parameters() const {
  auto mut = const_cast<Encoder*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const ag::Parameter* p : parameters()) n += p->value.data().size();
  return n;
}

void Encoder::zero_block_outputs() {
  for (Block& b : blocks_)
    for (ag::Parameter* p : {&b.wo, &b.bo, &b.w2, &b.b2}) p->value.fill(0.0);
}

namespace {

ag::Var bind(ag::Graph& g, ag::Parameter& p, bool train) {
  return train ? g.param(p) : g.constant(p.value);
}

ag::Var linear(ag::Graph& g, ag::Var x, ag::Parameter& w, ag::Parameter& b, bool train) {
  return ag::add_row(ag::matmul(x, bind(g, w, train)), bind(g, b, train));
}

}  // namespace

ConvOutput Encoder::conv_encode(ag::Graph& g, std::span<const std::span<const double>> waves,
                                bool train) {
  ag::Segments segs;
  std::size_t total = 0;
  for (auto w : waves) {
    segs.push_back(w.size());
    total += w.size();
  }
  Matrix samples(total, 1);
  std::size_t off = 0;
  for (auto w : waves)
    for (double s : w) samples(off++, 0) = s;

  ag::Var x = g.constant(std::move(samples));
  for (std::size_t i = 0; i < cfg_.conv_layers.size(); ++i) {
    const ConvSpec& c = cfg_.conv_layers[i];
    ag::Segments next;
    ag::Var patches = ag::im2col(x, segs, c.kernel, c.stride, &next);
    x = ag::gelu(linear(g, patches, conv_w_[i], conv_b_[i], train));
    segs = std::move(next);
    check_finite(x, "conv layer " + std::to_string(i));
  }
  ag::Var normed = ag::layer_norm(x, bind(g, feat_ln_g_, train), bind(g, feat_ln_b_, train));
  return {normed, segs};
}

EncoderOutput Encoder::forward(ag::Graph& g, const ConvOutput& conv,
                               const std::vector<MaskSpec>& masks, bool train,
                               std::vector<std::vector<Matrix>>* attention) {
  const ag::Segments& segs = conv.segments;
  if (masks.size() != segs.size())
    throw ContractError("encoder: " + std::to_string(masks.size()) + " masks for " +
                        std::to_string(segs.size()) + " utterances");
  const std::size_t d = cfg_.model_dim;
  ag::Var x = linear(g, conv.features, feat_w_, feat_b_, train);

  std::vector<bool> flags;
  Matrix pos(x.rows(), d);
  bool any_mask = false;
  std::size_t off = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    std::vector<bool> f = masks[s].flags(segs[s]);
    any_mask = any_mask || !masks[s].empty();
    flags.insert(flags.end(), f.begin(), f.end());
    const Matrix table = sinusoidal_positions(segs[s], d);
    for (std::size_t t = 0; t < segs[s]; ++t)
      std::copy(table.row(t).begin(), table.row(t).end(), pos.row(off + t).begin());
    off += segs[s];
  }
  if (any_mask) x = ag::replace_rows(x, flags, bind(g, mask_emb_, train));
  x = ag::add(x, g.constant(std::move(pos)));
  check_finite(x, "layer 0");

  EncoderOutput out;
  out.segments = segs;
  out.layers.push_back(x);
  if (attention != nullptr) attention->clear();
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& b = blocks_[l];
    ag::Var h = ag::layer_norm(x, bind(g, b.ln1_g, train), bind(g, b.ln1_b, train));
    ag::Var q = linear(g, h, b.wq, b.bq, train);
    // No key bias: softmax is invariant to it.
    ag::Var k = ag::matmul(h, bind(g, b.wk, train));
    ag::Var v = linear(g, h, b.wv, b.bv, train);
    std::vector<Matrix> probs;
    ag::Var a = ag::segment_attention(q, k, v, segs, cfg_.num_heads,
                                      attention != nullptr ? &probs : nullptr);
    if (attention != nullptr) attention->push_back(std::move(probs));
    x = ag::add(x, linear(g, a, b.wo, b.bo, train));
    ag::Var h2 = ag::layer_norm(x, bind(g, b.ln2_g, train), bind(g, b.ln2_b, train));
    ag::Var f = linear(g, ag::gelu(linear(g, h2, b.w1, b.b1, train)), b.w2, b.b2, train);
    x = ag::add(x, f);
    check_finite(x, "layer " + std::to_string(l + 1));
    out.layers.push_back(x);
  }
  ag::Var z = ag::layer_norm(x, bind(g, final_ln_g_, train), bind(g, final_ln_b_, train));
  out.final_proj = linear(g, z, final_w_, final_b_, train);
  check_finite(out.final_proj, "final projection");
  return out;
}

LayerActivations Encoder::extract(std::span<const double> wave) const {
  // The evaluation path only reads parameter values.
  auto& self = const_cast<Encoder&>(*this);
  ag::Graph g;
  const std::span<const double> one[] = {wave};
  ConvOutput conv = self.conv_encode(g, one, false);
  if (conv.segments.front() == 0)
    throw EmptyFeatureError("encoder: waveform of " + std::to_string(wave.size()) +
                            " samples yields no frames");
  EncoderOutput out = self.forward(g, conv, {MaskSpec{}}, false);
  LayerActivations acts;
  for (const ag::Var& v : out.layers) acts.layers.push_back(v.value());
  acts.final_proj = out.final_proj.value();
  return acts;
}

Matrix sinusoidal_positions(std::size_t length, std::size_t dim) {
  Matrix m(length, dim);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(t) * rate;
      m(t, i) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  return m;
}

void write_activations(const std::filesystem::path& path, const LayerActivations& acts) {
  if (acts.layers.empty()) throw ContractError("write_activations: no layers");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const Matrix& first = acts.layers.front();
  bin::put_magic(os, "ISAC");
  bin::put_i32(os, static_cast<std::int32_t>(acts.layers.size()));
  bin::put_i32(os, static_cast<std::int32_t>(first.rows()));
  bin::put_i32(os, static_cast<std::int32_t>(first.cols()));
  for (const Matrix& m : acts.layers) {
    if (!m.same_shape(first))
      throw DimensionError("write_activations: layer " + m.shape_string() + " vs " +
                           first.shape_string());
    for (double v : m.data()) bin::put_f32(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

LayerActivations read_activations(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  bin::expect_magic(is, "ISAC", path.string());
  const std::int32_t n = bin::get_i32(is);
  const std::int32_t t = bin::get_i32(is);
  const std::int32_t d = bin::get_i32(is);
  if (n <= 0 || t < 0 || d <= 0) throw FormatError(path.string() + ": bad activation dims");
  LayerActivations acts;
  for (std::int32_t l = 0; l < n; ++l) {
    Matrix m(static_cast<std::size_t>(t), static_cast<std::size_t>(d));
    for (double& v : m.data()) v = bin::get_f32(is);
    acts.layers.push_back(std::move(m));
  }
  return acts;
}

}  // namespace issl
