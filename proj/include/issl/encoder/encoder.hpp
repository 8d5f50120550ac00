// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Convolutional waveform encoder followed by a pre-norm Transformer.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "issl/encoder/mask.hpp"
#include "issl/numcore/autograd.hpp"
#include "issl/numcore/matrix.hpp"

namespace issl {

struct ConvSpec {
  std::size_t channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 0;
};

struct EncoderConfig {
  std::vector<ConvSpec> conv_layers = {{32, 16, 4}, {64, 3, 2}, {64, 3, 2}};
  std::size_t model_dim = 64;
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t final_proj_dim = 256;
  double mask_prob = 0.08;
  std::size_t mask_span = 10;

  // Throws ConfigError on inconsistent geometry.
  void validate() const;
  std::size_t total_stride() const;
  std::size_t receptive_field() const;
  // Output frames for a waveform of n samples (0 if too short).
  std::size_t frame_count(std::size_t num_samples) const;
};

// Per-layer T x d activations; index 0 is the input to the first Transformer
// block. final_proj is T x final_proj_dim.
struct LayerActivations {
  std::vector<Matrix> layers;
  Matrix final_proj;

  std::size_t num_frames() const { return layers.empty() ? 0 : layers.front().rows(); }
};

// Rows of several utterances stacked in one matrix.
struct ConvOutput {
  ag::Var features;  // N x conv channels, layer-normalized
  ag::Segments segments;
};

struct EncoderOutput {
  std::vector<ag::Var> layers;  // num_layers + 1 entries, each N x d
  ag::Var final_proj;           // N x final_proj_dim
  ag::Segments segments;
};

class Encoder {
 public:
  Encoder() = default;
  // Fresh parameters drawn from seed.
  Encoder(EncoderConfig cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  std::vector<ag::Parameter*> parameters();
  std::vector<const ag::Parameter*> parameters() const;
  std::size_t parameter_count() const;

  // With `train` set, parameters enter the graph as trainable leaves;
  // otherwise as constants.
  ConvOutput conv_encode(ag::Graph& g, std::span<const std::span<const double>> waves,
                         bool train);
  // masks has one entry per segment (empty masks allowed). attention, if
  // given, receives per-layer probability matrices (segment-major, head-minor).
  EncoderOutput forward(ag::Graph& g, const ConvOutput& conv, const std::vector<MaskSpec>& masks,
                        bool train, std::vector<std::vector<Matrix>>* attention = nullptr);

  // Unmasked evaluation-mode pass over one waveform.
  LayerActivations extract(std::span<const double> wave) const;

  // Zero-valued attention and feed-forward output projections make every
  // block an identity map.
  void zero_block_outputs();

 private:
  struct Block {
    ag::Parameter ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo;
    ag::Parameter ln2_g, ln2_b, w1, b1, w2, b2;
  };

  EncoderConfig cfg_;
  std::vector<ag::Parameter> conv_w_, conv_b_;
  ag::Parameter feat_ln_g_, feat_ln_b_, feat_w_, feat_b_, mask_emb_;
  std::vector<Block> blocks_;
  ag::Parameter final_ln_g_, final_ln_b_, final_w_, final_b_;
};

// Sinusoidal position table, rows = positions.
Matrix sinusoidal_positions(std::size_t length, std::size_t dim);

// "ISAC" | int32 (L+1, T, d) | layer-major row-major float32, little-endian.
void write_activations(const std::filesystem::path& path, const LayerActivations& acts);
LayerActivations read_activations(const std::filesystem::path& path);

}  // namespace issl
