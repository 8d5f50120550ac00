// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration. Text form, one `key = value` per line, '#' comments:
//
//   seed                       run seed
//   corpus                     manifest path; empty -> synthesize under out-dir
//   synth.seed / synth.speakers / synth.utterances_per_speaker /
//   synth.phonemes / synth.words / synth.sounds / synth.sounds_per_phoneme /
//   synth.max_pitch_shift
//   features.num_filters / features.num_ceps / features.deltas (0|1)
//   encoder.conv_layers        channels x kernel x stride, comma separated
//   encoder.model_dim / num_layers / num_heads / ffn_dim / final_proj_dim /
//   encoder.mask_prob / encoder.mask_span
//   objective.policy           predictive | contrastive
//   objective.temperature / objective.negatives
//   labels.source              kmeans-iter<N> | online-quantizer
//   labels.k                   clusters per iteration, comma separated
//   labels.cluster_layer       source layer for iteration 2, 3, ...
//   kmeans.max_frames / kmeans.max_iter
//   train.updates / train.peak_lr / train.warmup / train.batch_frames /
//   train.beta1 / train.beta2 / train.weight_decay / train.adam_eps /
//   train.checkpoint_every
//   quantizer.groups / entries / alpha / temp_start / temp_end / update_factor
//   probe.samples / probe.splits / probe.eps
//   experiment.iteration3 / experiment.quantizer / experiment.random (0|1)

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "issl/cca/probe.hpp"
#include "issl/encoder/encoder.hpp"
#include "issl/features/mfcc.hpp"
#include "issl/objectives/masked_loss.hpp"
#include "issl/synthcorpus/synth.hpp"

namespace issl {

struct QuantizerSettings {
  std::size_t groups = 2;
  std::size_t entries = 32;
  double alpha = 0.1;
  double temp_start = 2.0, temp_end = 0.5;
  std::size_t update_factor = 2;  // baseline updates = factor * train.updates
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path corpus;
  SynthConfig synth;
  FeatureConfig features{.num_filters = 20};  // 33 spectral bins at 1600 Hz
  bool deltas = true;
  EncoderConfig encoder;
  Policy policy = Policy::predictive;
  double temperature = 0.1;
  std::size_t negatives = 100;
  std::string label_source = "kmeans-iter1";
  std::vector<std::size_t> k_per_iteration = {100, 500, 500};
  std::vector<std::size_t> cluster_layer = {3, 5};
  std::size_t kmeans_max_frames = 100000;
  std::size_t kmeans_max_iter = 100;
  std::size_t total_updates = 5000;
  double peak_lr = 5e-4;
  double warmup_fraction = 0.08;
  std::size_t batch_frames = 256;
  double beta1 = 0.9, beta2 = 0.98, weight_decay = 0.01, adam_eps = 1e-8;
  double checkpoint_every = 0.1;
  QuantizerSettings quantizer;
  ProbeConfig probe;
  bool iteration3 = false;
  bool quantizer_baseline = true;
  bool random_baseline = true;

  // Throws ConfigError.
  void validate() const;
  // Iteration number of a kmeans-iter<N> label source (0 for the quantizer).
  std::size_t label_iteration() const;
  // k for iteration n (1-based); cluster layer feeding iteration n >= 2.
  std::size_t k_for(std::size_t iteration) const;
  std::size_t layer_for(std::size_t iteration) const;
};

// Applies `key = value` lines on top of `base`. Throws ConfigError naming the
// line for unknown keys or unparsable values.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
// Every key with its value, sorted by key: the canonical form that is hashed.
std::string canonical_text(const RunConfig& cfg);
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

// Lower-case hex SHA-256.
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::filesystem::path& path);
std::string config_hash(const RunConfig& cfg);

}  // namespace issl
