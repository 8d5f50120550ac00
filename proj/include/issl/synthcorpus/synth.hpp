// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic speech-like corpus with planted phoneme, word and speaker
// structure. Each phoneme is a spectral template (a sum of a few sinusoids);
// a speaker scales all frequencies and reweights them with a fixed spectral
// tilt. With n_sounds > 0 the templates instead form a shared pool and each
// phoneme plays an ordered sequence of them, so a single frame no longer
// identifies its phoneme.
// Alignments are frame-exact at the analysis frame rate (window 40 samples,
// hop 16 samples).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "issl/features/corpus.hpp"

namespace issl {

struct SynthConfig {
  std::size_t n_phonemes = 20;
  std::size_t n_sounds = 0;               // 0: one template per phoneme
  std::size_t sounds_per_phoneme = 2;     // with a shared pool; played in order
  std::size_t n_words = 200;
  std::size_t min_word_phonemes = 2, max_word_phonemes = 5;
  std::size_t n_speakers = 12;
  std::size_t utterances_per_speaker = 30;
  std::size_t min_words = 4, max_words = 8;        // per utterance
  std::size_t min_duration = 4, max_duration = 9;  // frames per phoneme
  double zipf_exponent = 0.7;                      // word frequency law
  double freq_jitter = 0.03;                       // relative, per phoneme token
  double gain_jitter_db = 3.0;                     // per phoneme token
  double noise_level = 0.03;                       // white noise std
  double max_tilt = 1.2;                           // speaker tilt exponent range
  double max_pitch_shift = 0.12;                   // speaker frequency scale range
  int sample_rate = 1600;
  std::size_t window = 40, hop = 16;               // samples
  std::uint64_t seed = 1;

  // Throws ConfigError.
  void validate() const;
};

struct SoundTemplate {
  std::vector<double> freqs;  // Hz
  std::vector<double> amps;
};

struct SpeakerProfile {
  std::string id;
  double tilt = 0.0;         // amplitude *= (f / 400 Hz)^tilt
  double pitch_scale = 1.0;  // every frequency *= pitch_scale
};

struct Inventory {
  std::vector<SoundTemplate> sounds;
  std::vector<std::vector<int>> phonemes;  // distinct sound sequences
  std::vector<std::vector<int>> words;  // distinct phoneme sequences
  std::vector<double> word_weights;     // sampling probabilities, sum 1
  std::vector<SpeakerProfile> speakers;
};

Inventory make_inventory(const SynthConfig& cfg);

// Number of samples whose analysis frames number exactly `frames`.
std::size_t samples_for_frames(std::size_t frames, const SynthConfig& cfg);

// Renders one utterance from a word sequence. Word and phoneme spans are in
// analysis frames; every frame carries exactly one phoneme.
Utterance render_utterance(const SynthConfig& cfg, const Inventory& inv, std::size_t speaker,
                           const std::vector<int>& words, const std::string& utterance_id,
                           std::uint64_t seed);

// All utterances, speaker-major. Utterance u draws from stream mix_seed(seed, u).
std::vector<Utterance> generate_utterances(const SynthConfig& cfg);

// Writes the corpus under root (see write_corpus) and returns it.
std::vector<Utterance> generate(const SynthConfig& cfg, const std::filesystem::path& root);

}  // namespace issl
