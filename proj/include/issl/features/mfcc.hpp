// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "issl/features/corpus.hpp"
#include "issl/numcore/matrix.hpp"

namespace issl {

struct FeatureSequence {
  Matrix frames;  // T x D
  double frame_rate = 0.0;

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
};

struct FeatureConfig {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int num_filters = 26;
  int num_ceps = 13;
  double low_freq = 0.0;
  double high_freq = 0.0;  // <= 0 means Nyquist
  double log_floor = 1e-10;
  double preemphasis = 0.0;
  int delta_width = 2;
};

// Samples per analysis window / hop at the given rate.
std::size_t window_samples(const FeatureConfig& cfg, int sample_rate);
std::size_t hop_samples(const FeatureConfig& cfg, int sample_rate);
// floor((n - window) / hop) + 1, or 0 when n < window.
std::size_t mfcc_frame_count(std::size_t num_samples, const FeatureConfig& cfg, int sample_rate);

// Mel-spaced triangular filters over the magnitude-spectrum bins of an
// n_fft-point transform: num_filters x (n_fft/2 + 1).
Matrix mel_filterbank(const FeatureConfig& cfg, int sample_rate, std::size_t n_fft);
// Orthonormal DCT-II rows 0..num_ceps-1: num_ceps x num_filters.
Matrix dct_matrix(int num_ceps, int num_filters);
// Hamming window of the given length.
std::vector<double> analysis_window(std::size_t length);
// Smallest power of two >= window length.
std::size_t fft_size(std::size_t window);

// Windowed magnitude spectrum -> mel filterbank -> log with floor -> DCT-II.
// Output is T x num_ceps. Throws EmptyFeatureError when the utterance is
// shorter than one window and ConfigError when the filterbank top edge
// exceeds Nyquist.
FeatureSequence mfcc(const Utterance& u, const FeatureConfig& cfg);
FeatureSequence mfcc(const std::vector<double>& samples, int sample_rate, const FeatureConfig& cfg);

// Appends first- and second-order regression deltas with radius `width`
// and replicated edge frames: D -> 3D.
FeatureSequence append_deltas(const FeatureSequence& f, int width);

// Regression deltas of one matrix (same shape as input).
Matrix regression_deltas(const Matrix& frames, int width);

}  // namespace issl
