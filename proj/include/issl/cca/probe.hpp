// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Token pooling, per-type sampling caps and the cross-validated probing
// protocol: for each of several token samples and train/dev/test splits,
// fit CCA over a regularization grid on train, pick the grid point with the
// best dev score and report the test score.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "issl/cca/cca.hpp"
#include "issl/features/corpus.hpp"
#include "issl/numcore/matrix.hpp"
#include "issl/numcore/rng.hpp"

namespace issl {

enum class Unit { phoneme, word, speaker };

std::string to_string(Unit u);
Unit parse_unit(const std::string& s);

struct Token {
  std::size_t utterance = 0;
  std::size_t start = 0, end = 0;  // frame span at alignment rate, end exclusive
  int label = 0;
};

// Phoneme and word tokens come from the alignment spans; speaker tokens are
// whole utterances labelled by speaker (speaker ids numbered in sorted order).
std::vector<Token> token_inventory(std::span<const Utterance> utts, Unit unit);

// Frames [first, last) averaged for a phoneme token of `length` frames: the
// middle third from length/3 to length - length/3, or the single centre
// frame length/2 when length < 3.
std::pair<std::size_t, std::size_t> middle_third(std::size_t length);

// Frame range of a token span after mapping alignment frames onto an
// activation sequence of `frames` rows (identity when the counts agree).
std::pair<std::size_t, std::size_t> rescale_span(std::size_t start, std::size_t end,
                                                 std::size_t align_frames, std::size_t frames);

// Mean vector of one token: phoneme -> middle third, word -> whole span,
// speaker -> whole utterance. Throws ContractError on an empty span.
std::vector<double> pool_token(const Matrix& acts, std::size_t start, std::size_t end, Unit unit);

struct SamplingCaps {
  std::size_t phoneme_per_type = 200;
  std::size_t phoneme_types = 39;
  std::size_t word_per_type = 15;
  std::size_t word_types = 500;
};

// Indices into `labels` (ascending). Phoneme and word: the most frequent
// types (ties to the lower label) up to the type cap, each contributing at
// most the per-type cap drawn without replacement. Speaker: every token.
std::vector<std::size_t> sample_pool(const std::vector<int>& labels, Unit unit,
                                     const SamplingCaps& caps, Rng& rng);

// One-hot rows over the distinct labels present, in ascending label order.
Matrix one_hot(const std::vector<int>& labels);

struct ProbeConfig {
  std::size_t samples = 3;
  std::size_t splits = 3;
  double train_fraction = 0.70;
  double dev_fraction = 0.15;
  std::vector<double> eps_grid = {1e-8, 1e-6, 1e-4, 1e-2, 1e-1};
  SamplingCaps caps;
};

struct Split {
  std::vector<std::size_t> train, dev, test;  // positions within the pool
};

// Per-class shuffle, then the first train_fraction of each class to train,
// the next dev_fraction to dev and the rest to test (at least one train
// token per class). Throws ContractError if dev or test ends up with fewer
// than two rows.
Split stratified_split(const std::vector<int>& labels, const ProbeConfig& cfg, Rng& rng);

struct FitRecord {
  std::size_t layer = 0;
  std::size_t fit_index = 0;
  std::size_t sample_index = 0;
  std::size_t split_index = 0;
  double eps_x = 0.0, eps_y = 0.0;
  double score = 0.0;
};

struct ProbeResult {
  Unit unit = Unit::phoneme;
  std::vector<FitRecord> fits;       // layer-major, samples * splits per layer
  std::vector<double> layer_means;   // mean of each layer's fits
};

// layer_vectors[l] holds one pooled row per token of the inventory whose
// labels are `labels`. Token samples and splits depend only on (labels,
// cfg, seed), so every model probed with the same seed sees the same rows.
ProbeResult cca_evaluate(std::span<const Matrix> layer_vectors, const std::vector<int>& labels,
                         Unit unit, const ProbeConfig& cfg, std::uint64_t seed);

// Report rows as CSV: model_id,unit,layer,fit_index,sample_index,split_index,eps_x,eps_y,score
struct ReportRow {
  std::string model_id;
  Unit unit = Unit::phoneme;
  FitRecord fit;
};
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);
// model_id,unit,layer,mean_score,fits
void write_summary_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

}  // namespace issl
