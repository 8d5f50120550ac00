// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// The model matrix: k-means iterations 1 and 2 under both objectives,
// optional third iteration, quantizer and random baselines, then layer-wise
// CCA probing of every model. Stage outputs live under
// <out-dir>/artifacts/<stage>-<key> where the key hashes every input of the
// stage, so re-runs skip finished stages.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "issl/cca/probe.hpp"
#include "issl/encoder/encoder.hpp"
#include "issl/features/corpus.hpp"
#include "issl/pipeline/config.hpp"

namespace issl {

inline constexpr std::array<Unit, 3> kUnits = {Unit::phoneme, Unit::word, Unit::speaker};

// Tokens of every unit over a corpus.
struct ProbeTokens {
  std::array<std::vector<Token>, 3> tokens;
  std::array<std::vector<int>, 3> labels;
};
ProbeTokens probe_tokens(std::span<const Utterance> utts);

// Pooled token vectors: result[unit][layer] is tokens x d. Each utterance is
// extracted once.
std::array<std::vector<Matrix>, 3> pool_layers(const Encoder& enc, std::span<const Utterance> utts,
                                               const ProbeTokens& toks);

// Probes every layer for every unit. Token samples and splits depend only on
// the corpus and seed, so models probed with one seed share them.
std::vector<ReportRow> probe_model(const Encoder& enc, std::span<const Utterance> utts,
                                   const ProbeTokens& toks, const ProbeConfig& cfg,
                                   std::uint64_t seed, const std::string& model_id);

struct ModelRecord {
  std::string id;
  std::string label_source;  // kmeans-iterN, online-quantizer or none
  std::size_t updates = 0;
  std::string checkpoint;    // relative to the output directory
  std::string checkpoint_hash;
  std::string config_hash;
  double initial_loss = 0.0, final_loss = 0.0;
};

struct ExperimentResult {
  std::vector<ModelRecord> models;
  std::vector<ReportRow> rows;
  std::filesystem::path report_csv, summary_csv, plot_svg, manifest_json;
};

// Runs (or resumes) the whole matrix. On failure the state file
// <out-dir>/state.txt names the failed stage; rerunning resumes from the
// finished artifacts.
ExperimentResult run_experiment(const RunConfig& cfg, const std::filesystem::path& out_dir);

// Loads cfg.corpus, or synthesizes one under out_dir/corpus when it is empty.
// *hash receives a digest of every corpus file.
std::vector<Utterance> prepare_corpus(const RunConfig& cfg, const std::filesystem::path& out_dir,
                                      std::string* hash);

// Mean score per (model, unit, layer) drawn as one panel per unit.
void write_layer_plot(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

// Mean of the last two layers for one model and unit.
double final_layers_mean(const std::vector<ReportRow>& rows, const std::string& model_id,
                         Unit unit);

}  // namespace issl
