// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Pretraining: learning-rate schedule, AdamW, checkpoints, the masked
// prediction loop for k-means targets and the online-quantizer baseline,
// and label refinement from a trained model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "issl/clustering/kmeans.hpp"
#include "issl/encoder/encoder.hpp"
#include "issl/features/corpus.hpp"
#include "issl/pipeline/config.hpp"
#include "issl/quantizer/quantizer.hpp"

namespace issl {

// Linear warm-up from 0 to peak over the first warmup_fraction of updates,
// then linear decay to 0 at step == total. ContractError if step > total.
double lr_at(std::size_t step, std::size_t total, double peak, double warmup_fraction);

struct AdamSettings {
  double beta1 = 0.9, beta2 = 0.98, weight_decay = 0.01, eps = 1e-8;
};

// Adam with decoupled weight decay. Decay applies to weight matrices only
// (parameters with more than one row), not to biases, gains or embeddings
// of a single row.
class AdamW {
 public:
  AdamW(std::vector<ag::Parameter*> params, AdamSettings s);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  std::vector<ag::Parameter*> params_;
  AdamSettings s_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

struct Tensor {
  std::string name;
  Matrix value, adam_m, adam_v;
};

// Everything needed to resume or evaluate a run.
struct Checkpoint {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t step = 0;        // updates completed
  std::size_t total_steps = 0;
  std::size_t adam_steps = 0;
  std::vector<Tensor> tensors;
  std::vector<double> losses;  // one per completed update
};

// "ISCK" binary, float64 throughout so reloads are bit-exact.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies values (and optimizer moments, if opt is given) by name; throws
// FormatError when a parameter is missing or has the wrong shape.
void restore_parameters(const Checkpoint& c, std::vector<ag::Parameter*> params,
                        AdamW* opt = nullptr);
// Encoder with the checkpoint's weights.
Encoder load_encoder(const Checkpoint& c, const EncoderConfig& cfg);

struct TrainingData {
  std::vector<std::span<const double>> waves;
  std::vector<PseudoLabelSequence> labels;  // model frame rate; unused by the quantizer
  std::size_t vocab = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::size_t fallbacks = 0;  // contrastive frames that used every label
  bool resumed = false;
};

// Fresh model from `seed`, cfg.total_updates AdamW updates of the masked
// loss under cfg.policy against data.labels. With a non-empty ckpt_dir a
// checkpoint is written every cfg.checkpoint_every of the run, a matching
// one found there is resumed, and the final state goes to final.isck.
// A non-zero stop_after halts after that many updates (checkpointing to
// latest.isck) so a long run can be split over several invocations.
// Throws NumericalError naming the step and learning rate on divergence.
TrainResult train_iteration(const RunConfig& cfg, const TrainingData& data, std::uint64_t seed,
                            const std::filesystem::path& ckpt_dir = {},
                            std::size_t stop_after = 0);

// Joint-learning baseline: targets are Gumbel-quantized convolutional
// features, contrasted against the quantized vectors of other masked frames,
// plus alpha * diversity. Runs update_factor * total_updates updates.
TrainResult train_quantizer_baseline(const RunConfig& cfg, const TrainingData& data,
                                     std::uint64_t seed,
                                     const std::filesystem::path& ckpt_dir = {},
                                     std::size_t stop_after = 0);

// Nearest-frame resampling of a label sequence to `frames` entries.
PseudoLabelSequence resample_labels(const PseudoLabelSequence& labels, std::size_t frames);

// MFCC (+ deltas) matrices per utterance.
std::vector<Matrix> corpus_features(std::span<const Utterance> utts, const RunConfig& cfg);

struct Labelling {
  Centroids centroids;
  std::vector<PseudoLabelSequence> labels;  // per utterance
};

// k-means over the stacked rows (at most max_frames sampled for fitting),
// every row assigned.
Labelling cluster_frames(std::span<const Matrix> per_utterance, std::size_t k, std::uint64_t seed,
                         std::size_t max_frames, std::size_t max_iter);

// Extracts `layer` for every waveform and clusters it.
Labelling refine_labels(const Encoder& enc, std::span<const std::span<const double>> waves,
                        std::size_t layer, std::size_t k, std::uint64_t seed,
                        std::size_t max_frames, std::size_t max_iter);

// "ISPL" | u32 count | per sequence: u32 vocab, u32 n, n x i32
void write_labels(const std::filesystem::path& path, const std::vector<PseudoLabelSequence>& l);
std::vector<PseudoLabelSequence> read_labels(const std::filesystem::path& path);

}  // namespace issl
