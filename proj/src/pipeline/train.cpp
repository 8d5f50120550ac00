// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/pipeline/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "issl/numcore/binary_io.hpp"
#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"
#include "issl/objectives/masked_loss.hpp"

namespace issl {

namespace fs = std::filesystem;

double lr_at(std::size_t step, std::size_t total, double peak, double warmup_fraction) {
  if (step > total)
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total));
  const double s = static_cast<double>(step), n = static_cast<double>(total);
  const double warm = warmup_fraction * n;
  if (s < warm) return peak * s / warm;
  if (n <= warm) return peak;
  return peak * (n - s) / (n - warm);
}

AdamW::AdamW(std::vector<ag::Parameter*> params, AdamSettings s)
    : params_(std::move(params)), s_(s) {
  for (const ag::Parameter* p : params_) {
    m_.emplace_back(p->value.rows(), p->value.cols());
    v_.emplace_back(p->value.rows(), p->value.cols());
  }
}

void AdamW::zero_grad() {
  for (ag::Parameter* p : params_) std::fill(p->grad.data().begin(), p->grad.data().end(), 0.0);
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Parameter& p = *params_[i];
    const double decay = p.value.rows() > 1 ? s_.weight_decay : 0.0;
    auto w = p.value.data();
    auto g = p.grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = s_.beta1 * m[j] + (1.0 - s_.beta1) * g[j];
      v[j] = s_.beta2 * v[j] + (1.0 - s_.beta2) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + s_.eps);
      w[j] -= lr * (update + decay * w[j]);
    }
  }
}

namespace {

void put_matrix(std::ostream& os, const Matrix& m) {
  bin::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  bin::put_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) bin::put_f64(os, v);
}

Matrix get_matrix(std::istream& is) {
  const std::size_t r = bin::get_u32(is), c = bin::get_u32(is);
  Matrix m(r, c);
  for (double& v : m.data()) v = bin::get_f64(is);
  return m;
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& c) {
  // Write then rename so an interrupted run never leaves a torn checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    bin::put_magic(os, "ISCK");
    bin::put_u32(os, 1);
    bin::put_string(os, c.config_hash);
    bin::put_u64(os, c.seed);
    bin::put_u64(os, c.step);
    bin::put_u64(os, c.total_steps);
    bin::put_u64(os, c.adam_steps);
    bin::put_u32(os, static_cast<std::uint32_t>(c.tensors.size()));
    for (const Tensor& t : c.tensors) {
      bin::put_string(os, t.name);
      put_matrix(os, t.value);
      put_matrix(os, t.adam_m);
      put_matrix(os, t.adam_v);
    }
    bin::put_u64(os, c.losses.size());
    for (double l : c.losses) bin::put_f64(os, l);
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  bin::expect_magic(is, "ISCK", path.string());
  if (bin::get_u32(is) != 1) throw FormatError(path.string() + ": unsupported checkpoint version");
  Checkpoint c;
  c.config_hash = bin::get_string(is);
  c.seed = bin::get_u64(is);
  c.step = bin::get_u64(is);
  c.total_steps = bin::get_u64(is);
  c.adam_steps = bin::get_u64(is);
  const std::size_t n = bin::get_u32(is);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t;
    t.name = bin::get_string(is);
    t.value = get_matrix(is);
    t.adam_m = get_matrix(is);
    t.adam_v = get_matrix(is);
    c.tensors.push_back(std::move(t));
  }
  c.losses.resize(bin::get_u64(is));
  for (double& l : c.losses) l = bin::get_f64(is);
  return c;
}

void restore_parameters(const Checkpoint& c, std::vector<ag::Parameter*> params, AdamW* opt) {
  std::map<std::string, const Tensor*> by_name;
  for (const Tensor& t : c.tensors) by_name[t.name] = &t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ag::Parameter& p = *params[i];
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint has no parameter '" + p.name + "'");
    const Tensor& t = *it->second;
    if (t.value.rows() != p.value.rows() || t.value.cols() != p.value.cols())
      throw FormatError("checkpoint parameter '" + p.name + "' is " + t.value.shape_string() +
                        ", model expects " + p.value.shape_string());
    p.value = t.value;
    if (opt != nullptr) {
      opt->first_moments()[i] = t.adam_m;
      opt->second_moments()[i] = t.adam_v;
    }
  }
  if (opt != nullptr) opt->set_steps(c.adam_steps);
}

Encoder load_encoder(const Checkpoint& c, const EncoderConfig& cfg) {
  Encoder enc(cfg, 0);
  restore_parameters(c, enc.parameters());
  return enc;
}

namespace {

// Utterances drawn without replacement until the batch holds at least
// batch_frames frames.
std::vector<std::size_t> draw_batch(const std::vector<std::size_t>& frames,
                                    std::size_t batch_frames, Rng& rng) {
  std::vector<std::size_t> pool(frames.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  std::vector<std::size_t> batch;
  std::size_t total = 0;
  for (std::size_t i = 0; i < pool.size() && total < batch_frames; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    batch.push_back(pool[i]);
    total += frames[pool[i]];
  }
  std::sort(batch.begin(), batch.end());
  return batch;
}

struct StepContext {
  ag::Graph& graph;
  const std::vector<std::size_t>& batch;
  std::size_t step;
  Rng& rng;
};

using LossFn = std::function<ag::Var(StepContext&, std::size_t* fallbacks)>;

// Every update allocates and frees the same large activation and gradient
// buffers. Keep them on the heap so they are reused instead of being mapped,
// page-faulted and returned to the kernel each time.
void keep_buffers_on_heap() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
  }();
  (void)done;
#endif
}

TrainResult run_updates(const RunConfig& cfg, std::uint64_t seed, std::size_t total,
                        std::vector<ag::Parameter*> params, const fs::path& ckpt_dir,
                        const std::string& tag, const LossFn& loss_fn,
                        const std::vector<std::size_t>& frames, std::size_t stop_after) {
  keep_buffers_on_heap();
  AdamW opt(params, {cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps});
  TrainResult res;
  Checkpoint& ck = res.checkpoint;
  ck.config_hash = config_hash(cfg);
  ck.seed = seed;
  ck.total_steps = total;

  const fs::path latest = ckpt_dir.empty() ? fs::path{} : ckpt_dir / "latest.isck";
  if (!ckpt_dir.empty()) {
    fs::create_directories(ckpt_dir);
    if (fs::exists(latest)) {
      Checkpoint old = read_checkpoint(latest);
      if (old.config_hash == ck.config_hash && old.seed == seed && old.total_steps == total) {
        restore_parameters(old, params, &opt);
        ck.step = old.step;
        ck.losses = old.losses;
        res.resumed = true;
        log::info(tag, ": resuming at update ", ck.step, " of ", total);
      }
    }
  }

  auto snapshot = [&]() {
    ck.adam_steps = opt.steps();
    ck.tensors.clear();
    for (std::size_t i = 0; i < params.size(); ++i)
      ck.tensors.push_back({params[i]->name, params[i]->value, opt.first_moments()[i],
                            opt.second_moments()[i]});
  };
  const std::size_t every =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.checkpoint_every * total)));

  const std::size_t end = stop_after == 0 ? total : std::min(total, stop_after);
  for (std::size_t step = ck.step; step < end; ++step) {
    // Every update draws from its own stream, so a resumed run replays the
    // same batches and masks as an uninterrupted one.
    Rng rng(mix_seed(seed, step));
    const std::vector<std::size_t> batch = draw_batch(frames, cfg.batch_frames, rng);
    const double lr = lr_at(step, total, cfg.peak_lr, cfg.warmup_fraction);
    ag::Graph g;
    StepContext ctx{g, batch, step, rng};
    std::size_t fb = 0;
    ag::Var loss = loss_fn(ctx, &fb);
    res.fallbacks += fb;
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value))
      throw NumericalError(tag + ": training diverged at update " + std::to_string(step) +
                           " (lr " + std::to_string(lr) + ", loss " + std::to_string(value) + ")");
    opt.zero_grad();
    g.backward(loss);
    opt.step(lr);
    ck.losses.push_back(value);
    ck.step = step + 1;
    if (ck.step % std::max<std::size_t>(1, total / 20) == 0 || ck.step == total)
      log::info(tag, ": update ", ck.step, "/", total, " loss ", value, " lr ", lr);
    if (!ckpt_dir.empty() && (ck.step % every == 0 || ck.step == end)) {
      snapshot();
      write_checkpoint(latest, ck);
    }
  }
  snapshot();
  if (!ckpt_dir.empty() && ck.step == total) write_checkpoint(ckpt_dir / "final.isck", ck);
  return res;
}

std::vector<std::size_t> frame_counts(const EncoderConfig& enc, const TrainingData& data) {
  std::vector<std::size_t> frames;
  for (std::size_t u = 0; u < data.waves.size(); ++u) {
    const std::size_t t = enc.frame_count(data.waves[u].size());
    if (t == 0)
      throw ContractError("utterance " + std::to_string(u) + " is shorter than the receptive field");
    frames.push_back(t);
  }
  if (frames.empty()) throw ContractError("no training utterances");
  return frames;
}

std::vector<MaskSpec> batch_masks(const EncoderConfig& enc, const std::vector<std::size_t>& batch,
                                  const std::vector<std::size_t>& frames, Rng& rng) {
  std::vector<MaskSpec> masks;
  for (std::size_t u : batch)
    masks.push_back(frames[u] < enc.mask_span ? MaskSpec{}
                                              : sample_mask(frames[u], enc.mask_prob,
                                                            enc.mask_span, rng));
  return masks;
}

std::vector<std::span<const double>> batch_waves(const TrainingData& data,
                                                 const std::vector<std::size_t>& batch) {
  std::vector<std::span<const double>> w;
  for (std::size_t u : batch) w.push_back(data.waves[u]);
  return w;
}

}  // namespace

TrainResult train_iteration(const RunConfig& cfg, const TrainingData& data, std::uint64_t seed,
                            const fs::path& ckpt_dir, std::size_t stop_after) {
  cfg.validate();
  const std::vector<std::size_t> frames = frame_counts(cfg.encoder, data);
  if (data.labels.size() != data.waves.size())
    throw ContractError("train_iteration: " + std::to_string(data.labels.size()) +
                        " label sequences for " + std::to_string(data.waves.size()) +
                        " utterances");
  for (std::size_t u = 0; u < frames.size(); ++u)
    if (data.labels[u].size() != frames[u])
      throw ContractError("train_iteration: utterance " + std::to_string(u) + " has " +
                          std::to_string(data.labels[u].size()) + " labels for " +
                          std::to_string(frames[u]) + " frames");

  Encoder enc(cfg.encoder, mix_seed(seed, "encoder"));
  Codebook cb = make_codebook(data.vocab, cfg.encoder.final_proj_dim, cfg.temperature,
                              mix_seed(seed, "codebook"));
  std::vector<ag::Parameter*> params = enc.parameters();
  params.push_back(&cb.embeddings);

  auto loss_fn = [&](StepContext& ctx, std::size_t* fallbacks) {
    const std::vector<MaskSpec> masks = batch_masks(cfg.encoder, ctx.batch, frames, ctx.rng);
    const auto waves = batch_waves(data, ctx.batch);
    ConvOutput conv = enc.conv_encode(ctx.graph, waves, true);
    EncoderOutput out = enc.forward(ctx.graph, conv, masks, true);
    std::vector<const PseudoLabelSequence*> labels;
    for (std::size_t u : ctx.batch) labels.push_back(&data.labels[u]);
    const MaskedTargets t =
        build_targets(cfg.policy, masks, labels, data.vocab, cfg.negatives, ctx.rng);
    *fallbacks = t.fallbacks;
    if (t.rows.empty()) return ctx.graph.constant(Matrix(1, 1));
    ag::Var pred = ag::gather_rows(out.final_proj, t.rows);
    return masked_loss(pred, ctx.graph.param(cb.embeddings), t.sets, cb.temperature, t.weights);
  };
  const std::string tag = "train[" + to_string(cfg.policy) + "/" + cfg.label_source + "]";
  return run_updates(cfg, seed, cfg.total_updates, params, ckpt_dir, tag, loss_fn, frames,
                     stop_after);
}

TrainResult train_quantizer_baseline(const RunConfig& cfg, const TrainingData& data,
                                     std::uint64_t seed, const fs::path& ckpt_dir,
                                     std::size_t stop_after) {
  cfg.validate();
  const std::vector<std::size_t> frames = frame_counts(cfg.encoder, data);
  Encoder enc(cfg.encoder, mix_seed(seed, "encoder"));
  ProductQuantizer q =
      make_quantizer(cfg.encoder.conv_layers.back().channels, cfg.quantizer.groups,
                     cfg.quantizer.entries, cfg.encoder.final_proj_dim, mix_seed(seed, "quantizer"));
  std::vector<ag::Parameter*> params = enc.parameters();
  for (ag::Parameter* p : q.parameters()) params.push_back(p);
  const std::size_t total = cfg.quantizer.update_factor * cfg.total_updates;

  auto loss_fn = [&](StepContext& ctx, std::size_t* fallbacks) {
    const std::vector<MaskSpec> masks = batch_masks(cfg.encoder, ctx.batch, frames, ctx.rng);
    const auto waves = batch_waves(data, ctx.batch);
    ConvOutput conv = enc.conv_encode(ctx.graph, waves, true);
    EncoderOutput out = enc.forward(ctx.graph, conv, masks, true);
    q.temperature = gumbel_temperature(ctx.step, total, cfg.quantizer.temp_start,
                                       cfg.quantizer.temp_end);
    QuantizeOutput qo = quantize(ctx.graph, conv.features, q, ctx.rng, true, true);

    // Label each masked frame with its position among all masked frames of
    // the batch, so contrastive candidates index the quantized target rows.
    std::vector<PseudoLabelSequence> index_labels(ctx.batch.size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < ctx.batch.size(); ++i) {
      index_labels[i].labels.assign(frames[ctx.batch[i]], 0);
      for (std::size_t t : masks[i].masked_indices)
        index_labels[i].labels[t] = static_cast<int>(next++);
    }
    for (PseudoLabelSequence& l : index_labels) l.vocab_size = static_cast<int>(next);
    std::vector<const PseudoLabelSequence*> labels;
    for (const PseudoLabelSequence& l : index_labels) labels.push_back(&l);
    const MaskedTargets t = build_targets(Policy::contrastive, masks, labels, next,
                                          cfg.negatives, ctx.rng);
    *fallbacks = t.fallbacks;
    ag::Var diversity = ag::diversity_loss(qo.mean_probs, q.groups);
    if (t.rows.empty()) return ag::scale(diversity, cfg.quantizer.alpha);
    std::vector<std::vector<std::size_t>> cols;
    std::vector<std::size_t> pos;
    for (const CandidateSet& s : t.sets) {
      cols.emplace_back(s.candidates.begin(), s.candidates.end());
      pos.push_back(s.target_pos);
    }
    ag::Var pred = ag::gather_rows(out.final_proj, t.rows);
    ag::Var targets = ag::gather_rows(qo.embedding, t.rows);
    ag::Var sim = similarity_loss(pred, targets, cols, pos, cfg.temperature, t.weights);
    return ag::add(sim, ag::scale(diversity, cfg.quantizer.alpha));
  };
  return run_updates(cfg, seed, total, params, ckpt_dir, "train[quantizer]", loss_fn, frames,
                     stop_after);
}

PseudoLabelSequence resample_labels(const PseudoLabelSequence& labels, std::size_t frames) {
  if (labels.size() == frames) return labels;
  if (labels.size() == 0) throw ContractError("resample_labels: empty label sequence");
  PseudoLabelSequence out;
  out.vocab_size = labels.vocab_size;
  out.labels.resize(frames);
  const double r = static_cast<double>(labels.size()) / static_cast<double>(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto src = static_cast<std::size_t>((static_cast<double>(t) + 0.5) * r);
    out.labels[t] = labels.labels[std::min(src, labels.size() - 1)];
  }
  return out;
}

std::vector<Matrix> corpus_features(std::span<const Utterance> utts, const RunConfig& cfg) {
  std::vector<Matrix> out;
  out.reserve(utts.size());
  for (const Utterance& u : utts) {
    FeatureSequence f = mfcc(u, cfg.features);
    if (cfg.deltas) f = append_deltas(f, cfg.features.delta_width);
    out.push_back(std::move(f.frames));
  }
  return out;
}

Labelling cluster_frames(std::span<const Matrix> per_utterance, std::size_t k, std::uint64_t seed,
                         std::size_t max_frames, std::size_t max_iter) {
  if (per_utterance.empty()) throw ContractError("cluster_frames: no utterances");
  const Matrix all = vstack(per_utterance);
  Rng rng(mix_seed(seed, "subsample"));
  const Matrix fit_rows = all.rows() > max_frames ? subsample_rows(all, max_frames, rng) : all;
  Labelling out;
  out.centroids = kmeans_fit(fit_rows, k, mix_seed(seed, "kmeans"), max_iter);
  for (const Matrix& m : per_utterance) out.labels.push_back(assign(m, out.centroids));
  log::info("kmeans k=", k, " on ", fit_rows.rows(), " frames: inertia ", out.centroids.inertia,
            " after ", out.centroids.iterations, " iterations");
  return out;
}

Labelling refine_labels(const Encoder& enc, std::span<const std::span<const double>> waves,
                        std::size_t layer, std::size_t k, std::uint64_t seed,
                        std::size_t max_frames, std::size_t max_iter) {
  if (layer > enc.config().num_layers)
    throw ContractError("refine_labels: layer " + std::to_string(layer) + " of a " +
                        std::to_string(enc.config().num_layers) + "-layer model");
  std::vector<Matrix> rows;
  rows.reserve(waves.size());
  for (std::span<const double> w : waves) rows.push_back(enc.extract(w).layers[layer]);
  return cluster_frames(rows, k, seed, max_frames, max_iter);
}

void write_labels(const fs::path& path, const std::vector<PseudoLabelSequence>& l) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  bin::put_magic(os, "ISPL");
  bin::put_u32(os, static_cast<std::uint32_t>(l.size()));
  for (const PseudoLabelSequence& s : l) {
    bin::put_u32(os, static_cast<std::uint32_t>(s.vocab_size));
    bin::put_u32(os, static_cast<std::uint32_t>(s.size()));
    for (int v : s.labels) bin::put_i32(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<PseudoLabelSequence> read_labels(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  bin::expect_magic(is, "ISPL", path.string());
  std::vector<PseudoLabelSequence> out(bin::get_u32(is));
  for (PseudoLabelSequence& s : out) {
    s.vocab_size = static_cast<int>(bin::get_u32(is));
    s.labels.resize(bin::get_u32(is));
    for (int& v : s.labels) {
      v = bin::get_i32(is);
      if (v < 0 || v >= s.vocab_size) throw FormatError(path.string() + ": label out of range");
    }
  }
  return out;
}

}  // namespace issl
