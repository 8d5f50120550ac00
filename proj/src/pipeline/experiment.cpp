// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/pipeline/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"
#include "issl/pipeline/train.hpp"
#include "issl/synthcorpus/synth.hpp"
#include "json.hpp"

namespace issl {

namespace fs = std::filesystem;

ProbeTokens probe_tokens(std::span<const Utterance> utts) {
  ProbeTokens t;
  for (std::size_t i = 0; i < kUnits.size(); ++i) {
    t.tokens[i] = token_inventory(utts, kUnits[i]);
    for (const Token& tok : t.tokens[i]) t.labels[i].push_back(tok.label);
  }
  return t;
}

std::array<std::vector<Matrix>, 3> pool_layers(const Encoder& enc, std::span<const Utterance> utts,
                                               const ProbeTokens& toks) {
  const std::size_t L = enc.config().num_layers + 1, d = enc.config().model_dim;
  std::array<std::vector<Matrix>, 3> out;
  // Tokens of each utterance, per unit.
  std::vector<std::array<std::vector<std::size_t>, 3>> by_utt(utts.size());
  for (std::size_t k = 0; k < kUnits.size(); ++k) {
    out[k].assign(L, Matrix(toks.tokens[k].size(), d));
    for (std::size_t i = 0; i < toks.tokens[k].size(); ++i)
      by_utt.at(toks.tokens[k][i].utterance)[k].push_back(i);
  }
  for (std::size_t u = 0; u < utts.size(); ++u) {
    const LayerActivations acts = enc.extract(utts[u].samples);
    const std::size_t frames = acts.num_frames();
    for (std::size_t k = 0; k < kUnits.size(); ++k)
      for (std::size_t i : by_utt[u][k]) {
        const Token& tok = toks.tokens[k][i];
        const auto [s, e] = rescale_span(tok.start, tok.end, utts[u].num_frames(), frames);
        for (std::size_t l = 0; l < L; ++l) {
          const std::vector<double> v = pool_token(acts.layers[l], s, e, kUnits[k]);
          std::copy(v.begin(), v.end(), out[k][l].row(i).begin());
        }
      }
  }
  return out;
}

std::vector<ReportRow> probe_model(const Encoder& enc, std::span<const Utterance> utts,
                                   const ProbeTokens& toks, const ProbeConfig& cfg,
                                   std::uint64_t seed, const std::string& model_id) {
  const auto pooled = pool_layers(enc, utts, toks);
  std::vector<ReportRow> rows;
  for (std::size_t k = 0; k < kUnits.size(); ++k) {
    const ProbeResult r =
        cca_evaluate(pooled[k], toks.labels[k], kUnits[k], cfg, mix_seed(seed, k));
    for (const FitRecord& f : r.fits) rows.push_back({model_id, kUnits[k], f});
    std::string means;
    for (double m : r.layer_means) {
      char buf[16];
      std::snprintf(buf, sizeof buf, " %.3f", m);
      means += buf;
    }
    log::info("probe ", model_id, " ", to_string(kUnits[k]), ":", means);
  }
  return rows;
}

double final_layers_mean(const std::vector<ReportRow>& rows, const std::string& model_id,
                         Unit unit) {
  std::size_t top = 0;
  bool any = false;
  for (const ReportRow& r : rows)
    if (r.model_id == model_id && r.unit == unit) top = std::max(top, r.fit.layer), any = true;
  if (!any) throw ContractError("no report rows for " + model_id + " / " + to_string(unit));
  double s = 0.0;
  std::size_t n = 0;
  for (const ReportRow& r : rows)
    if (r.model_id == model_id && r.unit == unit && r.fit.layer + 1 >= top) s += r.fit.score, ++n;
  return s / static_cast<double>(n);
}

namespace {

using Clock = std::chrono::steady_clock;

std::string short_key(const std::string& h) { return h.substr(0, 16); }

// Canonical config text without the keys under the given prefixes.
std::string config_text_without(const RunConfig& cfg, std::initializer_list<const char*> drop) {
  std::stringstream in(canonical_text(cfg));
  std::string line, out;
  while (std::getline(in, line)) {
    const bool skip = std::any_of(drop.begin(), drop.end(), [&](const char* p) {
      return line.rfind(p, 0) == 0;
    });
    if (!skip) out += line + "\n";
  }
  return out;
}

// Canonical config lines starting with `prefix`.
std::string config_text_with(const RunConfig& cfg, const std::string& prefix) {
  std::stringstream in(canonical_text(cfg));
  std::string line, out;
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0) out += line + "\n";
  return out;
}

// Keys of a run that every training stage depends on.
std::string training_text(const RunConfig& cfg) {
  return config_text_without(cfg, {"probe.", "experiment.", "corpus ", "synth.", "objective.policy",
                                   "labels.source"});
}

class Stages {
 public:
  Stages(fs::path out_dir) : out_(std::move(out_dir)) {
    fs::create_directories(out_ / "artifacts");
  }

  fs::path dir(const std::string& stage, const std::string& key) const {
    return out_ / "artifacts" / (stage + "-" + short_key(key));
  }
  bool done(const std::string& stage, const std::string& key) const {
    return fs::exists(dir(stage, key) / "DONE");
  }
  void finish(const std::string& stage, const std::string& key) {
    std::ofstream(dir(stage, key) / "DONE") << key << "\n";
    record(stage + " done " + short_key(key));
  }
  void fail(const std::string& stage, const std::string& what) {
    record(stage + " failed: " + what);
  }
  void start(const std::string& stage) { record(stage + " running"); }

 private:
  void record(const std::string& line) {
    // The latest status of every stage, in first-seen order.
    const std::string stage = line.substr(0, line.find(' '));
    auto it = std::find_if(lines_.begin(), lines_.end(),
                           [&](const std::string& l) { return l.substr(0, l.find(' ')) == stage; });
    if (it == lines_.end())
      lines_.push_back(line);
    else
      *it = line;
    std::ofstream os(out_ / "state.txt");
    for (const std::string& l : lines_) os << l << "\n";
  }

  fs::path out_;
  std::vector<std::string> lines_;
};

std::string corpus_digest(const fs::path& manifest) {
  std::string all = sha256_file(manifest);
  const fs::path root = manifest.parent_path();
  std::ifstream is(manifest);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string id, spk, audio, ali;
    ss >> id >> spk >> audio >> ali;
    all += sha256_file(root / audio) + sha256_file(root / ali);
  }
  return sha256_hex(all);
}

struct Trained {
  Encoder encoder;
  ModelRecord record;
};

}  // namespace

std::vector<Utterance> prepare_corpus(const RunConfig& cfg, const fs::path& out_dir,
                                      std::string* hash) {
  fs::path manifest = cfg.corpus;
  if (manifest.empty()) {
    const fs::path root = out_dir / "corpus";
    const std::string key = sha256_hex(config_text_with(cfg, "synth."));
    manifest = root / "manifest.txt";
    std::string have;
    if (fs::exists(root / "KEY")) std::ifstream(root / "KEY") >> have;
    if (have != key || !fs::exists(manifest)) {
      log::info("synthesizing corpus under ", root.string());
      fs::remove_all(root);
      generate(cfg.synth, root);
      std::ofstream(root / "KEY") << key << "\n";
    }
  }
  Corpus c = load_corpus(manifest);
  if (c.utterances.empty()) throw ContractError("corpus " + manifest.string() + " is empty");
  if (hash != nullptr) *hash = corpus_digest(manifest);
  return std::move(c.utterances);
}

void write_layer_plot(const fs::path& path, const std::vector<ReportRow>& rows) {
  // model -> unit -> layer -> (sum, n)
  std::vector<std::string> models;
  std::map<std::string, std::map<int, std::map<std::size_t, std::pair<double, int>>>> acc;
  std::size_t top = 0;
  for (const ReportRow& r : rows) {
    if (std::find(models.begin(), models.end(), r.model_id) == models.end())
      models.push_back(r.model_id);
    auto& cell = acc[r.model_id][static_cast<int>(r.unit)][r.fit.layer];
    cell.first += r.fit.score;
    cell.second += 1;
    top = std::max(top, r.fit.layer);
  }
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double pw = 300, ph = 220, left = 50, topm = 40, gap = 40;
  const double width = left + 3 * (pw + gap) + 170, height = topm + ph + 60;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "font-family=\"sans-serif\" font-size=\"12\">\n",
                width, height);
  os << buf << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t k = 0; k < kUnits.size(); ++k) {
    const double x0 = left + static_cast<double>(k) * (pw + gap), y0 = topm;
    auto px = [&](double layer) {
      return x0 + (top == 0 ? 0.0 : layer / static_cast<double>(top) * pw);
    };
    auto py = [&](double score) { return y0 + ph - score * ph; };
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" "
                  "stroke=\"#444\"/>\n<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\" "
                  "font-size=\"14\">%s</text>\n",
                  x0, y0, pw, ph, x0 + pw / 2, y0 - 12, to_string(kUnits[k]).c_str());
    os << buf;
    for (int t = 0; t <= 4; ++t) {
      const double s = t / 4.0;
      std::snprintf(buf, sizeof buf,
                    "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n"
                    "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.2f</text>\n",
                    x0, py(s), x0 + pw, py(s), x0 - 4, py(s) + 4, s);
      os << buf;
    }
    for (std::size_t l = 0; l <= top; ++l) {
      std::snprintf(buf, sizeof buf,
                    "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%zu</text>\n",
                    px(static_cast<double>(l)), y0 + ph + 16, l);
      os << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">layer</text>\n",
                  x0 + pw / 2, y0 + ph + 34);
    os << buf;
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto& unit_map = acc[models[m]];
      const auto it = unit_map.find(static_cast<int>(kUnits[k]));
      if (it == unit_map.end()) continue;
      const bool baseline = models[m] == "random";
      std::string pts;
      for (const auto& [layer, cell] : it->second) {
        std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(static_cast<double>(layer)),
                      py(cell.first / cell.second));
        pts += buf;
      }
      std::snprintf(buf, sizeof buf,
                    "<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"2\"%s points=\"%s\"/>\n",
                    baseline ? "#888" : colors[m % 8],
                    baseline ? " stroke-dasharray=\"6,4\"" : "", pts.c_str());
      os << buf;
    }
  }
  const double lx = left + 3 * (pw + gap);
  for (std::size_t m = 0; m < models.size(); ++m) {
    const bool baseline = models[m] == "random";
    const double ly = topm + 10 + 18 * static_cast<double>(m);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" "
                  "stroke-width=\"2\"%s/>\n<text x=\"%.1f\" y=\"%.1f\">%s</text>\n",
                  lx, ly, lx + 24, ly, baseline ? "#888" : colors[m % 8],
                  baseline ? " stroke-dasharray=\"6,4\"" : "", lx + 30, ly + 4,
                  models[m].c_str());
    os << buf;
  }
  os << "</svg>\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

ExperimentResult run_experiment(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  Stages stages(out_dir);
  std::string current = "corpus";
  const auto t_start = Clock::now();
  try {
    stages.start(current);
    std::string corpus_hash;
    const std::vector<Utterance> utts = prepare_corpus(cfg, out_dir, &corpus_hash);
    stages.finish(current, corpus_hash);
    std::vector<std::span<const double>> waves;
    for (const Utterance& u : utts) waves.push_back(u.samples);
    const std::string train_text = training_text(cfg);

    // Iteration-1 targets: k-means on MFCCs, resampled to the model frame rate.
    current = "labels-iter1";
    const std::string labels1_key =
        sha256_hex(current + "\n" + corpus_hash + "\n" + train_text);
    const fs::path labels1_dir = stages.dir(current, labels1_key);
    std::vector<PseudoLabelSequence> labels1;
    if (stages.done(current, labels1_key)) {
      labels1 = read_labels(labels1_dir / "labels.ispl");
    } else {
      stages.start(current);
      fs::create_directories(labels1_dir);
      const std::vector<Matrix> feats = corpus_features(utts, cfg);
      Labelling lab = cluster_frames(feats, cfg.k_for(1), mix_seed(cfg.seed, current),
                                     cfg.kmeans_max_frames, cfg.kmeans_max_iter);
      for (std::size_t u = 0; u < utts.size(); ++u)
        lab.labels[u] =
            resample_labels(lab.labels[u], cfg.encoder.frame_count(utts[u].samples.size()));
      write_centroids(labels1_dir / "centroids.iskm", lab.centroids);
      write_labels(labels1_dir / "labels.ispl", lab.labels);
      labels1 = std::move(lab.labels);
      stages.finish(current, labels1_key);
    }

    std::vector<Trained> models;
    auto train_stage = [&](const std::string& id, Policy policy, const std::string& source,
                           const std::vector<PseudoLabelSequence>& labels,
                           const std::string& labels_key) {
      current = "train-" + id;
      RunConfig mc = cfg;
      mc.policy = policy;
      mc.label_source = source;
      const std::string key = sha256_hex(current + "\n" + labels_key + "\n" + train_text);
      const fs::path dir = stages.dir(current, key);
      const std::uint64_t seed = mix_seed(cfg.seed, current);
      Checkpoint ck;
      if (stages.done(current, key)) {
        ck = read_checkpoint(dir / "final.isck");
      } else {
        stages.start(current);
        TrainingData data;
        data.waves = waves;
        const auto t0 = Clock::now();
        TrainResult r;
        if (source == "online-quantizer") {
          r = train_quantizer_baseline(mc, data, seed, dir);
        } else {
          data.labels = labels;
          data.vocab = static_cast<std::size_t>(labels.front().vocab_size);
          r = train_iteration(mc, data, seed, dir);
        }
        log::info(current, ": ", std::chrono::duration<double>(Clock::now() - t0).count(),
                  " s, ", r.fallbacks, " contrastive fallbacks");
        ck = std::move(r.checkpoint);
        fs::remove(dir / "latest.isck");
        stages.finish(current, key);
      }
      Trained t{load_encoder(ck, cfg.encoder), {}};
      t.record.id = id;
      t.record.label_source = source;
      t.record.updates = ck.step;
      t.record.checkpoint = fs::relative(dir / "final.isck", out_dir).string();
      t.record.checkpoint_hash = sha256_file(dir / "final.isck");
      t.record.config_hash = ck.config_hash;
      t.record.initial_loss = ck.losses.empty() ? 0.0 : ck.losses.front();
      t.record.final_loss = ck.losses.empty() ? 0.0 : ck.losses.back();
      models.push_back(std::move(t));
      return models.size() - 1;
    };

    auto refine_stage = [&](const std::string& name, std::size_t source_model,
                            std::size_t iteration, std::string* key_out) {
      current = name;
      const std::size_t layer = cfg.layer_for(iteration), k = cfg.k_for(iteration);
      const std::string key =
          sha256_hex(current + "\n" + models[source_model].record.checkpoint_hash + "\n" +
                     std::to_string(layer) + " " + std::to_string(k) + "\n" + train_text);
      *key_out = key;
      const fs::path dir = stages.dir(current, key);
      if (stages.done(current, key)) return read_labels(dir / "labels.ispl");
      stages.start(current);
      fs::create_directories(dir);
      Labelling lab = refine_labels(models[source_model].encoder, waves, layer, k,
                                    mix_seed(cfg.seed, current), cfg.kmeans_max_frames,
                                    cfg.kmeans_max_iter);
      write_centroids(dir / "centroids.iskm", lab.centroids);
      write_labels(dir / "labels.ispl", lab.labels);
      stages.finish(current, key);
      return lab.labels;
    };

    const Policy policies[] = {Policy::predictive, Policy::contrastive};
    std::size_t iter1[2];
    for (int p = 0; p < 2; ++p)
      iter1[p] = train_stage("iter1-" + to_string(policies[p]), policies[p], "kmeans-iter1",
                             labels1, labels1_key);
    std::size_t iter2_predictive = 0;
    for (int p = 0; p < 2; ++p) {
      std::string key;
      const auto labels =
          refine_stage("labels-iter2-" + to_string(policies[p]), iter1[p], 2, &key);
      const std::size_t m = train_stage("iter2-" + to_string(policies[p]), policies[p],
                                        "kmeans-iter2", labels, key);
      if (p == 0) iter2_predictive = m;
    }
    if (cfg.iteration3) {
      std::string key;
      const auto labels = refine_stage("labels-iter3-predictive", iter2_predictive, 3, &key);
      train_stage("iter3-predictive", Policy::predictive, "kmeans-iter3", labels, key);
    }
    if (cfg.quantizer_baseline)
      train_stage("quantizer", Policy::contrastive, "online-quantizer", {}, "none");
    if (cfg.random_baseline) {
      Trained t{Encoder(cfg.encoder, mix_seed(cfg.seed, "random")), {}};
      t.record.id = "random";
      t.record.label_source = "none";
      models.push_back(std::move(t));
    }

    // Probing: one token sample per seed, shared by every model.
    const ProbeTokens toks = probe_tokens(utts);
    const std::uint64_t probe_seed = mix_seed(cfg.seed, "probe");
    const std::string probe_text = config_text_with(cfg, "probe.");
    ExperimentResult res;
    for (Trained& t : models) {
      current = "probe-" + t.record.id;
      const std::string model_key = t.record.checkpoint_hash.empty()
                                        ? "random " + std::to_string(mix_seed(cfg.seed, "random")) +
                                              train_text
                                        : t.record.checkpoint_hash;
      const std::string key =
          sha256_hex(current + "\n" + model_key + "\n" + corpus_hash + "\n" + probe_text +
                     std::to_string(probe_seed));
      const fs::path dir = stages.dir(current, key);
      std::vector<ReportRow> rows;
      if (stages.done(current, key)) {
        rows = read_report_csv(dir / "rows.csv");
      } else {
        stages.start(current);
        fs::create_directories(dir);
        const auto t0 = Clock::now();
        rows = probe_model(t.encoder, utts, toks, cfg.probe, probe_seed, t.record.id);
        write_report_csv(dir / "rows.csv", rows);
        log::info(current, ": ", std::chrono::duration<double>(Clock::now() - t0).count(), " s");
        stages.finish(current, key);
      }
      res.rows.insert(res.rows.end(), rows.begin(), rows.end());
      res.models.push_back(t.record);
    }

    current = "report";
    res.report_csv = out_dir / "report.csv";
    res.summary_csv = out_dir / "summary.csv";
    res.plot_svg = out_dir / "layers.svg";
    res.manifest_json = out_dir / "manifest.json";
    write_report_csv(res.report_csv, res.rows);
    write_summary_csv(res.summary_csv, res.rows);
    write_layer_plot(res.plot_svg, res.rows);

    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    nlohmann::ordered_json c;
    std::stringstream in(canonical_text(cfg));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      c[line.substr(0, eq)] = line.substr(eq + 3);
    }
    j["config"] = c;
    j["corpus_hash"] = corpus_hash;
    j["utterances"] = utts.size();
    j["optimizer"] = {{"name", "adamw"},       {"beta1", cfg.beta1},
                      {"beta2", cfg.beta2},     {"weight_decay", cfg.weight_decay},
                      {"eps", cfg.adam_eps},    {"schedule", "linear warmup, linear decay"}};
    nlohmann::ordered_json ms = nlohmann::ordered_json::array();
    for (const ModelRecord& m : res.models)
      ms.push_back({{"id", m.id},
                    {"label_source", m.label_source},
                    {"updates", m.updates},
                    {"checkpoint", m.checkpoint},
                    {"checkpoint_sha256", m.checkpoint_hash},
                    {"config_sha256", m.config_hash},
                    {"initial_loss", m.initial_loss},
                    {"final_loss", m.final_loss}});
    j["models"] = ms;
    j["report"] = {{"rows", res.report_csv.filename().string()},
                   {"summary", res.summary_csv.filename().string()},
                   {"plot", res.plot_svg.filename().string()},
                   {"rows_sha256", sha256_file(res.report_csv)}};
    std::ofstream(res.manifest_json) << j.dump(2) << "\n";
    stages.finish(current, sha256_file(res.report_csv));
    log::info("experiment finished in ",
              std::chrono::duration<double>(Clock::now() - t_start).count(), " s");
    return res;
  } catch (const std::exception& e) {
    stages.fail(current, e.what());
    throw;
  }
}

}  // namespace issl
