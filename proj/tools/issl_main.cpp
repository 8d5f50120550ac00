// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// issl: corpus synthesis, pretraining, label refinement and layer-wise CCA
// probing from the command line. Every subcommand takes --config, --seed,
// --out-dir and repeated --set key=value overrides, and writes its outputs
// plus run.json (every config value in effect) under the output directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"
#include "issl/pipeline/experiment.hpp"
#include "issl/pipeline/train.hpp"
#include "issl/synthcorpus/synth.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace issl;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "out";
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  app->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_given = true; }, "run seed");
  app->add_option("--out-dir", c.out_dir, "output directory")->capture_default_str();
  app->add_option("--set", c.sets, "override one config key (key=value), repeatable");
  app->add_flag("-q,--quiet", c.quiet, "warnings only");
}

RunConfig resolve(const Common& c) {
  if (c.quiet) log::set_level(log::Level::kWarn);
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed_given) cfg.seed = c.seed;
  cfg.validate();
  fs::create_directories(c.out_dir);
  nlohmann::ordered_json j;
  j["config_sha256"] = config_hash(cfg);
  std::stringstream in(canonical_text(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j["config"][line.substr(0, eq)] = line.substr(eq + 3);
  }
  std::ofstream(fs::path(c.out_dir) / "run.json") << j.dump(2) << "\n";
  return cfg;
}

std::vector<std::span<const double>> waves_of(const std::vector<Utterance>& utts) {
  std::vector<std::span<const double>> w;
  for (const Utterance& u : utts) w.push_back(u.samples);
  return w;
}

void write_labelling(const fs::path& dir, const Labelling& lab) {
  fs::create_directories(dir);
  write_centroids(dir / "centroids.iskm", lab.centroids);
  write_labels(dir / "labels.ispl", lab.labels);
  std::printf("%s\n", (dir / "labels.ispl").string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative self-supervised speech pretraining and CCA probing"};
  app.require_subcommand(1);
  Common c;

  auto* synth = app.add_subcommand("synth", "write the synthetic corpus to <out-dir>/corpus");
  add_common(synth, c);

  auto* featurize = app.add_subcommand("featurize", "MFCC (+ deltas) per utterance");
  add_common(featurize, c);

  auto* cluster = app.add_subcommand("cluster", "k-means targets for the first iteration");
  add_common(cluster, c);

  std::string labels_path, ckpt_path, model_id = "model";
  std::size_t iteration = 2;
  bool random_model = false;
  auto* pretrain = app.add_subcommand("pretrain", "train one model from scratch");
  add_common(pretrain, c);
  pretrain->add_option("--labels", labels_path, "labels.ispl (not used by the quantizer)");

  auto* extract = app.add_subcommand("extract", "per-layer activations of every utterance");
  add_common(extract, c);
  extract->add_option("--checkpoint", ckpt_path, "checkpoint")->required();

  auto* refine = app.add_subcommand("refine", "cluster a trained model's hidden layer");
  add_common(refine, c);
  refine->add_option("--checkpoint", ckpt_path, "checkpoint")->required();
  refine->add_option("--iteration", iteration, "iteration the labels are for (>= 2)")
      ->capture_default_str();

  auto* probe = app.add_subcommand("probe", "CCA scores of every layer for every unit");
  add_common(probe, c);
  auto* probe_ck = probe->add_option("--checkpoint", ckpt_path, "checkpoint");
  probe->add_flag("--random", random_model, "probe an untrained model")->excludes(probe_ck);
  probe->add_option("--model-id", model_id, "model column of the report")->capture_default_str();

  auto* experiment = app.add_subcommand("experiment", "the full model matrix and its report");
  add_common(experiment, c);

  std::string report_path, svg_path;
  auto* plot = app.add_subcommand("plot", "SVG of score against layer");
  plot->add_option("--report", report_path, "report.csv")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", svg_path, "output SVG")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out = c.out_dir;
    if (plot->parsed()) {
      write_layer_plot(svg_path, read_report_csv(report_path));
      return 0;
    }
    const RunConfig cfg = resolve(c);

    if (experiment->parsed()) {
      const ExperimentResult r = run_experiment(cfg, out);
      std::printf("%s\n%s\n%s\n%s\n", r.report_csv.string().c_str(),
                  r.summary_csv.string().c_str(), r.plot_svg.string().c_str(),
                  r.manifest_json.string().c_str());
      return 0;
    }

    std::string corpus_hash;
    const std::vector<Utterance> utts = prepare_corpus(cfg, out, &corpus_hash);
    log::info(utts.size(), " utterances, corpus ", corpus_hash.substr(0, 16));

    if (synth->parsed()) {
      std::printf("%s\n", (out / "corpus" / "manifest.txt").string().c_str());
    } else if (featurize->parsed()) {
      const std::vector<Matrix> feats = corpus_features(utts, cfg);
      fs::create_directories(out / "features");
      for (std::size_t i = 0; i < utts.size(); ++i) {
        LayerActivations a;
        a.layers.push_back(feats[i]);
        write_activations(out / "features" / (utts[i].utterance_id + ".isac"), a);
      }
      std::printf("%zu feature files under %s\n", utts.size(), (out / "features").string().c_str());
    } else if (cluster->parsed()) {
      Labelling lab = cluster_frames(corpus_features(utts, cfg), cfg.k_for(1),
                                     mix_seed(cfg.seed, "labels-iter1"), cfg.kmeans_max_frames,
                                     cfg.kmeans_max_iter);
      for (std::size_t u = 0; u < utts.size(); ++u)
        lab.labels[u] =
            resample_labels(lab.labels[u], cfg.encoder.frame_count(utts[u].samples.size()));
      write_labelling(out / "labels-iter1", lab);
    } else if (pretrain->parsed()) {
      TrainingData data;
      data.waves = waves_of(utts);
      const fs::path dir = out / ("pretrain-" + to_string(cfg.policy));
      TrainResult r;
      if (cfg.label_source == "online-quantizer") {
        r = train_quantizer_baseline(cfg, data, mix_seed(cfg.seed, "train:quantizer"), dir);
      } else {
        if (labels_path.empty()) throw ConfigError("pretrain needs --labels for " + cfg.label_source);
        data.labels = read_labels(labels_path);
        if (data.labels.size() != utts.size())
          throw ConfigError("labels cover " + std::to_string(data.labels.size()) +
                            " utterances, corpus has " + std::to_string(utts.size()));
        data.vocab = static_cast<std::size_t>(data.labels.front().vocab_size);
        r = train_iteration(cfg, data, mix_seed(cfg.seed, "train:" + to_string(cfg.policy)), dir);
      }
      std::printf("%s\nloss %.6f -> %.6f over %zu updates\n", (dir / "final.isck").string().c_str(),
                  r.checkpoint.losses.front(), r.checkpoint.losses.back(), r.checkpoint.step);
    } else if (extract->parsed()) {
      const Encoder enc = load_encoder(read_checkpoint(ckpt_path), cfg.encoder);
      fs::create_directories(out / "activations");
      for (const Utterance& u : utts)
        write_activations(out / "activations" / (u.utterance_id + ".isac"), enc.extract(u.samples));
      std::printf("%zu activation files under %s\n", utts.size(),
                  (out / "activations").string().c_str());
    } else if (refine->parsed()) {
      if (iteration < 2) throw ConfigError("--iteration must be at least 2");
      const Encoder enc = load_encoder(read_checkpoint(ckpt_path), cfg.encoder);
      const Labelling lab = refine_labels(enc, waves_of(utts), cfg.layer_for(iteration),
                                          cfg.k_for(iteration),
                                          mix_seed(cfg.seed, "refine"), cfg.kmeans_max_frames,
                                          cfg.kmeans_max_iter);
      write_labelling(out / ("labels-iter" + std::to_string(iteration)), lab);
    } else if (probe->parsed()) {
      if (!random_model && ckpt_path.empty())
        throw ConfigError("probe needs --checkpoint or --random");
      const Encoder enc = random_model ? Encoder(cfg.encoder, mix_seed(cfg.seed, "random"))
                                       : load_encoder(read_checkpoint(ckpt_path), cfg.encoder);
      const std::vector<ReportRow> rows = probe_model(enc, utts, probe_tokens(utts), cfg.probe,
                                                      mix_seed(cfg.seed, "probe"), model_id);
      write_report_csv(out / "report.csv", rows);
      write_summary_csv(out / "summary.csv", rows);
      std::printf("%s\n%s\n", (out / "report.csv").string().c_str(),
                  (out / "summary.csv").string().c_str());
    }
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "issl: %s\n", e.what());
    return 1;
  }
}
