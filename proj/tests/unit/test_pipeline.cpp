// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include "doctest.h"
#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"
#include "issl/numcore/rng.hpp"
#include "issl/pipeline/experiment.hpp"
#include "issl/pipeline/train.hpp"
#include "issl/synthcorpus/synth.hpp"

using namespace issl;
namespace fs = std::filesystem;

namespace {

// A corpus and model small enough for unit tests.
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.synth.n_speakers = 4;
  cfg.synth.utterances_per_speaker = 6;
  cfg.synth.n_words = 30;
  cfg.synth.n_phonemes = 8;
  cfg.encoder.model_dim = 16;
  cfg.encoder.num_layers = 2;
  cfg.encoder.num_heads = 2;
  cfg.encoder.ffn_dim = 32;
  cfg.encoder.final_proj_dim = 16;
  cfg.encoder.conv_layers = {{8, 16, 4}, {16, 3, 2}, {16, 3, 2}};
  cfg.batch_frames = 48;
  cfg.total_updates = 20;
  cfg.k_per_iteration = {8, 12, 12};
  cfg.cluster_layer = {1, 2};
  cfg.negatives = 10;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("issl_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct TinyData {
  std::vector<Utterance> utts;
  TrainingData data;
};

TinyData tiny_data(const RunConfig& cfg, std::size_t vocab, bool random_labels) {
  TinyData t;
  t.utts = generate_utterances(cfg.synth);
  for (const Utterance& u : t.utts) t.data.waves.push_back(u.samples);
  Rng rng(99);
  if (random_labels) {
    for (const Utterance& u : t.utts) {
      PseudoLabelSequence s;
      s.vocab_size = static_cast<int>(vocab);
      for (std::size_t i = 0; i < cfg.encoder.frame_count(u.samples.size()); ++i)
        s.labels.push_back(static_cast<int>(rng.below(vocab)));
      t.data.labels.push_back(std::move(s));
    }
  } else {
    Labelling lab = cluster_frames(corpus_features(t.utts, cfg), vocab, 5, 100000, 50);
    for (std::size_t u = 0; u < t.utts.size(); ++u)
      t.data.labels.push_back(
          resample_labels(lab.labels[u], cfg.encoder.frame_count(t.utts[u].samples.size())));
  }
  t.data.vocab = vocab;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool identical(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::ranges::equal(a.data(), b.data());
}

bool same_tensors(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size() || a.step != b.step || a.losses != b.losses)
    return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const Tensor &x = a.tensors[i], &y = b.tensors[i];
    if (x.name != y.name || !identical(x.value, y.value) || !identical(x.adam_m, y.adam_m) ||
        !identical(x.adam_v, y.adam_v))
      return false;
  }
  return true;
}

struct Quiet {
  Quiet() { log::set_level(log::Level::kWarn); }
} quiet;

}  // namespace

TEST_CASE("learning-rate schedule") {
  const std::size_t total = 5000;
  CHECK(lr_at(0, total, 5e-4, 0.08) == 0.0);
  CHECK(lr_at(400, total, 5e-4, 0.08) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(total, total, 5e-4, 0.08) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(lr_at(200, total, 5e-4, 0.08) == doctest::Approx(2.5e-4));
  CHECK(lr_at(2700, total, 5e-4, 0.08) == doctest::Approx(2.5e-4));
  double prev = -1;
  for (std::size_t s = 0; s <= 400; s += 10) {
    CHECK(lr_at(s, total, 5e-4, 0.08) > prev);
    prev = lr_at(s, total, 5e-4, 0.08);
  }
  for (std::size_t s = 410; s <= total; s += 10) {
    CHECK(lr_at(s, total, 5e-4, 0.08) < prev);
    prev = lr_at(s, total, 5e-4, 0.08);
  }
  CHECK_THROWS_AS(lr_at(total + 1, total, 5e-4, 0.08), ContractError);
}

TEST_CASE("config text round trip and errors") {
  RunConfig cfg = parse_config(
      "# comment\nseed = 7\nobjective.policy = contrastive\nlabels.k = 50, 200\n"
      "labels.cluster_layer = 2\ntrain.updates = 123\n");
  CHECK(cfg.seed == 7);
  CHECK(cfg.policy == Policy::contrastive);
  CHECK(cfg.k_per_iteration == std::vector<std::size_t>{50, 200});
  CHECK(cfg.total_updates == 123);
  CHECK(cfg.k_for(1) == 50);
  CHECK(cfg.k_for(2) == 200);
  CHECK(cfg.layer_for(2) == 2);

  const RunConfig back = parse_config(canonical_text(cfg));
  CHECK(canonical_text(back) == canonical_text(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(config_hash(RunConfig{}) != config_hash(cfg));
  const std::string text = canonical_text(cfg);
  CHECK(config_keys().size() == static_cast<std::size_t>(std::ranges::count(text, '\n')));

  // The declared defaults.
  const RunConfig d;
  CHECK(d.k_for(1) == 100);
  CHECK(d.k_for(2) == 500);
  CHECK(d.k_for(3) == 500);
  CHECK(d.peak_lr == 5e-4);
  CHECK(d.warmup_fraction == 0.08);
  CHECK(d.quantizer.update_factor == 2);

  CHECK_THROWS_AS(parse_config("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.updates = many\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.warmup = 1.5\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_config("train.warmup = 0\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_config("labels.cluster_layer = 7\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_config("objective.policy = both\n"), ConfigError);
  try {
    parse_config("seed = 1\n\nnope = 2\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("label resampling keeps the nearest frame") {
  PseudoLabelSequence s;
  s.vocab_size = 9;
  s.labels = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(resample_labels(s, 9).labels == s.labels);
  const PseudoLabelSequence r = resample_labels(s, 3);
  CHECK(r.vocab_size == 9);
  CHECK(r.labels.size() == 3);
  CHECK(std::is_sorted(r.labels.begin(), r.labels.end()));
  const PseudoLabelSequence up = resample_labels(s, 18);
  CHECK(up.labels.size() == 18);
  CHECK(up.labels.front() == 0);
  CHECK(up.labels.back() == 8);
}

TEST_CASE("labels file round trip") {
  const fs::path dir = scratch("labels");
  std::vector<PseudoLabelSequence> l(2);
  l[0].vocab_size = 5, l[0].labels = {0, 4, 2};
  l[1].vocab_size = 5, l[1].labels = {};
  write_labels(dir / "x.ispl", l);
  const auto back = read_labels(dir / "x.ispl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].labels == l[0].labels);
  CHECK(back[1].labels.empty());
  CHECK(back[0].vocab_size == 5);
}

TEST_CASE("smoke run lowers the training loss") {
  RunConfig cfg = tiny_config();
  cfg.total_updates = 50;
  cfg.peak_lr = 2e-3;
  const TinyData t = tiny_data(cfg, 8, false);
  for (Policy p : {Policy::predictive, Policy::contrastive}) {
    cfg.policy = p;
    const TrainResult r = train_iteration(cfg, t.data, 3);
    REQUIRE(r.checkpoint.losses.size() == 50);
    const auto& l = r.checkpoint.losses;
    const double first = std::accumulate(l.begin(), l.begin() + 5, 0.0) / 5;
    const double last = std::accumulate(l.end() - 5, l.end(), 0.0) / 5;
    CHECK(last < first);
  }
}

TEST_CASE("first predictive loss is near log V for a fresh model") {
  RunConfig cfg = tiny_config();
  cfg.encoder.final_proj_dim = 256;
  cfg.total_updates = 1;
  const TinyData t = tiny_data(cfg, 100, true);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TrainResult r = train_iteration(cfg, t.data, seed);
    CHECK(std::abs(r.checkpoint.losses.front() - std::log(100.0)) <= 0.5);
  }
}

TEST_CASE("same seed gives bit-identical checkpoints; resume matches") {
  RunConfig cfg = tiny_config();
  const TinyData t = tiny_data(cfg, 8, false);
  const fs::path a = scratch("ckA"), b = scratch("ckB");
  train_iteration(cfg, t.data, 11, a);
  train_iteration(cfg, t.data, 11, b);
  CHECK(slurp(a / "final.isck") == slurp(b / "final.isck"));
  const TrainResult other = train_iteration(cfg, t.data, 12);
  CHECK(!same_tensors(other.checkpoint, read_checkpoint(a / "final.isck")));

  SUBCASE("interrupted run resumes to the same state") {
    const fs::path c = scratch("ckC");
    const TrainResult part = train_iteration(cfg, t.data, 11, c, 7);
    CHECK(part.checkpoint.step == 7);
    CHECK(!fs::exists(c / "final.isck"));
    CHECK(read_checkpoint(c / "latest.isck").step == 7);
    const TrainResult rest = train_iteration(cfg, t.data, 11, c);
    CHECK(rest.resumed);
    CHECK(slurp(c / "final.isck") == slurp(a / "final.isck"));
  }

  SUBCASE("a checkpoint from another config is not resumed") {
    const fs::path c = scratch("ckE");
    train_iteration(cfg, t.data, 11, c, 7);
    RunConfig other = cfg;
    other.peak_lr = 1e-3;
    CHECK(!train_iteration(other, t.data, 11, c).resumed);
  }
}

TEST_CASE("checkpoint reload reproduces evaluation outputs exactly") {
  RunConfig cfg = tiny_config();
  const TinyData t = tiny_data(cfg, 8, false);
  const fs::path dir = scratch("reload");
  const TrainResult r = train_iteration(cfg, t.data, 21, dir);
  const Encoder a = load_encoder(r.checkpoint, cfg.encoder);
  const Encoder b = load_encoder(read_checkpoint(dir / "final.isck"), cfg.encoder);
  for (std::size_t u = 0; u < 3; ++u) {
    const LayerActivations x = a.extract(t.utts[u].samples), y = b.extract(t.utts[u].samples);
    REQUIRE(x.layers.size() == y.layers.size());
    for (std::size_t l = 0; l < x.layers.size(); ++l)
      CHECK(identical(x.layers[l], y.layers[l]));
    CHECK(identical(x.final_proj, y.final_proj));
  }
  // A missing parameter is a format error.
  Checkpoint broken = r.checkpoint;
  broken.tensors.erase(broken.tensors.begin());
  CHECK_THROWS_AS(load_encoder(broken, cfg.encoder), FormatError);
  // Truncated file.
  const std::string bytes = slurp(dir / "final.isck");
  std::ofstream(dir / "cut.isck", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(read_checkpoint(dir / "cut.isck"), FormatError);
}

TEST_CASE("refined labels are reproducible and use the requested layer and k") {
  RunConfig cfg = tiny_config();
  const TinyData t = tiny_data(cfg, 8, false);
  const TrainResult r = train_iteration(cfg, t.data, 5);
  const Encoder enc = load_encoder(r.checkpoint, cfg.encoder);
  const Labelling a = refine_labels(enc, t.data.waves, 2, 12, 9, 100000, 50);
  const Labelling b = refine_labels(enc, t.data.waves, 2, 12, 9, 100000, 50);
  REQUIRE(a.labels.size() == t.utts.size());
  for (std::size_t u = 0; u < a.labels.size(); ++u) {
    CHECK(a.labels[u].labels == b.labels[u].labels);
    CHECK(a.labels[u].vocab_size == 12);
    CHECK(a.labels[u].size() == cfg.encoder.frame_count(t.utts[u].samples.size()));
  }
  CHECK(a.centroids.means.rows() == 12);
  CHECK(a.centroids.means.cols() == cfg.encoder.model_dim);
  CHECK_THROWS(refine_labels(enc, t.data.waves, 3, 12, 9, 100000, 50));
}

TEST_CASE("quantizer baseline runs twice the updates") {
  RunConfig cfg = tiny_config();
  cfg.total_updates = 6;
  const TinyData t = tiny_data(cfg, 8, false);
  const TrainResult r = train_quantizer_baseline(cfg, t.data, 8);
  CHECK(r.checkpoint.step == 12);
  CHECK(r.checkpoint.losses.size() == 12);
  for (double l : r.checkpoint.losses) CHECK(std::isfinite(l));
}

TEST_CASE("experiment report shape, plot, manifest and determinism") {
  RunConfig cfg = tiny_config();
  cfg.total_updates = 4;
  cfg.quantizer.update_factor = 2;
  cfg.probe.eps_grid = {1e-6, 1e-2};
  const fs::path a = scratch("expA"), b = scratch("expB");
  const ExperimentResult ra = run_experiment(cfg, a);
  const std::size_t L1 = cfg.encoder.num_layers + 1;

  std::set<std::string> ids;
  for (const ModelRecord& m : ra.models) ids.insert(m.id);
  CHECK(ids == std::set<std::string>{"iter1-predictive", "iter1-contrastive", "iter2-predictive",
                                     "iter2-contrastive", "quantizer", "random"});
  CHECK(ra.rows.size() == 6 * 3 * L1 * 9);
  std::size_t four = 0;
  for (const ReportRow& r : ra.rows)
    four += r.model_id.rfind("iter", 0) == 0 ? 1 : 0;
  CHECK(four == 4 * 3 * L1 * 9);
  for (const ModelRecord& m : ra.models) {
    if (m.id == "quantizer") CHECK(m.updates == 8);
    else if (m.id == "random") CHECK(m.checkpoint.empty());
    else CHECK(m.updates == 4);
    if (m.id != "random") {
      CHECK(fs::exists(a / m.checkpoint));
      CHECK(m.checkpoint_hash == sha256_file(a / m.checkpoint));
    }
  }
  for (const ReportRow& r : ra.rows) {
    CHECK(r.fit.score >= 0.0);
    CHECK(r.fit.score <= 1.0);
  }
  const std::string svg = slurp(ra.plot_svg);
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);  // the random baseline
  CHECK(slurp(ra.manifest_json).find("\"checkpoint_sha256\"") != std::string::npos);
  CHECK(slurp(a / "state.txt").find("report done") != std::string::npos);

  const ExperimentResult rb = run_experiment(cfg, b);
  CHECK(slurp(ra.report_csv) == slurp(rb.report_csv));
  CHECK(slurp(ra.summary_csv) == slurp(rb.summary_csv));
  CHECK(slurp(ra.manifest_json) == slurp(rb.manifest_json));

  SUBCASE("a rerun reuses finished stages") {
    const auto before = fs::last_write_time(a / ra.models[0].checkpoint);
    const ExperimentResult again = run_experiment(cfg, a);
    CHECK(fs::last_write_time(a / again.models[0].checkpoint) == before);
    CHECK(slurp(again.report_csv) == slurp(ra.report_csv));
  }

  SUBCASE("a failing stage is named in the state file") {
    RunConfig bad = cfg;
    bad.corpus = a / "missing" / "manifest.txt";
    const fs::path c = scratch("expFail");
    CHECK_THROWS(run_experiment(bad, c));
    CHECK(slurp(c / "state.txt").find("corpus failed") != std::string::npos);
  }
}
