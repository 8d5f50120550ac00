// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/pipeline/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "issl/numcore/errors.hpp"

namespace issl {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

std::size_t to_count(const std::string& s) {
  if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return static_cast<std::size_t>(v);
}

bool to_bool(const std::string& s) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw std::invalid_argument(s);
}

std::string counts_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> to_counts(const std::string& s) {
  std::vector<std::size_t> out;
  for (const std::string& p : split(s, ',')) out.push_back(to_count(p));
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define ISSL_COUNT(key, member)                                              \
  {                                                                          \
    key, {                                                                   \
      [](const RunConfig& c) { return std::to_string(c.member); },           \
          [](RunConfig& c, const std::string& v) { c.member = to_count(v); } \
    }                                                                        \
  }
#define ISSL_REAL(key, member)                                                \
  {                                                                           \
    key, {                                                                    \
      [](const RunConfig& c) { return fmt(c.member); },                       \
          [](RunConfig& c, const std::string& v) { c.member = to_double(v); } \
    }                                                                         \
  }
#define ISSL_FLAG(key, member)                                              \
  {                                                                         \
    key, {                                                                  \
      [](const RunConfig& c) { return std::string(c.member ? "1" : "0"); }, \
          [](RunConfig& c, const std::string& v) { c.member = to_bool(v); } \
    }                                                                       \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"seed",
       {[](const RunConfig& c) { return std::to_string(c.seed); },
        [](RunConfig& c, const std::string& v) { c.seed = to_count(v); }}},
      {"corpus",
       {[](const RunConfig& c) { return c.corpus.string(); },
        [](RunConfig& c, const std::string& v) { c.corpus = v; }}},
      {"synth.seed",
       {[](const RunConfig& c) { return std::to_string(c.synth.seed); },
        [](RunConfig& c, const std::string& v) { c.synth.seed = to_count(v); }}},
      ISSL_COUNT("synth.speakers", synth.n_speakers),
      ISSL_COUNT("synth.utterances_per_speaker", synth.utterances_per_speaker),
      ISSL_COUNT("synth.phonemes", synth.n_phonemes),
      ISSL_COUNT("synth.words", synth.n_words),
      ISSL_COUNT("synth.sounds", synth.n_sounds),
      ISSL_COUNT("synth.sounds_per_phoneme", synth.sounds_per_phoneme),
      ISSL_REAL("synth.max_pitch_shift", synth.max_pitch_shift),
      {"features.num_filters",
       {[](const RunConfig& c) { return std::to_string(c.features.num_filters); },
        [](RunConfig& c, const std::string& v) {
          c.features.num_filters = static_cast<int>(to_count(v));
        }}},
      {"features.num_ceps",
       {[](const RunConfig& c) { return std::to_string(c.features.num_ceps); },
        [](RunConfig& c, const std::string& v) {
          c.features.num_ceps = static_cast<int>(to_count(v));
        }}},
      ISSL_FLAG("features.deltas", deltas),
      {"encoder.conv_layers",
       {[](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.encoder.conv_layers.size(); ++i) {
            const ConvSpec& l = c.encoder.conv_layers[i];
            s += (i ? "," : "") + std::to_string(l.channels) + "x" + std::to_string(l.kernel) +
                 "x" + std::to_string(l.stride);
          }
          return s;
        },
        [](RunConfig& c, const std::string& v) {
          std::vector<ConvSpec> layers;
          for (const std::string& item : split(v, ',')) {
            const auto p = split(item, 'x');
            if (p.size() != 3) throw std::invalid_argument(item);
            layers.push_back({to_count(p[0]), to_count(p[1]), to_count(p[2])});
          }
          c.encoder.conv_layers = layers;
        }}},
      ISSL_COUNT("encoder.model_dim", encoder.model_dim),
      ISSL_COUNT("encoder.num_layers", encoder.num_layers),
      ISSL_COUNT("encoder.num_heads", encoder.num_heads),
      ISSL_COUNT("encoder.ffn_dim", encoder.ffn_dim),
      ISSL_COUNT("encoder.final_proj_dim", encoder.final_proj_dim),
      ISSL_REAL("encoder.mask_prob", encoder.mask_prob),
      ISSL_COUNT("encoder.mask_span", encoder.mask_span),
      {"objective.policy",
       {[](const RunConfig& c) { return to_string(c.policy); },
        [](RunConfig& c, const std::string& v) { c.policy = parse_policy(v); }}},
      ISSL_REAL("objective.temperature", temperature),
      ISSL_COUNT("objective.negatives", negatives),
      {"labels.source",
       {[](const RunConfig& c) { return c.label_source; },
        [](RunConfig& c, const std::string& v) { c.label_source = v; }}},
      {"labels.k",
       {[](const RunConfig& c) { return counts_text(c.k_per_iteration); },
        [](RunConfig& c, const std::string& v) { c.k_per_iteration = to_counts(v); }}},
      {"labels.cluster_layer",
       {[](const RunConfig& c) { return counts_text(c.cluster_layer); },
        [](RunConfig& c, const std::string& v) { c.cluster_layer = to_counts(v); }}},
      ISSL_COUNT("kmeans.max_frames", kmeans_max_frames),
      ISSL_COUNT("kmeans.max_iter", kmeans_max_iter),
      ISSL_COUNT("train.updates", total_updates),
      ISSL_REAL("train.peak_lr", peak_lr),
      ISSL_REAL("train.warmup", warmup_fraction),
      ISSL_COUNT("train.batch_frames", batch_frames),
      ISSL_REAL("train.beta1", beta1),
      ISSL_REAL("train.beta2", beta2),
      ISSL_REAL("train.weight_decay", weight_decay),
      ISSL_REAL("train.adam_eps", adam_eps),
      ISSL_REAL("train.checkpoint_every", checkpoint_every),
      ISSL_COUNT("quantizer.groups", quantizer.groups),
      ISSL_COUNT("quantizer.entries", quantizer.entries),
      ISSL_REAL("quantizer.alpha", quantizer.alpha),
      ISSL_REAL("quantizer.temp_start", quantizer.temp_start),
      ISSL_REAL("quantizer.temp_end", quantizer.temp_end),
      ISSL_COUNT("quantizer.update_factor", quantizer.update_factor),
      ISSL_COUNT("probe.samples", probe.samples),
      ISSL_COUNT("probe.splits", probe.splits),
      {"probe.eps",
       {[](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.probe.eps_grid.size(); ++i)
            s += (i ? "," : "") + fmt(c.probe.eps_grid[i]);
          return s;
        },
        [](RunConfig& c, const std::string& v) {
          c.probe.eps_grid.clear();
          for (const std::string& p : split(v, ',')) c.probe.eps_grid.push_back(to_double(p));
        }}},
      ISSL_FLAG("experiment.iteration3", iteration3),
      ISSL_FLAG("experiment.quantizer", quantizer_baseline),
      ISSL_FLAG("experiment.random", random_baseline),
  };
  return table;
}

#undef ISSL_COUNT
#undef ISSL_REAL
#undef ISSL_FLAG

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  encoder.validate();
  synth.validate();
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) fail("train.warmup must be in (0, 1)");
  if (!(peak_lr > 0.0)) fail("train.peak_lr must be positive");
  if (batch_frames == 0) fail("train.batch_frames must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (weight_decay < 0.0 || !(adam_eps > 0.0)) fail("bad optimizer constants");
  if (!(checkpoint_every > 0.0 && checkpoint_every <= 1.0))
    fail("train.checkpoint_every must be in (0, 1]");
  if (!(temperature > 0.0)) fail("objective.temperature must be positive");
  if (negatives == 0) fail("objective.negatives must be positive");
  if (k_per_iteration.empty()) fail("labels.k is empty");
  for (std::size_t k : k_per_iteration)
    if (k < 2) fail("labels.k entries must be at least 2");
  for (std::size_t l : cluster_layer)
    if (l > encoder.num_layers)
      fail("labels.cluster_layer " + std::to_string(l) + " exceeds num_layers " +
           std::to_string(encoder.num_layers));
  if (label_source != "online-quantizer") {
    const std::size_t it = label_iteration();
    if (it > k_per_iteration.size()) fail("labels.k has no entry for " + label_source);
    if (it >= 2 && it - 2 >= cluster_layer.size())
      fail("labels.cluster_layer has no entry for " + label_source);
  }
  if (iteration3 && (k_per_iteration.size() < 3 || cluster_layer.size() < 2))
    fail("experiment.iteration3 needs three labels.k and two labels.cluster_layer entries");
  if (k_per_iteration.size() < 2 || cluster_layer.empty())
    fail("experiments need labels for iteration 2");
  if (quantizer.update_factor == 0) fail("quantizer.update_factor must be positive");
  if (quantizer.alpha < 0.0) fail("quantizer.alpha must be non-negative");
  if (quantizer.groups == 0 || quantizer.entries < 2) fail("bad quantizer geometry");
  if (encoder.final_proj_dim % quantizer.groups != 0)
    fail("encoder.final_proj_dim must be divisible by quantizer.groups");
  if (!(quantizer.temp_start > 0.0 && quantizer.temp_end > 0.0))
    fail("quantizer temperatures must be positive");
  if (probe.samples == 0 || probe.splits == 0 || probe.eps_grid.empty())
    fail("probe needs samples, splits and an eps grid");
  for (double e : probe.eps_grid)
    if (e < 0.0) fail("probe.eps must be non-negative");
  if (features.num_ceps < 1 || features.num_filters < features.num_ceps)
    fail("features.num_filters must be at least features.num_ceps");
}

std::size_t RunConfig::label_iteration() const {
  if (label_source == "online-quantizer") return 0;
  const std::string prefix = "kmeans-iter";
  if (label_source.rfind(prefix, 0) != 0)
    throw ConfigError("labels.source '" + label_source +
                      "' (expected kmeans-iter<N> or online-quantizer)");
  try {
    const std::size_t n = to_count(label_source.substr(prefix.size()));
    if (n == 0) throw std::invalid_argument("0");
    return n;
  } catch (const std::logic_error&) {
    throw ConfigError("labels.source '" + label_source + "' has no iteration number");
  }
}

std::size_t RunConfig::k_for(std::size_t iteration) const {
  if (iteration == 0 || iteration > k_per_iteration.size())
    throw ConfigError("labels.k has no entry for iteration " + std::to_string(iteration));
  return k_per_iteration[iteration - 1];
}

std::size_t RunConfig::layer_for(std::size_t iteration) const {
  if (iteration < 2 || iteration - 2 >= cluster_layer.size())
    throw ConfigError("labels.cluster_layer has no entry for iteration " +
                      std::to_string(iteration));
  return cluster_layer[iteration - 2];
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value '" + value + "' for " + key);
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string canonical_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return sha256_hex(ss.str());
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(canonical_text(cfg)); }

}  // namespace issl
