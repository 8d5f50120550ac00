// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/cca/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "issl/numcore/errors.hpp"
#include "issl/numcore/log.hpp"

namespace issl {

std::string to_string(Unit u) {
  switch (u) {
    case Unit::phoneme: return "phoneme";
    case Unit::word: return "word";
    case Unit::speaker: return "speaker";
  }
  return "?";
}

Unit parse_unit(const std::string& s) {
  if (s == "phoneme") return Unit::phoneme;
  if (s == "word") return Unit::word;
  if (s == "speaker") return Unit::speaker;
  throw ConfigError("unknown unit '" + s + "' (expected phoneme, word or speaker)");
}

std::vector<Token> token_inventory(std::span<const Utterance> utts, Unit unit) {
  std::vector<Token> out;
  if (unit == Unit::speaker) {
    std::vector<std::string> ids;
    for (const Utterance& u : utts) ids.push_back(u.speaker_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (std::size_t i = 0; i < utts.size(); ++i) {
      const auto pos = std::lower_bound(ids.begin(), ids.end(), utts[i].speaker_id) - ids.begin();
      out.push_back({i, 0, utts[i].num_frames(), static_cast<int>(pos)});
    }
    return out;
  }
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& spans = unit == Unit::phoneme ? utts[i].phones : utts[i].words;
    for (const Span& s : spans) {
      if (s.length() == 0) {
        log::warn("token_inventory: skipping empty span in ", utts[i].utterance_id);
        continue;
      }
      out.push_back({i, s.start, s.end, s.label});
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> middle_third(std::size_t length) {
  if (length == 0) throw ContractError("middle_third: empty span");
  if (length < 3) return {length / 2, length / 2 + 1};
  return {length / 3, length - length / 3};
}

std::pair<std::size_t, std::size_t> rescale_span(std::size_t start, std::size_t end,
                                                 std::size_t align_frames, std::size_t frames) {
  if (align_frames == frames) return {start, end};
  if (align_frames == 0) throw ContractError("rescale_span: empty alignment");
  const double r = static_cast<double>(frames) / static_cast<double>(align_frames);
  auto s = static_cast<std::size_t>(std::floor(static_cast<double>(start) * r + 0.5));
  auto e = static_cast<std::size_t>(std::floor(static_cast<double>(end) * r + 0.5));
  s = std::min(s, frames > 0 ? frames - 1 : 0);
  e = std::clamp(e, s + 1, frames);
  return {s, e};
}

std::vector<double> pool_token(const Matrix& acts, std::size_t start, std::size_t end, Unit unit) {
  if (end <= start || end > acts.rows())
    throw ContractError("pool_token: span [" + std::to_string(start) + ", " + std::to_string(end) +
                        ") outside " + std::to_string(acts.rows()) + " frames");
  std::size_t a = start, b = end;
  if (unit == Unit::phoneme) {
    const auto [lo, hi] = middle_third(end - start);
    a = start + lo;
    b = start + hi;
  }
  std::vector<double> mean(acts.cols(), 0.0);
  for (std::size_t t = a; t < b; ++t) {
    auto row = acts.row(t);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += row[c];
  }
  for (double& v : mean) v /= static_cast<double>(b - a);
  return mean;
}

std::vector<std::size_t> sample_pool(const std::vector<int>& labels, Unit unit,
                                     const SamplingCaps& caps, Rng& rng) {
  if (labels.empty()) throw ContractError("sample_pool: empty token inventory");
  std::vector<std::size_t> out;
  if (unit == Unit::speaker) {
    out.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = i;
    return out;
  }
  const std::size_t per_type = unit == Unit::phoneme ? caps.phoneme_per_type : caps.word_per_type;
  const std::size_t types = unit == Unit::phoneme ? caps.phoneme_types : caps.word_types;
  std::map<int, std::vector<std::size_t>> by_type;
  for (std::size_t i = 0; i < labels.size(); ++i) by_type[labels[i]].push_back(i);
  std::vector<std::pair<int, std::vector<std::size_t>>> ranked(by_type.begin(), by_type.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second.size() > b.second.size();
  });
  if (ranked.size() > types) ranked.resize(types);
  for (auto& [label, idx] : ranked) {
    if (idx.size() > per_type) {
      for (std::size_t i = 0; i < per_type; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(per_type);
    }
    out.insert(out.end(), idx.begin(), idx.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Matrix one_hot(const std::vector<int>& labels) {
  std::vector<int> classes = labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  Matrix y(labels.size(), classes.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin();
    y(i, static_cast<std::size_t>(c)) = 1.0;
  }
  return y;
}

Split stratified_split(const std::vector<int>& labels, const ProbeConfig& cfg, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Split s;
  for (auto& [label, idx] : by_class) {
    rng.shuffle(std::span<std::size_t>(idx));
    const double c = static_cast<double>(idx.size());
    const auto n_train =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.train_fraction * c + 0.5)));
    const std::size_t n_dev = std::min(
        idx.size() - std::min(n_train, idx.size()),
        static_cast<std::size_t>(std::floor(cfg.dev_fraction * c + 0.5)));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i < n_train)
        s.train.push_back(idx[i]);
      else if (i < n_train + n_dev)
        s.dev.push_back(idx[i]);
      else
        s.test.push_back(idx[i]);
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.dev.begin(), s.dev.end());
  std::sort(s.test.begin(), s.test.end());
  if (s.train.size() < 2 || s.dev.size() < 2 || s.test.size() < 2)
    throw ContractError("stratified_split: " + std::to_string(labels.size()) +
                        " tokens give a degenerate train/dev/test split");
  return s;
}

ProbeResult cca_evaluate(std::span<const Matrix> layer_vectors, const std::vector<int>& labels,
                         Unit unit, const ProbeConfig& cfg, std::uint64_t seed) {
  if (layer_vectors.empty()) throw ContractError("cca_evaluate: no layers");
  for (const Matrix& m : layer_vectors)
    if (m.rows() != labels.size())
      throw DimensionError("cca_evaluate: " + m.shape_string() + " vectors for " +
                           std::to_string(labels.size()) + " labels");
  if (cfg.eps_grid.empty()) throw ConfigError("cca_evaluate: empty regularization grid");
  const std::size_t L = layer_vectors.size();
  const std::size_t fits = cfg.samples * cfg.splits;
  ProbeResult res;
  res.unit = unit;
  res.fits.resize(L * fits);

  for (std::size_t s = 0; s < cfg.samples; ++s) {
    Rng srng(mix_seed(seed, s));
    const std::vector<std::size_t> pool = sample_pool(labels, unit, cfg.caps, srng);
    std::vector<int> pool_labels;
    for (std::size_t i : pool) pool_labels.push_back(labels[i]);
    const Matrix y = one_hot(pool_labels);
    for (std::size_t k = 0; k < cfg.splits; ++k) {
      Rng krng(mix_seed(mix_seed(seed, s), 1000 + k));
      Split split;
      try {
        split = stratified_split(pool_labels, cfg, krng);
      } catch (const ContractError&) {
        log::warn("cca_evaluate: degenerate split, drawing it again");
        split = stratified_split(pool_labels, cfg, krng);
      }
      auto rows_of = [&](const Matrix& m, const std::vector<std::size_t>& part) {
        std::vector<std::size_t> idx;
        idx.reserve(part.size());
        for (std::size_t p : part) idx.push_back(pool[p]);
        return gather_rows(m, idx);
      };
      const Matrix y_train = gather_rows(y, split.train);
      const Matrix y_dev = gather_rows(y, split.dev);
      const Matrix y_test = gather_rows(y, split.test);

      std::unique_ptr<CCAProblem> first;
      for (std::size_t l = 0; l < L; ++l) {
        const Matrix x_train = rows_of(layer_vectors[l], split.train);
        const Matrix x_dev = rows_of(layer_vectors[l], split.dev);
        const Matrix x_test = rows_of(layer_vectors[l], split.test);
        std::unique_ptr<CCAProblem> prob =
            first ? std::make_unique<CCAProblem>(x_train, *first)
                  : std::make_unique<CCAProblem>(x_train, y_train);
        double best = -1.0;
        CCAModel best_model;
        for (double ex : cfg.eps_grid)
          for (double ey : cfg.eps_grid) {
            CCAModel m = prob->fit(ex, ey);
            const double dev = heldout_score(m, x_dev, y_dev);
            if (dev > best) {
              best = dev;
              best_model = std::move(m);
            }
          }
        FitRecord& r = res.fits[l * fits + s * cfg.splits + k];
        r.layer = l;
        r.fit_index = s * cfg.splits + k;
        r.sample_index = s;
        r.split_index = k;
        r.eps_x = best_model.eps_x;
        r.eps_y = best_model.eps_y;
        r.score = heldout_score(best_model, x_test, y_test);
        if (!first) first = std::move(prob);
      }
    }
  }
  res.layer_means.resize(L, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    double t = 0.0;
    for (std::size_t f = 0; f < fits; ++f) t += res.fits[l * fits + f].score;
    res.layer_means[l] = t / static_cast<double>(fits);
  }
  return res;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "model_id,unit,layer,fit_index,sample_index,split_index,eps_x,eps_y,score\n";
  for (const ReportRow& r : rows)
    os << r.model_id << ',' << to_string(r.unit) << ',' << r.fit.layer << ',' << r.fit.fit_index
       << ',' << r.fit.sample_index << ',' << r.fit.split_index << ',' << fmt(r.fit.eps_x) << ','
       << fmt(r.fit.eps_y) << ',' << fmt(r.fit.score) << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line.rfind("model_id,unit,layer", 0) != 0) throw FormatError(path.string() + ": bad header");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw FormatError(path.string() + ": expected 9 fields in '" + line + "'");
    ReportRow r;
    r.model_id = f[0];
    r.unit = parse_unit(f[1]);
    r.fit.layer = std::stoul(f[2]);
    r.fit.fit_index = std::stoul(f[3]);
    r.fit.sample_index = std::stoul(f[4]);
    r.fit.split_index = std::stoul(f[5]);
    r.fit.eps_x = std::stod(f[6]);
    r.fit.eps_y = std::stod(f[7]);
    r.fit.score = std::stod(f[8]);
    rows.push_back(r);
  }
  return rows;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  // Keyed in first-appearance order so the summary follows the report.
  std::vector<std::tuple<std::string, Unit, std::size_t>> keys;
  std::map<std::tuple<std::string, int, std::size_t>, std::pair<double, std::size_t>> acc;
  for (const ReportRow& r : rows) {
    const auto key = std::make_tuple(r.model_id, static_cast<int>(r.unit), r.fit.layer);
    auto it = acc.find(key);
    if (it == acc.end()) {
      keys.emplace_back(r.model_id, r.unit, r.fit.layer);
      it = acc.emplace(key, std::make_pair(0.0, std::size_t{0})).first;
    }
    it->second.first += r.fit.score;
    it->second.second += 1;
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "model_id,unit,layer,mean_score,fits\n";
  for (const auto& [model, unit, layer] : keys) {
    const auto& [sum, n] = acc.at(std::make_tuple(model, static_cast<int>(unit), layer));
    os << model << ',' << to_string(unit) << ',' << layer << ','
       << fmt(sum / static_cast<double>(n)) << ',' << n << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace issl
