// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/synthcorpus/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "issl/numcore/errors.hpp"
#include "issl/numcore/rng.hpp"

namespace issl {

namespace {

constexpr double kTwoPi = 6.283185307179586;
constexpr double kTiltRef = 400.0;  // Hz where tilt leaves amplitude unchanged
constexpr double kLevel = 0.25;     // keeps the summed sinusoids inside [-1, 1]

std::size_t uniform_count(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth: " + m); };
  if (n_phonemes < 2) fail("need at least 2 phonemes");
  if (n_sounds > 0) {
    if (n_sounds < 2 || sounds_per_phoneme < 1) fail("need at least 2 sounds, 1 per phoneme");
    // sequences without an immediate repeat: n (n-1)^(m-1)
    if (static_cast<double>(n_sounds) * std::pow(static_cast<double>(n_sounds - 1),
                                                 static_cast<double>(sounds_per_phoneme - 1)) <
        2.0 * static_cast<double>(n_phonemes))
      fail("too few sound sequences for the phoneme set");
  }
  if (n_speakers < 1) fail("need at least 1 speaker");
  if (utterances_per_speaker < 1) fail("need at least 1 utterance per speaker");
  if (n_words < 1) fail("need at least 1 word");
  if (min_word_phonemes < 1 || min_word_phonemes > max_word_phonemes)
    fail("bad word length range");
  if (min_words < 1 || min_words > max_words) fail("bad words-per-utterance range");
  if (min_duration < std::max<std::size_t>(3, n_sounds > 0 ? sounds_per_phoneme : 1) || min_duration > max_duration)
    fail("phoneme durations must be at least 3 frames and one per sound");
  if (sample_rate < 400) fail("sample rate too low");
  if (hop == 0 || window < hop) fail("window must be at least one hop");
  if (noise_level < 0 || freq_jitter < 0 || gain_jitter_db < 0) fail("negative noise setting");
  if (max_pitch_shift < 0 || max_pitch_shift >= 0.5) fail("pitch shift must be in [0, 0.5)");
  // Enough distinct phoneme sequences for the lexicon.
  double distinct = 0.0;
  for (std::size_t l = min_word_phonemes; l <= max_word_phonemes; ++l)
    distinct += std::pow(static_cast<double>(n_phonemes), static_cast<double>(l));
  if (distinct < 2.0 * static_cast<double>(n_words)) fail("lexicon too large for the phoneme set");
}

Inventory make_inventory(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, "inventory"));
  Inventory inv;
  const double nyq = 0.5 * cfg.sample_rate;
  const double lo = 0.05 * nyq, hi = 0.85 * nyq / (1.0 + cfg.max_pitch_shift);
  const bool pooled = cfg.n_sounds > 0;
  for (std::size_t p = 0; p < (pooled ? cfg.n_sounds : cfg.n_phonemes); ++p) {
    SoundTemplate t;
    const std::size_t n = 2 + rng.below(2);
    while (t.freqs.size() < n) {
      const double f = rng.uniform(lo, hi);
      const bool clear = std::all_of(t.freqs.begin(), t.freqs.end(), [&](double g) {
        return std::abs(f - g) > 0.08 * nyq;
      });
      if (clear) {
        t.freqs.push_back(f);
        t.amps.push_back(rng.uniform(0.4, 1.0));
      }
    }
    inv.sounds.push_back(std::move(t));
  }
  // Pooled phonemes: distinct sound sequences without immediate repeats.
  for (std::size_t p = 0; !pooled && p < cfg.n_phonemes; ++p)
    inv.phonemes.push_back({static_cast<int>(p)});
  std::set<std::vector<int>> phones;
  while (inv.phonemes.size() < cfg.n_phonemes) {
    std::vector<int> seq;
    while (seq.size() < cfg.sounds_per_phoneme) {
      const int snd = static_cast<int>(rng.below(cfg.n_sounds));
      if (seq.empty() || seq.back() != snd) seq.push_back(snd);
    }
    if (phones.insert(seq).second) inv.phonemes.push_back(std::move(seq));
  }

  std::set<std::vector<int>> seen;
  while (inv.words.size() < cfg.n_words) {
    std::vector<int> w(uniform_count(rng, cfg.min_word_phonemes, cfg.max_word_phonemes));
    for (int& p : w) p = static_cast<int>(rng.below(cfg.n_phonemes));
    if (seen.insert(w).second) inv.words.push_back(std::move(w));
  }
  double total = 0.0;
  for (std::size_t r = 0; r < cfg.n_words; ++r) {
    inv.word_weights.push_back(std::pow(static_cast<double>(r + 1), -cfg.zipf_exponent));
    total += inv.word_weights.back();
  }
  for (double& w : inv.word_weights) w /= total;

  for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
    SpeakerProfile sp;
    sp.id = numbered("spk", s, 2);
    sp.tilt = rng.uniform(-cfg.max_tilt, cfg.max_tilt);
    sp.pitch_scale = 1.0 + rng.uniform(-cfg.max_pitch_shift, cfg.max_pitch_shift);
    inv.speakers.push_back(sp);
  }
  return inv;
}

std::size_t samples_for_frames(std::size_t frames, const SynthConfig& cfg) {
  if (frames == 0) return 0;
  return (frames - 1) * cfg.hop + cfg.window;
}

Utterance render_utterance(const SynthConfig& cfg, const Inventory& inv, std::size_t speaker,
                           const std::vector<int>& words, const std::string& utterance_id,
                           std::uint64_t seed) {
  if (speaker >= inv.speakers.size()) throw ContractError("synth: speaker out of range");
  Rng rng(seed);
  const SpeakerProfile& sp = inv.speakers[speaker];
  Utterance u;
  u.utterance_id = utterance_id;
  u.speaker_id = sp.id;
  u.sample_rate = cfg.sample_rate;

  for (int w : words) {
    if (w < 0 || static_cast<std::size_t>(w) >= inv.words.size())
      throw ContractError("synth: word id out of range");
    const std::size_t word_start = u.phone_align.size();
    for (int p : inv.words[static_cast<std::size_t>(w)]) {
      const std::size_t d = uniform_count(rng, cfg.min_duration, cfg.max_duration);
      u.phones.push_back({u.phone_align.size(), u.phone_align.size() + d, p});
      u.phone_align.insert(u.phone_align.end(), d, p);
    }
    u.words.push_back({word_start, u.phone_align.size(), w});
  }

  const std::size_t T = u.phone_align.size();
  const std::size_t N = samples_for_frames(T, cfg);
  u.samples.assign(N, 0.0);
  // A frame's window is centred at t*hop + window/2; a phoneme owns the
  // samples between the midpoints of neighbouring frame centres.
  auto boundary = [&](std::size_t frame) {
    if (frame == 0) return std::size_t{0};
    if (frame >= T) return N;
    return frame * cfg.hop + cfg.window / 2 - cfg.hop / 2;
  };
  const double nyq_limit = 0.48 * cfg.sample_rate;
  for (const Span& s : u.phones) {
    const std::vector<int>& seq = inv.phonemes[static_cast<std::size_t>(s.label)];
    const std::size_t len = s.end - s.start, parts = seq.size();
    for (std::size_t j = 0; j < parts; ++j) {
      const SoundTemplate& t = inv.sounds[static_cast<std::size_t>(seq[j])];
      const std::size_t from = s.start + len * j / parts, to = s.start + len * (j + 1) / parts;
      const double gain =
          std::pow(10.0, rng.uniform(-cfg.gain_jitter_db, cfg.gain_jitter_db) / 20.0);
      for (std::size_t k = 0; k < t.freqs.size(); ++k) {
        double f = t.freqs[k] * sp.pitch_scale * (1.0 + cfg.freq_jitter * rng.normal());
        f = std::clamp(f, 1.0, nyq_limit);
        const double a = kLevel * gain * t.amps[k] * std::pow(f / kTiltRef, sp.tilt);
        const double phase = rng.uniform(0.0, kTwoPi);
        const double w = kTwoPi * f / cfg.sample_rate;
        for (std::size_t n = boundary(from); n < boundary(to); ++n)
          u.samples[n] += a * std::sin(w * static_cast<double>(n) + phase);
      }
    }
  }
  for (double& x : u.samples) x = std::clamp(x + cfg.noise_level * rng.normal(), -1.0, 1.0);
  return u;
}

std::vector<Utterance> generate_utterances(const SynthConfig& cfg) {
  const Inventory inv = make_inventory(cfg);
  std::vector<double> cdf(inv.word_weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < cdf.size(); ++i) cdf[i] = (acc += inv.word_weights[i]);

  std::vector<Utterance> out;
  for (std::size_t s = 0; s < cfg.n_speakers; ++s)
    for (std::size_t i = 0; i < cfg.utterances_per_speaker; ++i) {
      const std::size_t index = out.size();
      Rng rng(mix_seed(cfg.seed, index));
      std::vector<int> words(uniform_count(rng, cfg.min_words, cfg.max_words));
      for (int& w : words) {
        const double r = rng.uniform() * acc;
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
        w = static_cast<int>(std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1));
      }
      const std::string id = inv.speakers[s].id + numbered("_u", i, 3);
      out.push_back(render_utterance(cfg, inv, s, words, id, rng.next_u64()));
    }
  return out;
}

std::vector<Utterance> generate(const SynthConfig& cfg, const std::filesystem::path& root) {
  std::vector<Utterance> utts = generate_utterances(cfg);
  write_corpus(root, utts);
  return utts;
}

}  // namespace issl
