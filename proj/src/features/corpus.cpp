// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

#include "issl/features/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "issl/numcore/errors.hpp"

namespace issl {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 4> kAudioMagic{'I', 'S', 'S', 'L'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

[[noreturn]] void bad(const fs::path& path, std::size_t line, const std::string& what) {
  throw FormatError(path.string() + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

std::vector<Span> runs_of(const std::vector<int>& per_frame) {
  std::vector<Span> out;
  std::size_t i = 0;
  while (i < per_frame.size()) {
    std::size_t j = i + 1;
    while (j < per_frame.size() && per_frame[j] == per_frame[i]) ++j;
    out.push_back({i, j, per_frame[i]});
    i = j;
  }
  return out;
}

void validate_alignment(const Utterance& u) {
  const std::size_t t = u.num_frames();
  const std::string who = "utterance " + u.utterance_id + ": ";
  std::size_t prev_end = 0;
  for (const Span& w : u.words) {
    if (w.start >= w.end || w.end > t)
      throw FormatError(who + "word span [" + std::to_string(w.start) + ", " +
                        std::to_string(w.end) + ") outside " + std::to_string(t) + " frames");
    if (w.start < prev_end) throw FormatError(who + "word spans overlap or are unordered");
    prev_end = w.end;
  }
  std::size_t covered = 0;
  for (const Span& p : u.phones) {
    if (p.start != covered || p.end <= p.start || p.end > t)
      throw FormatError(who + "phone spans must partition the frames");
    for (std::size_t f = p.start; f < p.end; ++f)
      if (u.phone_align[f] != p.label)
        throw FormatError(who + "phone span disagrees with per-frame alignment");
    covered = p.end;
  }
  if (!u.phones.empty() && covered != t) throw FormatError(who + "phone spans do not cover frames");
}

void write_audio(const fs::path& path, const std::vector<double>& samples, int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kAudioMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(sample_rate));
  put_u32(os, static_cast<std::uint32_t>(samples.size()));
  std::vector<unsigned char> buf(samples.size() * 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double clipped = std::clamp(samples[i], -1.0, 32767.0 / 32768.0);
    const auto v = static_cast<std::int16_t>(std::lround(clipped * 32768.0));
    const auto u = static_cast<std::uint16_t>(v);
    buf[2 * i] = static_cast<unsigned char>(u & 0xff);
    buf[2 * i + 1] = static_cast<unsigned char>(u >> 8);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<double> read_audio(const fs::path& path, int* sample_rate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kAudioMagic)
    throw FormatError(path.string() + ": bad audio magic");
  const std::uint32_t rate = get_u32(is);
  const std::uint32_t n = get_u32(is);
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * 2);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw FormatError(path.string() + ": truncated sample data");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::uint16_t>(buf[2 * i] | (buf[2 * i + 1] << 8));
    out[i] = static_cast<double>(static_cast<std::int16_t>(u)) / 32768.0;
  }
  if (sample_rate != nullptr) *sample_rate = static_cast<int>(rate);
  return out;
}

void write_alignment(const fs::path& path, const Utterance& u) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "speaker " << u.speaker_id << '\n';
  os << "frames " << u.num_frames() << '\n';
  for (std::size_t i = 0; i < u.phone_align.size(); ++i) os << i << ' ' << u.phone_align[i] << '\n';
  for (const Span& p : u.phones) os << "phone " << p.start << ' ' << p.end << ' ' << p.label << '\n';
  for (const Span& w : u.words) os << "word " << w.start << ' ' << w.end << ' ' << w.label << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void read_alignment(const fs::path& path, Utterance& u) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  u.phone_align.clear();
  u.phones.clear();
  u.words.clear();
  std::string line;
  std::size_t lineno = 0;
  long long declared = -1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "speaker") {
      std::string spk;
      ls >> spk;
      if (!u.speaker_id.empty() && spk != u.speaker_id)
        bad(path, lineno, "speaker '" + spk + "' disagrees with manifest '" + u.speaker_id + "'");
      u.speaker_id = spk;
    } else if (head == "frames") {
      if (!(ls >> declared) || declared < 0) bad(path, lineno, "bad frame count");
    } else if (head == "phone" || head == "word") {
      Span s;
      if (!(ls >> s.start >> s.end >> s.label)) bad(path, lineno, "bad span");
      (head == "phone" ? u.phones : u.words).push_back(s);
    } else {
      std::size_t idx = 0;
      int id = 0;
      try {
        idx = std::stoul(head);
      } catch (const std::exception&) {
        bad(path, lineno, "unrecognized record '" + head + "'");
      }
      if (!(ls >> id)) bad(path, lineno, "missing phoneme id");
      if (idx != u.phone_align.size()) bad(path, lineno, "frame indices must be consecutive");
      u.phone_align.push_back(id);
    }
  }
  if (declared >= 0 && static_cast<std::size_t>(declared) != u.phone_align.size())
    throw FormatError(path.string() + ": declared " + std::to_string(declared) + " frames, found " +
                      std::to_string(u.phone_align.size()));
  if (u.phones.empty()) u.phones = runs_of(u.phone_align);
  validate_alignment(u);
}

Corpus load_corpus(const fs::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw std::runtime_error("cannot open manifest " + manifest.string());
  Corpus c;
  c.root = manifest.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Utterance u;
    std::string audio, ali;
    if (!(ls >> u.utterance_id >> u.speaker_id >> audio >> ali))
      bad(manifest, lineno, "expected: utterance_id speaker_id audio_path align_path");
    u.samples = read_audio(c.root / audio, &u.sample_rate);
    read_alignment(c.root / ali, u);
    c.utterances.push_back(std::move(u));
  }
  return c;
}

void write_corpus(const fs::path& root, const std::vector<Utterance>& utterances) {
  fs::create_directories(root / "audio");
  fs::create_directories(root / "ali");
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write manifest under " + root.string());
  manifest << "# utterance_id speaker_id audio alignment\n";
  for (const Utterance& u : utterances) {
    const std::string audio = "audio/" + u.utterance_id + ".pcm";
    const std::string ali = "ali/" + u.utterance_id + ".ali";
    write_audio(root / audio, u.samples, u.sample_rate);
    write_alignment(root / ali, u);
    manifest << u.utterance_id << ' ' << u.speaker_id << ' ' << audio << ' ' << ali << '\n';
  }
}

}  // namespace issl
