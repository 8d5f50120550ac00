// Copyright 2026 The issl Authors
// SPDX-License-Identifier: Apache-2.0

// Utterances and their on-disk corpus layout.
//
//   manifest.txt   one record per line: utterance_id speaker_id audio_path align_path
//                  (paths relative to the manifest directory, '#' starts a comment)
//   *.pcm          "ISSL" | uint32 sample_rate | uint32 n_samples | n x int16, little-endian
//   *.ali          text, see read_alignment()

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace issl {

struct Span {
  std::size_t start = 0;  // first frame
  std::size_t end = 0;    // one past the last frame
  int label = 0;

  std::size_t length() const { return end - start; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct Utterance {
  std::string utterance_id;
  std::string speaker_id;
  int sample_rate = 16000;
  std::vector<double> samples;  // in [-1, 1]
  std::vector<int> phone_align;  // phoneme id per feature frame
  std::vector<Span> phones;      // phoneme tokens; contiguous runs if not given explicitly
  std::vector<Span> words;       // ordered, non-overlapping

  std::size_t num_frames() const { return phone_align.size(); }
};

// Contiguous runs of equal ids.
std::vector<Span> runs_of(const std::vector<int>& per_frame);

// Checks the alignment invariants: spans inside [0, num_frames), words
// ordered and non-overlapping, phone spans agreeing with phone_align.
// Throws FormatError.
void validate_alignment(const Utterance& u);

void write_audio(const std::filesystem::path& path, const std::vector<double>& samples,
                 int sample_rate);
// Returns samples scaled to [-1, 1); sets *sample_rate.
std::vector<double> read_audio(const std::filesystem::path& path, int* sample_rate);

// Alignment text format:
//   speaker <speaker_id>
//   frames <T>
//   <frame_index> <phoneme_id>      T lines, frame_index = 0..T-1 in order
//   phone <start> <end> <phoneme_id> optional phoneme token spans
//   word <start> <end> <word_id>     end exclusive
// Blank lines and lines starting with '#' are ignored.
void write_alignment(const std::filesystem::path& path, const Utterance& u);
void read_alignment(const std::filesystem::path& path, Utterance& u);

struct Corpus {
  std::filesystem::path root;
  std::vector<Utterance> utterances;
};

Corpus load_corpus(const std::filesystem::path& manifest);
// Writes audio/<id>.pcm, ali/<id>.ali and manifest.txt under root.
void write_corpus(const std::filesystem::path& root, const std::vector<Utterance>& utterances);

}  // namespace issl
