#pragma once

// Sample manifests: UTF-8, tab separated,
//   sample_id <TAB> audio_path <TAB> frames_dir <TAB> fps <TAB> transcript
// one row per sample; relative paths resolve against the manifest's folder.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/audio.hpp"
#include "avfusion/synth.hpp"
#include "avfusion/visual.hpp"

namespace avf {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestRow {
  std::string sample_id;
  std::string audio_path;
  std::string frames_dir;
  double fps = 25.0;
  std::string transcript;
};

/// One audio-visual utterance with its reference words.
struct AvSample {
  std::string id;
  WaveBuffer wave;
  RawFrames frames;
  std::vector<std::string> words;
};

inline std::string token_word(int token) { return "u" + std::to_string(token); }

inline std::vector<std::string> token_words(const std::vector<int>& tokens) {
  std::vector<std::string> w;
  w.reserve(tokens.size());
  for (int t : tokens) w.push_back(token_word(t));
  return w;
}

/// Lowercase, punctuation stripped (apostrophes kept), split on whitespace.
inline std::vector<std::string> normalize_words(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '\'' || c >= 0x80)
      clean.push_back(static_cast<char>(std::tolower(c)));
    else
      clean.push_back(' ');
  }
  std::istringstream in(clean);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline AvSample to_av_sample(const SynthSample& s) { return {s.id, s.wave, s.frames, token_words(s.tokens)}; }

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::vector<ManifestRow> rows;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5)
      throw ManifestError(path.string() + ":" + std::to_string(no) + ": expected 5 tab-separated columns, found " +
                          std::to_string(cols.size()));
    ManifestRow r{cols[0], cols[1], cols[2], 0.0, cols[4]};
    try {
      std::size_t used = 0;
      r.fps = std::stod(cols[3], &used);
      if (used != cols[3].size() || !(r.fps > 0)) throw std::invalid_argument("fps");
    } catch (const std::exception&) {
      throw ManifestError(path.string() + ":" + std::to_string(no) + ": invalid fps '" + cols[3] + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string fmt_fps(double fps) {
  std::ostringstream s;
  s.precision(10);
  s << fps;
  return s.str();
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  for (const auto& r : rows) {
    for (const std::string* f : {&r.sample_id, &r.audio_path, &r.frames_dir, &r.transcript})
      if (f->find_first_of("\t\n") != std::string::npos)
        throw ManifestError("manifest field contains a tab or newline: " + *f);
    out << r.sample_id << '\t' << r.audio_path << '\t' << r.frames_dir << '\t' << fmt_fps(r.fps) << '\t'
        << r.transcript << '\n';
  }
}

inline AvSample load_sample(const ManifestRow& row, const std::filesystem::path& base) {
  auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  AvSample s;
  s.id = row.sample_id;
  s.wave = read_wav(resolve(row.audio_path));
  s.frames = load_frame_dir(resolve(row.frames_dir), row.fps);
  s.words = normalize_words(row.transcript);
  return s;
}

inline std::vector<AvSample> load_manifest_samples(const std::filesystem::path& manifest) {
  const auto rows = read_manifest(manifest);
  std::vector<AvSample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(load_sample(r, manifest.parent_path()));
  return out;
}

/// Writes <dir>/<id>.wav, <dir>/<id>/frame_*.pgm and returns the manifest row.
inline ManifestRow export_sample(const SynthSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_wav(dir / (s.id + ".wav"), s.wave);
  save_frame_dir(dir / s.id, s.frames);
  std::string transcript;
  for (const auto& w : token_words(s.tokens)) transcript += (transcript.empty() ? "" : " ") + w;
  return {s.id, s.id + ".wav", s.id, s.frames.fps, transcript};
}

}  // namespace avf
