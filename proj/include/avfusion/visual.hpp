#pragma once

// Lip-frame ingestion, crop/grayscale preprocessing and frame masking.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "avfusion/rng.hpp"

namespace avf {

class VisualError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Frames as decoded from disk or synthesized: 8-bit, 1 (gray) or 3 (RGB,
/// interleaved) channels.
struct RawFrames {
  std::size_t count = 0, height = 0, width = 0, channels = 1;
  double fps = 25.0;
  std::vector<std::uint8_t> pixels;
};

/// (count x height x width) grayscale intensities in [0, 1].
struct FrameSequence {
  std::size_t count = 0, height = 0, width = 0;
  double fps = 25.0;
  std::vector<float> values;

  float at(std::size_t t, std::size_t y, std::size_t x) const { return values[(t * height + y) * width + x]; }
  float& at(std::size_t t, std::size_t y, std::size_t x) { return values[(t * height + y) * width + x]; }
};

inline constexpr std::size_t kFrameSize = 96;
inline constexpr std::size_t kCropSize = 88;

enum class CropMode { Train, Eval };

struct CropOffset {
  std::size_t y = 0, x = 0;
};

/// Offset of the 88x88 window inside the 96x96 center crop: uniform per
/// sequence when training, centered otherwise.
inline CropOffset crop_offset(CropMode mode, Rng& rng) {
  if (mode == CropMode::Eval) return {(kFrameSize - kCropSize) / 2, (kFrameSize - kCropSize) / 2};
  const auto span = static_cast<std::int64_t>(kFrameSize - kCropSize);
  const auto y = static_cast<std::size_t>(rng.uniform_int(0, span));
  const auto x = static_cast<std::size_t>(rng.uniform_int(0, span));
  return {y, x};
}

/// Center 96x96 crop, then an 88x88 window; color is reduced with luma
/// weights 0.299/0.587/0.114 and intensities scaled to [0, 1].
inline FrameSequence preprocess_frames(const RawFrames& raw, CropMode mode, Rng& rng, CropOffset* used = nullptr) {
  if (raw.height < kFrameSize || raw.width < kFrameSize)
    throw VisualError("frames are " + std::to_string(raw.height) + "x" + std::to_string(raw.width) +
                      ", need at least 96x96");
  if (raw.channels != 1 && raw.channels != 3)
    throw VisualError("unsupported channel count " + std::to_string(raw.channels));
  if (raw.pixels.size() != raw.count * raw.height * raw.width * raw.channels)
    throw VisualError("pixel buffer size does not match frame geometry");
  if (raw.fps <= 0) throw VisualError("fps must be positive");
  const CropOffset off = crop_offset(mode, rng);
  if (used) *used = off;
  const std::size_t y0 = (raw.height - kFrameSize) / 2 + off.y, x0 = (raw.width - kFrameSize) / 2 + off.x;
  FrameSequence out;
  out.count = raw.count;
  out.height = out.width = kCropSize;
  out.fps = raw.fps;
  out.values.resize(raw.count * kCropSize * kCropSize);
  for (std::size_t t = 0; t < raw.count; ++t)
    for (std::size_t y = 0; y < kCropSize; ++y)
      for (std::size_t x = 0; x < kCropSize; ++x) {
        const std::size_t src = ((t * raw.height + y0 + y) * raw.width + x0 + x) * raw.channels;
        double v;
        if (raw.channels == 1)
          v = raw.pixels[src];
        else
          v = 0.299 * raw.pixels[src] + 0.587 * raw.pixels[src + 1] + 0.114 * raw.pixels[src + 2];
        out.at(t, y, x) = static_cast<float>(std::min(1.0, v / 255.0));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskConfig {
  double apply_prob = 0.5;
  double max_area = 0.3;
  double min_ratio = 0.3;
  double max_ratio = 3.0;
  std::size_t max_run = 10;
  int max_tries = 10;
};

struct MaskRect {
  std::size_t frame = 0, y = 0, x = 0, height = 0, width = 0;
  double area_fraction = 0, ratio = 0;  // as drawn
};

struct FrameRun {
  std::size_t begin = 0, length = 0;
};

struct MaskPlan {
  bool region = false;
  std::vector<MaskRect> rects;
  std::vector<FrameRun> runs;
};

/// Rectangle sides for a drawn area fraction and width/height ratio.
inline std::pair<std::size_t, std::size_t> rect_dims(double area_fraction, double ratio, std::size_t height,
                                                     std::size_t width) {
  const auto w = static_cast<std::size_t>(std::floor(std::sqrt(area_fraction * ratio) * static_cast<double>(width)));
  const auto h = static_cast<std::size_t>(std::floor(std::sqrt(area_fraction / ratio) * static_cast<double>(height)));
  return {h, w};
}

inline MaskPlan draw_mask_plan(std::size_t count, std::size_t height, std::size_t width, double fps, Rng& rng,
                               const MaskConfig& cfg = {}) {
  MaskPlan plan;
  plan.region = rng.bernoulli(cfg.apply_prob);
  if (plan.region) {
    for (std::size_t t = 0; t < count; ++t) {
      MaskRect r;
      r.frame = t;
      std::size_t h = 0, w = 0;
      for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
        // (0, max_area]: 1 - U[0,1) lies in (0, 1].
        r.area_fraction = cfg.max_area * (1.0 - rng.uniform());
        r.ratio = rng.uniform(cfg.min_ratio, cfg.max_ratio);
        std::tie(h, w) = rect_dims(r.area_fraction, r.ratio, height, width);
        if (h <= height && w <= width) break;
      }
      h = std::min(h, height);
      w = std::min(w, width);
      if (h == 0 || w == 0) continue;
      r.height = h;
      r.width = w;
      r.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - h)));
      r.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - w)));
      plan.rects.push_back(r);
    }
  }
  const auto per_second = static_cast<std::size_t>(std::floor(fps));
  if (per_second > 0) {
    const std::size_t seconds = count / per_second;
    for (std::size_t s = 0; s < seconds; ++s) {
      const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(std::min(cfg.max_run, per_second))));
      if (k == 0) continue;
      const auto start = s * per_second + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(per_second - k)));
      plan.runs.push_back({start, k});
    }
  }
  return plan;
}

inline FrameSequence apply_mask_plan(const FrameSequence& seq, const MaskPlan& plan) {
  FrameSequence out = seq;
  for (const MaskRect& r : plan.rects)
    for (std::size_t y = r.y; y < r.y + r.height; ++y)
      std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>((r.frame * seq.height + y) * seq.width + r.x), r.width, 0.0f);
  const std::size_t plane = seq.height * seq.width;
  for (const FrameRun& run : plan.runs)
    std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(run.begin * plane), run.length * plane, 0.0f);
  return out;
}

/// With probability apply_prob (one draw per sequence) every frame gets an
/// independent zero-filled rectangle; independently, each full second of
/// input loses one run of 0..max_run consecutive frames.
inline FrameSequence mask_augment(const FrameSequence& seq, Rng& rng, const MaskConfig& cfg = {},
                                  MaskPlan* plan_out = nullptr) {
  MaskPlan plan = draw_mask_plan(seq.count, seq.height, seq.width, seq.fps, rng, cfg);
  FrameSequence out = apply_mask_plan(seq, plan);
  if (plan_out) *plan_out = std::move(plan);
  return out;
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit) frame files

inline void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width, const std::uint8_t* pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VisualError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels), static_cast<std::streamsize>(height * width));
}

inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VisualError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw VisualError(path.string() + ": not a binary PGM (P5)");
  try {
    width = std::stoul(token());
    height = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (maxval != 255) throw VisualError(path.string() + ": only 8-bit PGM is supported");
  } catch (const std::logic_error&) {
    throw VisualError(path.string() + ": malformed PGM header");
  }
  std::vector<std::uint8_t> px(height * width);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (static_cast<std::size_t>(in.gcount()) != px.size()) throw VisualError(path.string() + ": truncated pixel data");
  return px;
}

inline std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06zu.pgm", index);
  return buf;
}

/// Reads frame_000000.pgm, frame_000001.pgm, ... until the next index is missing.
inline RawFrames load_frame_dir(const std::filesystem::path& dir, double fps) {
  RawFrames raw;
  raw.fps = fps;
  for (std::size_t i = 0;; ++i) {
    const auto p = dir / frame_file_name(i);
    if (!std::filesystem::exists(p)) break;
    std::size_t h = 0, w = 0;
    auto px = read_pgm(p, h, w);
    if (i == 0) {
      raw.height = h;
      raw.width = w;
    } else if (h != raw.height || w != raw.width) {
      throw VisualError(p.string() + ": frame size differs from the first frame");
    }
    raw.pixels.insert(raw.pixels.end(), px.begin(), px.end());
    ++raw.count;
  }
  if (raw.count == 0) throw VisualError("no frames found in " + dir.string());
  return raw;
}

inline void save_frame_dir(const std::filesystem::path& dir, const RawFrames& raw) {
  if (raw.channels != 1) throw VisualError("only grayscale frames can be written as PGM");
  std::filesystem::create_directories(dir);
  const std::size_t plane = raw.height * raw.width;
  for (std::size_t i = 0; i < raw.count; ++i)
    write_pgm(dir / frame_file_name(i), raw.height, raw.width, raw.pixels.data() + i * plane);
}

}  // namespace avf
