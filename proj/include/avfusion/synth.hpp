#pragma once

// Correlated audio / lip-video / token triples and synthetic noise.
//
// Each latent unit is a harmonic tone (fundamental 110 + 40 * id Hz, plus
// two harmonics) under a ramped, slowly modulated envelope. The video shows a
// dark ellipse whose width encodes the unit id and whose vertical aperture
// follows the audio envelope, so the picture carries the transcript even
// when the audio is buried in noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/audio.hpp"
#include "avfusion/rng.hpp"
#include "avfusion/visual.hpp"

namespace avf {

struct SynthConfig {
  int vocab = 32;
  double min_duration_s = 2.0;
  double max_duration_s = 3.0;
  double fps = 25.0;
  double unit_min_s = 0.12;
  double unit_max_s = 0.40;
  double gap_min_s = 0.04;
  double gap_max_s = 0.10;
  std::size_t max_units = 0;  // 0: as many as fit

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
    if (vocab < 2 || vocab > 64) fail("vocab must be in [2, 64]");
    if (fps <= 0 || std::abs(kSampleRate / fps - std::round(kSampleRate / fps)) > 1e-9)
      fail("fps must divide the sample rate");
    if (unit_min_s <= 0 || unit_max_s < unit_min_s) fail("unit duration range is empty");
    if (gap_min_s <= 0 || gap_max_s < gap_min_s) fail("gap duration range is empty");
    if (max_duration_s < min_duration_s) fail("duration range is empty");
    if (min_duration_s < gap_max_s + unit_min_s + gap_min_s)
      fail("min_duration_s too short to hold one unit");
  }
};

inline constexpr int kBlank = -1;

struct UnitSpan {
  int token = 0;
  std::size_t begin = 0, end = 0;  // sample range
};

struct SynthSample {
  std::string id;
  WaveBuffer wave;
  RawFrames frames;  // 96x96 grayscale
  std::vector<int> tokens;
  std::vector<UnitSpan> units;
};

inline double unit_fundamental(int token) { return 110.0 + 40.0 * token; }

namespace detail {

struct SpeechTrack {
  std::vector<double> samples;
  std::vector<double> envelope;
  std::vector<UnitSpan> units;
};

// Lays out units after an optional lead-in and renders tone plus envelope.
inline SpeechTrack render_speech(Rng& rng, std::size_t n, const SynthConfig& cfg, bool lead_in) {
  SpeechTrack tr;
  tr.samples.assign(n, 0.0);
  tr.envelope.assign(n, 0.0);
  const double sr = kSampleRate;
  auto samples = [&](double s) { return static_cast<std::size_t>(std::lround(s * sr)); };
  std::size_t pos = lead_in ? samples(rng.uniform(cfg.gap_min_s, cfg.gap_max_s)) : 0;
  constexpr std::array<double, 3> amp{1.0, 0.5, 0.3};
  const double amp_sum = amp[0] + amp[1] + amp[2];
  const std::size_t ramp = samples(0.015);
  while (cfg.max_units == 0 || tr.units.size() < cfg.max_units) {
    const std::size_t len = samples(rng.uniform(cfg.unit_min_s, cfg.unit_max_s));
    if (pos + len + samples(cfg.gap_min_s) > n) break;
    UnitSpan u;
    u.token = static_cast<int>(rng.uniform_int(0, cfg.vocab - 1));
    u.begin = pos;
    u.end = pos + len;
    const double peak = rng.uniform(0.35, 0.75);
    const double mod_hz = rng.uniform(3.0, 6.0), mod_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double f0 = unit_fundamental(u.token);
    std::array<double, 3> phase{};
    for (double& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < len; ++i) {
      const double t = static_cast<double>(i) / sr;
      double r = 1.0;
      if (i < ramp) r = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(ramp));
      if (len - 1 - i < ramp)
        r = std::min(r, 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(len - 1 - i) / static_cast<double>(ramp)));
      const double env = peak * r * (1.0 + 0.25 * std::sin(2.0 * std::numbers::pi * mod_hz * t + mod_phase)) / 1.25;
      double tone = 0;
      for (int h = 0; h < 3; ++h) tone += amp[h] * std::sin(2.0 * std::numbers::pi * f0 * (h + 1) * t + phase[h]);
      tr.envelope[pos + i] = env;
      tr.samples[pos + i] = env * tone / amp_sum;
    }
    tr.units.push_back(u);
    pos += len + samples(rng.uniform(cfg.gap_min_s, cfg.gap_max_s));
  }
  return tr;
}

inline void draw_mouth(std::uint8_t* frame, double half_width, double half_height, double texture_phase) {
  constexpr double cy = 56.0, cx = 48.0, bg = 170.0, lips = 40.0;
  const double s = std::min(half_width, half_height);
  for (std::size_t y = 0; y < kFrameSize; ++y)
    for (std::size_t x = 0; x < kFrameSize; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - cy) / half_height;
      const double dx = (static_cast<double>(x) + 0.5 - cx) / half_width;
      const double dist = (std::sqrt(dx * dx + dy * dy) - 1.0) * s;
      const double cover = std::clamp(0.5 - dist, 0.0, 1.0);
      const double shade = bg + 12.0 * std::sin(0.21 * static_cast<double>(x) + 0.17 * static_cast<double>(y) + texture_phase);
      frame[y * kFrameSize + x] = static_cast<std::uint8_t>(std::lround(std::clamp(shade + (lips - shade) * cover, 0.0, 255.0)));
    }
}

}  // namespace detail

inline constexpr double kClosedAperture = 1.0;
inline constexpr double kApertureGain = 18.0;

/// Mouth width (half-axis, pixels) shown while unit `token` is voiced.
inline double mouth_half_width(int token) { return 10.0 + 0.6 * token; }
inline constexpr double kRestHalfWidth = 14.0;

/// Fully determined by (seed, cfg).
inline SynthSample generate_sample(std::uint64_t seed, const SynthConfig& cfg = {}) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x5A17}));
  const std::size_t per_frame = static_cast<std::size_t>(std::lround(kSampleRate / cfg.fps));
  const auto n_frames = static_cast<std::size_t>(std::lround(rng.uniform(cfg.min_duration_s, cfg.max_duration_s) * cfg.fps));
  const std::size_t n = n_frames * per_frame;
  detail::SpeechTrack tr = detail::render_speech(rng, n, cfg, true);
  if (tr.units.empty()) throw std::invalid_argument("synth config: duration holds no unit");

  SynthSample s;
  s.id = "synth_" + std::to_string(seed);
  s.wave.samples = std::move(tr.samples);
  s.units = tr.units;
  for (const UnitSpan& u : s.units) s.tokens.push_back(u.token);

  s.frames.count = n_frames;
  s.frames.height = s.frames.width = kFrameSize;
  s.frames.channels = 1;
  s.frames.fps = cfg.fps;
  s.frames.pixels.resize(n_frames * kFrameSize * kFrameSize);
  const double texture = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::size_t unit = 0;
  for (std::size_t f = 0; f < n_frames; ++f) {
    const std::size_t b = f * per_frame, e = b + per_frame;
    double env = 0;
    for (std::size_t i = b; i < e; ++i) env += tr.envelope[i];
    env /= static_cast<double>(per_frame);
    const std::size_t mid = b + per_frame / 2;
    while (unit < s.units.size() && s.units[unit].end <= mid) ++unit;
    const bool voiced = unit < s.units.size() && s.units[unit].begin <= mid;
    const double hw = voiced ? mouth_half_width(s.units[unit].token) : kRestHalfWidth;
    detail::draw_mouth(s.frames.pixels.data() + f * kFrameSize * kFrameSize, hw, kClosedAperture + kApertureGain * env, texture);
  }
  return s;
}

enum class NoiseCategory { Babble, Music, Natural, Sidespeaker };

inline constexpr std::array<NoiseCategory, 4> kNoiseCategories{NoiseCategory::Babble, NoiseCategory::Music,
                                                               NoiseCategory::Natural, NoiseCategory::Sidespeaker};

inline std::string to_string(NoiseCategory c) {
  switch (c) {
    case NoiseCategory::Babble: return "babble";
    case NoiseCategory::Music: return "music";
    case NoiseCategory::Natural: return "natural";
    case NoiseCategory::Sidespeaker: return "sidespeaker";
  }
  return "?";
}

inline NoiseCategory parse_noise_category(const std::string& s) {
  for (NoiseCategory c : kNoiseCategories)
    if (to_string(c) == s) return c;
  throw std::invalid_argument("unknown noise category: " + s);
}

/// babble: six summed speech streams; sidespeaker: one stream; music: a
/// slowly changing three-note chord; natural: low-passed noise with a slow
/// amplitude swell. Deterministic in (seed, category).
inline WaveBuffer generate_noise(std::uint64_t seed, NoiseCategory category, double duration_s,
                                 const SynthConfig& cfg = {}) {
  if (!(duration_s > 0)) throw std::invalid_argument("generate_noise: duration must be positive");
  const auto n = static_cast<std::size_t>(std::lround(duration_s * kSampleRate));
  if (n == 0) throw std::invalid_argument("generate_noise: duration rounds to zero samples");
  Rng rng(derive_seed(seed, {0x4015E, static_cast<std::uint64_t>(category)}));
  SynthConfig speech = cfg;
  speech.max_units = 0;
  WaveBuffer w;
  w.samples.assign(n, 0.0);
  switch (category) {
    case NoiseCategory::Sidespeaker:
    case NoiseCategory::Babble: {
      const int streams = category == NoiseCategory::Babble ? 6 : 1;
      for (int k = 0; k < streams; ++k) {
        Rng sub(rng.next());
        const auto tr = detail::render_speech(sub, n, speech, sub.bernoulli(0.5));
        for (std::size_t i = 0; i < n; ++i) w.samples[i] += tr.samples[i];
      }
      break;
    }
    case NoiseCategory::Music: {
      constexpr std::array<double, 10> scale{196.0, 220.0, 246.9, 293.7, 329.6, 392.0, 440.0, 493.9, 587.3, 659.3};
      std::size_t pos = 0;
      std::array<double, 3> phase{};
      const std::size_t fade = kSampleRate * 30 / 1000;
      while (pos < n) {
        const std::size_t len = static_cast<std::size_t>(std::lround(rng.uniform(0.4, 1.0) * kSampleRate));
        std::array<double, 3> f{};
        for (double& v : f) v = scale[static_cast<std::size_t>(rng.uniform_int(0, scale.size() - 1))];
        for (std::size_t i = 0; i < len && pos + i < n; ++i) {
          double g = 1.0;
          if (i < fade) g = static_cast<double>(i) / fade;
          if (len - i < fade) g = std::min(g, static_cast<double>(len - i) / fade);
          double v = 0;
          for (int k = 0; k < 3; ++k) {
            phase[k] += 2.0 * std::numbers::pi * f[k] / kSampleRate;
            v += std::sin(phase[k]) + 0.3 * std::sin(2.0 * phase[k]);
          }
          w.samples[pos + i] = 0.2 * g * v;
        }
        pos += len;
      }
      break;
    }
    case NoiseCategory::Natural: {
      const double pole = rng.uniform(0.5, 0.95);
      const double swell_hz = rng.uniform(0.3, 1.0), swell_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      double state = 0;
      for (std::size_t i = 0; i < n; ++i) {
        state = pole * state + (1.0 - pole) * rng.normal();
        const double swell = 0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * swell_hz * static_cast<double>(i) / kSampleRate + swell_phase);
        w.samples[i] = state * swell;
      }
      break;
    }
  }
  double peak = 0;
  for (double v : w.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0.9)
    for (double& v : w.samples) v *= 0.9 / peak;
  return w;
}

}  // namespace avf
