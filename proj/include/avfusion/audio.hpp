#pragma once

// WAV ingestion, log-mel front end, pause-aware SNR mixing and mel masking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "avfusion/blas.hpp"
#include "avfusion/rng.hpp"

namespace avf {

inline constexpr int kSampleRate = 16000;

class AudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a signal has no active (non-pause) content to measure.
class ZeroPowerError : public AudioError {
 public:
  using AudioError::AudioError;
};

struct WaveBuffer {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  std::size_t size() const noexcept { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// ---------------------------------------------------------------------------
// WAV (RIFF PCM, 16-bit little-endian, mono, 16 kHz)

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

inline WaveBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError("cannot open WAV file: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw AudioError(where + "not a RIFF/WAVE file");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t len = detail::read_u32(buf.data() + pos + 4);
    const unsigned char* body = buf.data() + pos + 8;
    if (pos + 8 + len > buf.size()) throw AudioError(where + "truncated chunk");
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (len < 16) throw AudioError(where + "short fmt chunk");
      format = detail::read_u16(body);
      channels = detail::read_u16(body + 2);
      rate = detail::read_u32(body + 4);
      bits = detail::read_u16(body + 14);
      have_fmt = true;
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw AudioError(where + "data chunk before fmt chunk");
      if (format != 1) throw AudioError(where + "unsupported encoding " + std::to_string(format) + " (need PCM)");
      if (channels != 1) throw AudioError(where + "expected mono, got " + std::to_string(channels) + " channels");
      if (bits != 16) throw AudioError(where + "expected 16-bit samples, got " + std::to_string(bits));
      if (rate != static_cast<std::uint32_t>(kSampleRate))
        throw AudioError(where + "expected 16000 Hz, got " + std::to_string(rate));
      WaveBuffer w;
      w.samples.resize(len / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = std::max(-1.0, static_cast<std::int16_t>(detail::read_u16(body + 2 * i)) / 32767.0);
      return w;
    }
    pos += 8 + len + (len & 1);
  }
  throw AudioError(where + "no data chunk");
}

inline void write_wav(const std::filesystem::path& path, const WaveBuffer& w) {
  std::string s;
  const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  s += "RIFF";
  detail::put_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, 1);
  detail::put_u16(s, 1);
  detail::put_u32(s, kSampleRate);
  detail::put_u32(s, kSampleRate * 2);
  detail::put_u16(s, 2);
  detail::put_u16(s, 16);
  s += "data";
  detail::put_u32(s, data_len);
  for (double x : w.samples) {
    const double c = std::clamp(x, -1.0, 1.0);
    detail::put_u16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32767.0))));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError("cannot write WAV file: " + path.string());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// ---------------------------------------------------------------------------
// Log-mel spectrogram

enum class MelNormalization { MaxRelative, None };

struct MelConfig {
  std::size_t n_fft = 400;
  std::size_t hop = 160;
  std::size_t n_mels = 80;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-10;
  /// MaxRelative: y = (max(x, m - range) - m + range) / 4 with x = log10 power
  /// and m the utterance maximum, so y lies in [0, range / 4].
  MelNormalization normalization = MelNormalization::MaxRelative;
  double dynamic_range = 8.0;

  auto key() const { return std::tie(n_fft, hop, n_mels, f_min, f_max); }
};

/// (n_mels x frames) row-major log-mel matrix.
struct MelSpectrogram {
  std::size_t n_mels = 0;
  std::size_t frames = 0;
  double hop_s = 0.01;
  std::vector<double> values;

  double at(std::size_t mel, std::size_t t) const { return values[mel * frames + t]; }
  double& at(std::size_t mel, std::size_t t) { return values[mel * frames + t]; }
};

inline std::size_t frame_count(std::size_t n_samples, std::size_t n_fft, std::size_t hop) {
  if (n_samples < n_fft) throw AudioError("wave too short: " + std::to_string(n_samples) + " samples < n_fft " + std::to_string(n_fft));
  return 1 + (n_samples - n_fft) / hop;
}

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
inline double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

inline double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

/// Precomputed windowed DFT basis and area-normalized triangular filterbank.
class MelFrontend {
 public:
  explicit MelFrontend(const MelConfig& cfg) : cfg_(cfg), bins_(cfg.n_fft / 2 + 1) {
    if (cfg.n_fft == 0 || cfg.hop == 0 || cfg.n_mels == 0) throw AudioError("mel config: sizes must be positive");
    const std::size_t n = cfg.n_fft;
    basis_.resize(n * 2 * bins_);
    for (std::size_t i = 0; i < n; ++i) {
      const double win = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
      for (std::size_t k = 0; k < bins_; ++k) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(i * k % n) / static_cast<double>(n);
        basis_[i * 2 * bins_ + k] = win * std::cos(a);
        basis_[i * 2 * bins_ + bins_ + k] = -win * std::sin(a);
      }
    }
    const double mmin = hz_to_mel(cfg.f_min), mmax = hz_to_mel(cfg.f_max);
    std::vector<double> edges(cfg.n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(mmin + (mmax - mmin) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
    centers_.assign(edges.begin() + 1, edges.end() - 1);
    filters_.assign(cfg.n_mels * bins_, 0.0);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
      const double norm = 2.0 / (hi - lo);
      for (std::size_t k = 0; k < bins_; ++k) {
        const double f = static_cast<double>(k) * kSampleRate / static_cast<double>(n);
        const double w = std::max(0.0, std::min((f - lo) / (c - lo), (hi - f) / (hi - c)));
        filters_[m * bins_ + k] = w * norm;
      }
    }
  }

  const std::vector<double>& center_frequencies() const noexcept { return centers_; }

  /// Mel-filtered power (linear scale).
  MelSpectrogram power(const WaveBuffer& wave) const {
    if (wave.samples.empty()) throw AudioError("compute_logmel: empty wave");
    const std::size_t n = cfg_.n_fft;
    const std::size_t t = frame_count(wave.size(), n, cfg_.hop);
    std::vector<double> frames(t * n);
    for (std::size_t j = 0; j < t; ++j)
      std::copy_n(wave.samples.begin() + static_cast<std::ptrdiff_t>(j * cfg_.hop), n, frames.begin() + static_cast<std::ptrdiff_t>(j * n));
    std::vector<double> spec(t * 2 * bins_);
    blas::gemm<double>(false, false, t, 2 * bins_, n, 1.0, frames.data(), n, basis_.data(), 2 * bins_, 0.0, spec.data(),
                       2 * bins_);
    std::vector<double> power(t * bins_);
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t k = 0; k < bins_; ++k) {
        const double re = spec[j * 2 * bins_ + k], im = spec[j * 2 * bins_ + bins_ + k];
        power[j * bins_ + k] = re * re + im * im;
      }
    std::vector<double> melp(cfg_.n_mels * t);
    blas::gemm<double>(false, true, cfg_.n_mels, t, bins_, 1.0, filters_.data(), bins_, power.data(), bins_, 0.0,
                       melp.data(), t);
    MelSpectrogram out;
    out.n_mels = cfg_.n_mels;
    out.frames = t;
    out.hop_s = static_cast<double>(cfg_.hop) / kSampleRate;
    out.values = std::move(melp);
    return out;
  }

 private:
  MelConfig cfg_;
  std::size_t bins_;
  std::vector<double> basis_;
  std::vector<double> filters_;
  std::vector<double> centers_;
};

inline std::shared_ptr<const MelFrontend> mel_frontend(const MelConfig& cfg) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t, double, double>, std::shared_ptr<const MelFrontend>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[cfg.key()];
  if (!slot) slot = std::make_shared<MelFrontend>(cfg);
  return slot;
}

/// log10 of mel-filtered power, floored at cfg.log_floor, then normalized
/// per cfg.normalization. Frame count is 1 + (samples - n_fft) / hop.
inline MelSpectrogram compute_logmel(const WaveBuffer& wave, const MelConfig& cfg = {}) {
  MelSpectrogram out = mel_frontend(cfg)->power(wave);
  double mx = -std::numeric_limits<double>::infinity();
  for (double& v : out.values) {
    v = std::log10(std::max(v, cfg.log_floor));
    mx = std::max(mx, v);
  }
  if (cfg.normalization == MelNormalization::MaxRelative) {
    const double lo = mx - cfg.dynamic_range;
    for (double& v : out.values) v = (std::max(v, lo) - lo) / 4.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pause-aware power

struct PauseConfig {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  double threshold_db = -40.0;
};

/// Which framing windows count as speech: leading and trailing exact-zero
/// padding is trimmed, the rest is framed (a final window is aligned to the
/// end so every sample is covered), and a frame is active when its RMS
/// reaches the loudest frame's RMS scaled by the threshold.
struct ActivityMap {
  std::size_t first = 0;  // trimmed range [first, last)
  std::size_t last = 0;
  std::size_t window = 0;
  std::vector<std::size_t> starts;
  std::vector<bool> active;
};

inline ActivityMap activity_map(const std::vector<double>& x, const PauseConfig& cfg = {}) {
  ActivityMap m;
  auto nz = [](double v) { return v != 0.0; };
  auto first = std::find_if(x.begin(), x.end(), nz);
  if (first == x.end()) throw ZeroPowerError("active_power: signal is entirely silent");
  auto last = std::find_if(x.rbegin(), x.rend(), nz).base();
  m.first = static_cast<std::size_t>(first - x.begin());
  m.last = static_cast<std::size_t>(last - x.begin());
  const std::size_t n = m.last - m.first;
  const std::size_t win = static_cast<std::size_t>(std::lround(cfg.window_ms * kSampleRate / 1000.0));
  const std::size_t hop = static_cast<std::size_t>(std::lround(cfg.hop_ms * kSampleRate / 1000.0));
  m.window = std::min(win, n);
  for (std::size_t s = 0; s + m.window <= n; s += hop) m.starts.push_back(s);
  if (m.starts.back() + m.window < n) m.starts.push_back(n - m.window);

  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[m.first + i] * x[m.first + i];
  std::vector<double> rms(m.starts.size());
  double peak = 0;
  for (std::size_t f = 0; f < m.starts.size(); ++f) {
    rms[f] = std::sqrt((prefix[m.starts[f] + m.window] - prefix[m.starts[f]]) / static_cast<double>(m.window));
    peak = std::max(peak, rms[f]);
  }
  const double thr = peak * std::pow(10.0, cfg.threshold_db / 20.0);
  m.active.resize(rms.size());
  for (std::size_t f = 0; f < rms.size(); ++f) m.active[f] = rms[f] >= thr;
  return m;
}

/// Mean square over the samples covered by active frames.
inline double active_power(const std::vector<double>& x, const PauseConfig& cfg = {}) {
  const ActivityMap m = activity_map(x, cfg);
  double acc = 0;
  std::size_t count = 0, covered_to = 0;
  for (std::size_t f = 0; f < m.starts.size(); ++f) {
    if (!m.active[f]) continue;
    const std::size_t b = std::max(m.starts[f], covered_to), e = m.starts[f] + m.window;
    for (std::size_t i = b; i < e; ++i) acc += x[m.first + i] * x[m.first + i];
    count += e > b ? e - b : 0;
    covered_to = std::max(covered_to, e);
  }
  if (acc <= 0.0) throw ZeroPowerError("active_power: no active energy");
  return acc / static_cast<double>(count);
}

inline double active_power(const WaveBuffer& w, const PauseConfig& cfg = {}) { return active_power(w.samples, cfg); }

// ---------------------------------------------------------------------------
// Mixing

struct MixResult {
  WaveBuffer mix;
  std::vector<double> clean_part;  // clean signal as it appears in `mix`
  std::vector<double> noise_part;  // scaled noise as it appears in `mix`
  double alpha = 0.0;              // noise scale before any peak normalization
  double gain = 1.0;               // peak-normalization factor applied to both parts
};

/// Tiles short noise from a seeded offset or crops long noise at a seeded
/// position so it matches `length`.
inline std::vector<double> fit_noise_length(const std::vector<double>& noise, std::size_t length, Rng& rng) {
  if (noise.empty()) throw AudioError("mix: empty noise");
  std::vector<double> out(length);
  const std::size_t n = noise.size();
  if (n < length) {
    const std::size_t off = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    for (std::size_t i = 0; i < length; ++i) out[i] = noise[(off + i) % n];
  } else {
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - length)));
    std::copy_n(noise.begin() + static_cast<std::ptrdiff_t>(start), length, out.begin());
  }
  return out;
}

inline MixResult mix_components(const WaveBuffer& clean, const WaveBuffer& noise, double snr_db, Rng& rng,
                                const PauseConfig& pause = {}) {
  if (clean.samples.empty()) throw AudioError("mix: empty clean signal");
  const double p_clean = active_power(clean.samples, pause);
  std::vector<double> fitted = fit_noise_length(noise.samples, clean.size(), rng);
  const double p_noise = active_power(fitted, pause);
  MixResult r;
  r.alpha = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  r.clean_part = clean.samples;
  r.noise_part = std::move(fitted);
  for (double& v : r.noise_part) v *= r.alpha;
  r.mix.samples.resize(clean.size());
  double peak = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    r.mix.samples[i] = r.clean_part[i] + r.noise_part[i];
    peak = std::max(peak, std::abs(r.mix.samples[i]));
  }
  if (peak > 1.0) {
    r.gain = 1.0 / peak;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      r.clean_part[i] *= r.gain;
      r.noise_part[i] *= r.gain;
      r.mix.samples[i] *= r.gain;
    }
  }
  return r;
}

/// clean + alpha * noise with alpha = sqrt(P_clean / (P_noise * 10^(snr/10))),
/// powers measured over active frames. The whole mix is scaled down if it
/// would clip.
inline WaveBuffer mix_at_snr(const WaveBuffer& clean, const WaveBuffer& noise, double snr_db, Rng& rng,
                             const PauseConfig& pause = {}) {
  return mix_components(clean, noise, snr_db, rng, pause).mix;
}

inline double measured_snr_db(const std::vector<double>& clean_part, const std::vector<double>& noise_part,
                              const PauseConfig& pause = {}) {
  return 10.0 * std::log10(active_power(clean_part, pause) / active_power(noise_part, pause));
}

// ---------------------------------------------------------------------------
// Mel-level masking

struct AugmentConfig {
  std::size_t freq_masks = 2;
  std::size_t freq_max = 15;
  std::size_t time_masks = 2;
  std::size_t time_max = 20;
};

struct MaskSpan {
  std::size_t begin = 0, width = 0;
};

struct SpecAugmentLog {
  std::vector<MaskSpan> freq, time;
};

/// Frequency and time masks filled with the input's mean value. Widths are
/// uniform in [0, max] and clamped to the matrix extent.
inline MelSpectrogram spec_augment(const MelSpectrogram& mel, const AugmentConfig& cfg, Rng& rng,
                                   SpecAugmentLog* log = nullptr) {
  MelSpectrogram out = mel;
  if (mel.values.empty()) return out;
  double mean = 0;
  for (double v : mel.values) mean += v;
  mean /= static_cast<double>(mel.values.size());
  for (std::size_t i = 0; i < cfg.freq_masks; ++i) {
    const auto w = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(std::min(cfg.freq_max, mel.n_mels))));
    const auto f0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(mel.n_mels - w)));
    for (std::size_t f = f0; f < f0 + w; ++f)
      std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(f * mel.frames), mel.frames, mean);
    if (log) log->freq.push_back({f0, w});
  }
  for (std::size_t i = 0; i < cfg.time_masks; ++i) {
    const auto w = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(std::min(cfg.time_max, mel.frames))));
    const auto t0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(mel.frames - w)));
    for (std::size_t f = 0; f < mel.n_mels; ++f)
      for (std::size_t t = t0; t < t0 + w; ++t) out.values[f * mel.frames + t] = mean;
    if (log) log->time.push_back({t0, w});
  }
  return out;
}

}  // namespace avf
