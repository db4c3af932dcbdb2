#pragma once

// Run configuration: every tunable in one flat text file of
//   section.key = value
// lines ('#' starts a comment). Unknown keys are errors. The hash is taken
// over the canonical dump of all effective values, so formatting and key
// order in the source file do not matter.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "avfusion/asr_stub.hpp"
#include "avfusion/checkpoint.hpp"
#include "avfusion/evaluator.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/trainer.hpp"
#include "avfusion/util.hpp"

namespace avf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::size_t train_samples = 500;
  std::size_t val_samples = 50;
  std::size_t eval_samples = 100;
  std::uint64_t train_seed = 0;
  std::uint64_t val_seed = 100000;
  std::uint64_t eval_seed = 200000;
};

struct RunConfig {
  std::uint64_t seed = 0;
  PipelineConfig pipeline;
  DataConfig data;
  FusionConfig fusion;
  StubConfig stub;
  StubTrainConfig stub_train;
  LossWeights loss;
  AdamConfig adam;
  StageConfig pretrain = StageConfig::defaults(Stage::Pretrain);
  StageConfig main = StageConfig::defaults(Stage::Main);
  StageConfig finetune = StageConfig::defaults(Stage::Finetune);
  EvalGrid eval;

  const StageConfig& stage(Stage s) const {
    return s == Stage::Pretrain ? pretrain : s == Stage::Main ? main : finetune;
  }

  /// Derived settings that must agree across modules.
  void finalize() {
    stub.vocab = static_cast<std::size_t>(pipeline.synth.vocab);
    stub.n_mels = pipeline.mel.n_mels;
    fusion.n_mels = pipeline.mel.n_mels;
  }

  void validate() const {
    pipeline.synth.validate();
    fusion.validate();
    stub.validate();
    loss.validate();
    pretrain.validate();
    main.validate();
    finetune.validate();
    eval.validate();
    if (fusion.n_mels != pipeline.mel.n_mels || stub.n_mels != pipeline.mel.n_mels)
      throw ConfigError("mel bin count differs between frontend and models");
    if (data.train_samples == 0 || data.val_samples == 0) throw ConfigError("data: train and val sizes must be positive");
    if (eval.n_samples > data.eval_samples) throw ConfigError("eval.n_samples exceeds data.eval_samples");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <class U>
U parse_unsigned(const std::string& s) {
  if (s.empty() || s[0] == '-' || s[0] == '+') throw std::invalid_argument("expected a non-negative integer");
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used, 10);
  if (used != s.size()) throw std::invalid_argument("expected a non-negative integer");
  return static_cast<U>(v);
}

inline void parse_into(const std::string& s, std::size_t& v) { v = parse_unsigned<std::size_t>(s); }
inline void parse_into(const std::string& s, double& v) {
  std::size_t used = 0;
  v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("expected a number");
}
inline void parse_into(const std::string& s, int& v) {
  std::size_t used = 0;
  v = std::stoi(s, &used);
  if (used != s.size()) throw std::invalid_argument("expected an integer");
}
inline void parse_into(const std::string& s, bool& v) {
  if (s == "true" || s == "1") v = true;
  else if (s == "false" || s == "0") v = false;
  else throw std::invalid_argument("expected true or false");
}
inline void parse_into(const std::string& s, MelNormalization& v) {
  if (s == "max_relative") v = MelNormalization::MaxRelative;
  else if (s == "none") v = MelNormalization::None;
  else throw std::invalid_argument("expected max_relative or none");
}
inline void parse_into(const std::string& s, StubSize& v) { v = parse_stub_size(s); }
template <std::size_t N>
void parse_into(const std::string& s, std::array<std::size_t, N>& v) {
  const auto parts = split_list(s);
  if (parts.size() != N) throw std::invalid_argument("expected " + std::to_string(N) + " comma-separated integers");
  for (std::size_t i = 0; i < N; ++i) v[i] = parse_unsigned<std::size_t>(parts[i]);
}
inline void parse_into(const std::string& s, std::vector<double>& v) {
  v.clear();
  for (const auto& p : split_list(s)) {
    double x;
    parse_into(p, x);
    v.push_back(x);
  }
}
inline void parse_into(const std::string& s, std::vector<NoiseCategory>& v) {
  v.clear();
  for (const auto& p : split_list(s)) v.push_back(parse_noise_category(p));
}

inline std::string format_value(std::size_t v) { return std::to_string(v); }
inline std::string format_value(int v) { return std::to_string(v); }
inline std::string format_value(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(MelNormalization v) { return v == MelNormalization::MaxRelative ? "max_relative" : "none"; }
inline std::string format_value(StubSize v) { return to_string(v); }
template <std::size_t N>
std::string format_value(const std::array<std::size_t, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
inline std::string format_value(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_value(v[i]);
  return s;
}
inline std::string format_value(const std::vector<NoiseCategory>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + to_string(v[i]);
  return s;
}

}  // namespace detail

struct ConfigField {
  std::string key;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <class Acc>
ConfigField field(std::string key, std::string doc, Acc acc) {
  return {std::move(key), std::move(doc),
          [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& v) { parse_into(v, acc(c)); }};
}

inline void stage_fields(std::vector<ConfigField>& f, const std::string& name, StageConfig RunConfig::*m) {
  f.push_back(field(name + ".lr0", "initial learning rate", [m](RunConfig& c) -> double& { return (c.*m).lr0; }));
  f.push_back(field(name + ".decay", "learning-rate divisor per post-plateau epoch",
                    [m](RunConfig& c) -> double& { return (c.*m).decay; }));
  f.push_back(field(name + ".plateau_threshold", "relative validation improvement counted as progress",
                    [m](RunConfig& c) -> double& { return (c.*m).plateau_threshold; }));
  f.push_back(field(name + ".batch_size", "samples per optimizer step",
                    [m](RunConfig& c) -> std::size_t& { return (c.*m).batch_size; }));
  f.push_back(field(name + ".max_epochs", "epoch cap", [m](RunConfig& c) -> std::size_t& { return (c.*m).max_epochs; }));
  f.push_back(field(name + ".snr_min", "lowest mixing SNR (dB)", [m](RunConfig& c) -> double& { return (c.*m).snr_min; }));
  f.push_back(field(name + ".snr_max", "highest mixing SNR (dB)", [m](RunConfig& c) -> double& { return (c.*m).snr_max; }));
  f.push_back(field(name + ".augment", "mel masking, random crop and frame masking",
                    [m](RunConfig& c) -> bool& { return (c.*m).augment; }));
}

}  // namespace detail

inline const std::vector<ConfigField>& config_fields() {
  using detail::field;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back(field("run.seed", "root seed for every random draw", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    f.push_back(field("mel.n_fft", "FFT window (samples)", [](RunConfig& c) -> std::size_t& { return c.pipeline.mel.n_fft; }));
    f.push_back(field("mel.hop", "hop (samples)", [](RunConfig& c) -> std::size_t& { return c.pipeline.mel.hop; }));
    f.push_back(field("mel.n_mels", "mel bins", [](RunConfig& c) -> std::size_t& { return c.pipeline.mel.n_mels; }));
    f.push_back(field("mel.f_min", "lowest filter edge (Hz)", [](RunConfig& c) -> double& { return c.pipeline.mel.f_min; }));
    f.push_back(field("mel.f_max", "highest filter edge (Hz)", [](RunConfig& c) -> double& { return c.pipeline.mel.f_max; }));
    f.push_back(field("mel.log_floor", "power floor before log10", [](RunConfig& c) -> double& { return c.pipeline.mel.log_floor; }));
    f.push_back(field("mel.normalization", "max_relative or none",
                      [](RunConfig& c) -> MelNormalization& { return c.pipeline.mel.normalization; }));
    f.push_back(field("mel.dynamic_range", "log10 range kept below the maximum",
                      [](RunConfig& c) -> double& { return c.pipeline.mel.dynamic_range; }));
    f.push_back(field("pause.window_ms", "activity frame length", [](RunConfig& c) -> double& { return c.pipeline.pause.window_ms; }));
    f.push_back(field("pause.hop_ms", "activity frame hop", [](RunConfig& c) -> double& { return c.pipeline.pause.hop_ms; }));
    f.push_back(field("pause.threshold_db", "activity threshold relative to the loudest frame",
                      [](RunConfig& c) -> double& { return c.pipeline.pause.threshold_db; }));
    f.push_back(field("augment.freq_masks", "mel frequency masks", [](RunConfig& c) -> std::size_t& { return c.pipeline.augment.freq_masks; }));
    f.push_back(field("augment.freq_max", "max frequency mask width (bins)",
                      [](RunConfig& c) -> std::size_t& { return c.pipeline.augment.freq_max; }));
    f.push_back(field("augment.time_masks", "mel time masks", [](RunConfig& c) -> std::size_t& { return c.pipeline.augment.time_masks; }));
    f.push_back(field("augment.time_max", "max time mask width (frames)",
                      [](RunConfig& c) -> std::size_t& { return c.pipeline.augment.time_max; }));
    f.push_back(field("mask.apply_prob", "probability of per-frame region masks", [](RunConfig& c) -> double& { return c.pipeline.mask.apply_prob; }));
    f.push_back(field("mask.max_area", "largest region area fraction", [](RunConfig& c) -> double& { return c.pipeline.mask.max_area; }));
    f.push_back(field("mask.min_ratio", "smallest region aspect ratio", [](RunConfig& c) -> double& { return c.pipeline.mask.min_ratio; }));
    f.push_back(field("mask.max_ratio", "largest region aspect ratio", [](RunConfig& c) -> double& { return c.pipeline.mask.max_ratio; }));
    f.push_back(field("mask.max_run", "longest zeroed frame run per second", [](RunConfig& c) -> std::size_t& { return c.pipeline.mask.max_run; }));
    f.push_back(field("mask.max_tries", "region resampling attempts", [](RunConfig& c) -> int& { return c.pipeline.mask.max_tries; }));
    f.push_back(field("synth.vocab", "unit vocabulary size", [](RunConfig& c) -> int& { return c.pipeline.synth.vocab; }));
    f.push_back(field("synth.min_duration_s", "shortest utterance", [](RunConfig& c) -> double& { return c.pipeline.synth.min_duration_s; }));
    f.push_back(field("synth.max_duration_s", "longest utterance", [](RunConfig& c) -> double& { return c.pipeline.synth.max_duration_s; }));
    f.push_back(field("synth.fps", "video frame rate", [](RunConfig& c) -> double& { return c.pipeline.synth.fps; }));
    f.push_back(field("synth.unit_min_s", "shortest unit", [](RunConfig& c) -> double& { return c.pipeline.synth.unit_min_s; }));
    f.push_back(field("synth.unit_max_s", "longest unit", [](RunConfig& c) -> double& { return c.pipeline.synth.unit_max_s; }));
    f.push_back(field("synth.gap_min_s", "shortest pause between units", [](RunConfig& c) -> double& { return c.pipeline.synth.gap_min_s; }));
    f.push_back(field("synth.gap_max_s", "longest pause between units", [](RunConfig& c) -> double& { return c.pipeline.synth.gap_max_s; }));
    f.push_back(field("synth.max_units", "unit cap per utterance (0: none)", [](RunConfig& c) -> std::size_t& { return c.pipeline.synth.max_units; }));
    f.push_back(field("data.train_samples", "synthetic training utterances", [](RunConfig& c) -> std::size_t& { return c.data.train_samples; }));
    f.push_back(field("data.val_samples", "synthetic validation utterances", [](RunConfig& c) -> std::size_t& { return c.data.val_samples; }));
    f.push_back(field("data.eval_samples", "synthetic held-out utterances", [](RunConfig& c) -> std::size_t& { return c.data.eval_samples; }));
    f.push_back(field("data.train_seed", "first training seed", [](RunConfig& c) -> std::uint64_t& { return c.data.train_seed; }));
    f.push_back(field("data.val_seed", "first validation seed", [](RunConfig& c) -> std::uint64_t& { return c.data.val_seed; }));
    f.push_back(field("data.eval_seed", "first held-out seed", [](RunConfig& c) -> std::uint64_t& { return c.data.eval_seed; }));
    f.push_back(field("fusion.width", "attention width d", [](RunConfig& c) -> std::size_t& { return c.fusion.width; }));
    f.push_back(field("fusion.heads", "attention heads", [](RunConfig& c) -> std::size_t& { return c.fusion.heads; }));
    f.push_back(field("fusion.layers", "cross-attention layers", [](RunConfig& c) -> std::size_t& { return c.fusion.layers; }));
    f.push_back(field("fusion.ffn_mult", "feed-forward width / d", [](RunConfig& c) -> std::size_t& { return c.fusion.ffn_mult; }));
    f.push_back(field("fusion.audio_channels", "audio residual block channels",
                      [](RunConfig& c) -> std::array<std::size_t, 3>& { return c.fusion.audio_channels; }));
    f.push_back(field("fusion.visual_channels", "visual block channels (3D,2D,3D,2D)",
                      [](RunConfig& c) -> std::array<std::size_t, 4>& { return c.fusion.visual_channels; }));
    f.push_back(field("fusion.visual_strides", "visual block spatial strides",
                      [](RunConfig& c) -> std::array<std::size_t, 4>& { return c.fusion.visual_strides; }));
    f.push_back(field("fusion.gn_groups", "group-norm groups", [](RunConfig& c) -> std::size_t& { return c.fusion.gn_groups; }));
    f.push_back(field("fusion.max_skew", "tolerated audio/video length mismatch (frames)",
                      [](RunConfig& c) -> std::size_t& { return c.fusion.max_skew; }));
    f.push_back(field("stub.size", "base or small", [](RunConfig& c) -> StubSize& { return c.stub.size; }));
    f.push_back(field("stub.width", "model width (0: by size)", [](RunConfig& c) -> std::size_t& { return c.stub.width; }));
    f.push_back(field("stub.heads", "attention heads", [](RunConfig& c) -> std::size_t& { return c.stub.heads; }));
    f.push_back(field("stub.encoder_layers", "encoder layers", [](RunConfig& c) -> std::size_t& { return c.stub.encoder_layers; }));
    f.push_back(field("stub.decoder_layers", "decoder layers", [](RunConfig& c) -> std::size_t& { return c.stub.decoder_layers; }));
    f.push_back(field("stub_train.lr", "learning rate", [](RunConfig& c) -> double& { return c.stub_train.lr; }));
    f.push_back(field("stub_train.max_epochs", "epoch cap", [](RunConfig& c) -> std::size_t& { return c.stub_train.max_epochs; }));
    f.push_back(field("stub_train.batch_size", "samples per step", [](RunConfig& c) -> std::size_t& { return c.stub_train.batch_size; }));
    f.push_back(field("stub_train.target_accuracy", "required clean frame accuracy",
                      [](RunConfig& c) -> double& { return c.stub_train.target_accuracy; }));
    f.push_back(field("stub_train.stop_accuracy", "early-stop frame accuracy",
                      [](RunConfig& c) -> double& { return c.stub_train.stop_accuracy; }));
    f.push_back(field("loss.w_mel", "weight of L_mel", [](RunConfig& c) -> double& { return c.loss.mel; }));
    f.push_back(field("loss.w_enc", "weight of L_enc", [](RunConfig& c) -> double& { return c.loss.enc; }));
    f.push_back(field("loss.w_dec", "weight of L_dec", [](RunConfig& c) -> double& { return c.loss.dec; }));
    f.push_back(field("adam.beta1", "first-moment decay", [](RunConfig& c) -> double& { return c.adam.beta1; }));
    f.push_back(field("adam.beta2", "second-moment decay", [](RunConfig& c) -> double& { return c.adam.beta2; }));
    f.push_back(field("adam.eps", "denominator epsilon", [](RunConfig& c) -> double& { return c.adam.eps; }));
    f.push_back(field("adam.clip_norm", "global gradient-norm clip (<= 0: off)", [](RunConfig& c) -> double& { return c.adam.clip_norm; }));
    detail::stage_fields(f, "pretrain", &RunConfig::pretrain);
    detail::stage_fields(f, "main", &RunConfig::main);
    detail::stage_fields(f, "finetune", &RunConfig::finetune);
    f.push_back(field("eval.snrs", "SNR grid (dB)", [](RunConfig& c) -> std::vector<double>& { return c.eval.snrs; }));
    f.push_back(field("eval.clean", "include the clean column", [](RunConfig& c) -> bool& { return c.eval.clean; }));
    f.push_back(field("eval.categories", "noise categories",
                      [](RunConfig& c) -> std::vector<NoiseCategory>& { return c.eval.categories; }));
    f.push_back(field("eval.n_samples", "utterances per cell", [](RunConfig& c) -> std::size_t& { return c.eval.n_samples; }));
    f.push_back(field("eval.seed", "noise seed of the grid", [](RunConfig& c) -> std::uint64_t& { return c.eval.seed; }));
    std::sort(f.begin(), f.end(), [](const ConfigField& a, const ConfigField& b) { return a.key < b.key; });
    return f;
  }();
  return fields;
}

namespace detail {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields reuse the size_t codec");

inline const ConfigField* find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace detail

/// Applies one `key = value` assignment; `where` prefixes error messages.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value, const std::string& where) {
  const ConfigField* f = detail::find_field(key);
  if (!f) throw ConfigError(where + "unknown key '" + key + "'");
  try {
    f->set(cfg, value);
  } catch (const std::exception& e) {
    throw ConfigError(where + "invalid value '" + value + "' for '" + key + "': " + e.what());
  }
}

inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const std::string where = origin + ":" + std::to_string(no) + ": ";
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    set_config_value(cfg, key, value, where);
  }
  cfg.finalize();
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Every key with its effective value, sorted; optionally with docs.
inline std::string dump_config(const RunConfig& cfg, bool with_docs = false) {
  std::ostringstream out;
  for (const auto& f : config_fields()) {
    if (with_docs) out << "# " << f.doc << '\n';
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

inline std::string config_hash(const RunConfig& cfg) {
  const std::string canon = dump_config(cfg);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(crc64(canon.data(), canon.size())));
  return buf;
}

}  // namespace avf
