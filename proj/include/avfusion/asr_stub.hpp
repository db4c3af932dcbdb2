#pragma once

// Small frame-synchronous ASR surrogate: strided conv front, self-attention
// encoder, self-attention decoder, per-frame classifier over V units + blank.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/audio.hpp"
#include "avfusion/nn.hpp"
#include "avfusion/rng.hpp"
#include "avfusion/synth.hpp"
#include "avfusion/tensor.hpp"

namespace avf {

enum class StubSize { Base, Small };

inline std::string to_string(StubSize s) { return s == StubSize::Base ? "base" : "small"; }

inline StubSize parse_stub_size(const std::string& s) {
  if (s == "base") return StubSize::Base;
  if (s == "small") return StubSize::Small;
  throw std::invalid_argument("unknown stub size '" + s + "' (expected base or small)");
}

struct StubConfig {
  StubSize size = StubSize::Base;
  std::size_t width = 0;  // 0: 96 for base, 192 for small
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t vocab = 32;
  std::size_t n_mels = 80;

  std::size_t model_width() const {
    if (width) return width;
    return size == StubSize::Base ? 96 : 192;
  }
  std::size_t classes() const { return vocab + 1; }
  std::size_t blank() const { return vocab; }

  void validate() const {
    const std::size_t d = model_width();
    if (heads == 0 || d % heads != 0)
      throw std::invalid_argument("stub config: width " + std::to_string(d) + " not divisible by " +
                                  std::to_string(heads) + " heads");
    if (vocab < 1 || n_mels == 0) throw std::invalid_argument("stub config: vocab and n_mels must be positive");
  }

  std::vector<std::pair<std::string, std::string>> arch_keys() const {
    return {{"stub_width", std::to_string(model_width())}, {"stub_heads", std::to_string(heads)},
            {"stub_encoder_layers", std::to_string(encoder_layers)},
            {"stub_decoder_layers", std::to_string(decoder_layers)},
            {"stub_vocab", std::to_string(vocab)}, {"stub_n_mels", std::to_string(n_mels)}};
  }
};

inline constexpr std::size_t kStubKernel = 4;

/// Names: front.{w,b}, enc.l{i}.*, enc.ln.{g,b}, dec.l{i}.*, dec.ln.{g,b}, head.{w,b}.
template <class T>
ParamSet<T> init_stub_params(const StubConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.model_width();
  Rng rng(derive_seed(seed, {0x57AB}));
  ParamSet<T> ps;
  ps.add("front.w", glorot<T>(rng, {d, cfg.n_mels, kStubKernel}, cfg.n_mels * kStubKernel, d * kStubKernel));
  ps.add("front.b", filled<T>(d, 0.0));
  const AttentionShape as{d, cfg.heads, 4 * d, false};
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) add_attention_layer(ps, "enc.l" + std::to_string(l) + ".", as, rng);
  add_norm(ps, "enc.ln", d);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) add_attention_layer(ps, "dec.l" + std::to_string(l) + ".", as, rng);
  add_norm(ps, "dec.ln", d);
  add_linear(ps, "head", d, cfg.classes(), rng);
  return ps;
}

/// mel (n_mels x T) -> embedding (d x floor(T/2)).
template <class T>
Tensor<T> stub_encode(const Bound<T>& p, const StubConfig& cfg, const Tensor<T>& mel) {
  shape_require(mel.rank() == 2 && mel.dim(0) == cfg.n_mels, Op::Conv1d, "mel (" + std::to_string(cfg.n_mels) + ",T)",
                mel.shape());
  if (mel.dim(1) < 2) throw std::invalid_argument("stub encode: mel needs at least 2 frames, got " + std::to_string(mel.dim(1)));
  const std::size_t d = cfg.model_width();
  Tensor<T> x = conv1d(reshape(mel, {1, cfg.n_mels, mel.dim(1)}), p["front.w"], p["front.b"], 2, 1);
  const std::size_t t = x.dim(2);
  x = add(gelu(reshape(x, {d, t})), positional_encoding<T>(d, t));
  const AttentionShape as{d, cfg.heads, 4 * d, false};
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string pre = "enc.l" + std::to_string(l) + ".";
    x = attention_layer(p, pre, as, x, x);
  }
  return layer_norm(x, p["enc.ln.g"], p["enc.ln.b"]);
}

/// embedding (d x T_enc) -> logits (T_enc x (V + 1)).
template <class T>
Tensor<T> stub_decode_logits(const Bound<T>& p, const StubConfig& cfg, const Tensor<T>& emb) {
  const std::size_t d = cfg.model_width();
  shape_require(emb.rank() == 2 && emb.dim(0) == d, Op::Matmul, "embedding (" + std::to_string(d) + ",T)", emb.shape());
  const AttentionShape as{d, cfg.heads, 4 * d, false};
  Tensor<T> x = emb;
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) x = attention_layer(p, "dec.l" + std::to_string(l) + ".", as, x, x);
  x = layer_norm(x, p["dec.ln.g"], p["dec.ln.b"]);
  return transpose(linear(x, p["head.w"], p["head.b"]));
}

template <class T>
struct StubTargets {
  MelSpectrogram mel;
  Tensor<T> mel_t, enc_t, dec_t;
};

/// Clean-audio targets at mel, encoder and logit level. Never touches a tape.
template <class T>
StubTargets<T> generate_targets(const WaveBuffer& clean, const ParamSet<T>& stub, const StubConfig& cfg,
                                const MelConfig& mel_cfg = {}) {
  StubTargets<T> out;
  out.mel = compute_logmel(clean, mel_cfg);
  const Bound<T> p(stub, nullptr);
  out.mel_t = mel_tensor<T>(out.mel);
  out.enc_t = stub_encode(p, cfg, out.mel_t);
  out.dec_t = stub_decode_logits(p, cfg, out.enc_t);
  return out;
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
template <class T>
std::vector<int> greedy_decode(const Tensor<T>& logits, std::size_t blank) {
  shape_require(logits.rank() == 2, Op::Matmul, "logits (T,C)", logits.shape());
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out;
  std::size_t prev = blank;
  auto v = logits.data();
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[t * c + k] > v[t * c + best]) best = k;
    if (best != blank && best != prev) out.push_back(static_cast<int>(best));
    prev = best;
  }
  return out;
}

inline std::vector<int> collapse_frames(const std::vector<int>& frames, int blank) {
  std::vector<int> out;
  int prev = blank;
  for (int f : frames) {
    if (f != blank && f != prev) out.push_back(f);
    prev = f;
  }
  return out;
}

/// Encoder frame j is centred on sample 320 j + 280 (hop 160, kernel 4, stride
/// 2, pad 1); it is labelled with the unit sounding there, else blank.
inline std::vector<int> frame_labels(const std::vector<UnitSpan>& units, std::size_t enc_frames, int blank,
                                     std::size_t hop = 160, std::size_t n_fft = 400) {
  std::vector<int> labels(enc_frames, blank);
  for (std::size_t j = 0; j < enc_frames; ++j) {
    const std::size_t centre = 2 * j * hop + hop / 2 + n_fft / 2;
    for (const UnitSpan& u : units)
      if (centre >= u.begin && centre < u.end) labels[j] = u.token;
  }
  return labels;
}

template <class T>
std::vector<int> frame_argmax(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  auto v = logits.data();
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[t * c + k] > v[t * c + best]) best = k;
    out[t] = static_cast<int>(best);
  }
  return out;
}

/// Cross-entropy of logits (T x C) against integer frame labels, mean over frames.
template <class T>
Tensor<T> frame_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (labels.size() != logits.dim(0)) throw std::invalid_argument("frame_cross_entropy: label count mismatch");
  Tensor<T> onehot(logits.shape(), T{0});
  auto o = onehot.mutable_data();
  for (std::size_t t = 0; t < labels.size(); ++t) o[t * logits.dim(1) + static_cast<std::size_t>(labels[t])] = T{1};
  return cross_entropy_argmax(onehot, logits);
}

}  // namespace avf
