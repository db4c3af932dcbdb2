#pragma once

// Audio-visual fusion front-end: residual CNN feature extractors for both
// modalities, a cross-attention stack with visual queries, and a residual
// projection back onto the input log-mel.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/audio.hpp"
#include "avfusion/nn.hpp"
#include "avfusion/rng.hpp"
#include "avfusion/tensor.hpp"
#include "avfusion/visual.hpp"

namespace avf {

class AlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FusionConfig {
  std::size_t n_mels = 80;
  std::size_t width = 144;
  std::size_t heads = 12;
  std::size_t layers = 12;
  std::size_t ffn_mult = 4;
  std::array<std::size_t, 3> audio_channels{32, 64, 128};
  // Residual blocks in order 3D, 2D, 3D, 2D; an x2 temporal upsampler follows
  // each 2D block.
  std::array<std::size_t, 4> visual_channels{64, 128, 256, 512};
  std::array<std::size_t, 4> visual_strides{2, 2, 2, 2};
  std::size_t gn_groups = 4;
  std::size_t max_skew = 8;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("fusion config: " + m); };
    if (n_mels == 0 || width == 0 || layers == 0 || ffn_mult == 0) fail("sizes must be positive");
    if (heads == 0 || width % heads != 0)
      fail("width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
    auto check_groups = [&](std::size_t c) {
      if (c == 0) fail("channel counts must be positive");
      if (c % groups_for(c) != 0) fail("channels " + std::to_string(c) + " not divisible into norm groups");
    };
    for (std::size_t c : audio_channels) check_groups(c);
    for (std::size_t c : visual_channels) check_groups(c);
    for (std::size_t s : visual_strides)
      if (s == 0) fail("visual strides must be positive");
  }

  std::size_t groups_for(std::size_t channels) const { return std::min(gn_groups, channels); }

  /// Architecture-defining keys; checkpoints carry them for compatibility checks.
  std::vector<std::pair<std::string, std::string>> arch_keys() const {
    auto list = [](const auto& a) {
      std::string s;
      for (std::size_t i = 0; i < a.size(); ++i) s += (i ? "," : "") + std::to_string(a[i]);
      return s;
    };
    return {{"n_mels", std::to_string(n_mels)},
            {"width", std::to_string(width)},
            {"heads", std::to_string(heads)},
            {"layers", std::to_string(layers)},
            {"ffn_mult", std::to_string(ffn_mult)},
            {"audio_channels", list(audio_channels)},
            {"visual_channels", list(visual_channels)},
            {"visual_strides", list(visual_strides)},
            {"gn_groups", std::to_string(gn_groups)}};
  }
};

namespace detail {

template <class T>
Tensor<T> conv_weight(Rng& rng, std::size_t cout, std::size_t cin, Shape kernel) {
  std::size_t vol = 1;
  for (std::size_t k : kernel) vol *= k;
  Shape s{cout, cin};
  s.insert(s.end(), kernel.begin(), kernel.end());
  return glorot<T>(rng, s, cin * vol, cout * vol);
}

template <class T>
void add_res_block(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, const Shape& kernel,
                   bool needs_skip, Rng& rng) {
  ps.add(name + ".conv1.w", conv_weight<T>(rng, cout, cin, kernel));
  ps.add(name + ".conv1.b", filled<T>(cout, 0.0));
  add_norm(ps, name + ".gn1", cout);
  ps.add(name + ".conv2.w", conv_weight<T>(rng, cout, cout, kernel));
  ps.add(name + ".conv2.b", filled<T>(cout, 0.0));
  add_norm(ps, name + ".gn2", cout);
  Shape one(kernel.size(), 1);
  if (needs_skip) ps.add(name + ".skip.w", conv_weight<T>(rng, cout, cin, one));
}

inline AttentionShape fusion_attention(const FusionConfig& c) {
  return {c.width, c.heads, c.ffn_mult * c.width, true};
}

inline std::string block_name(const char* stream, std::size_t i) { return std::string(stream) + ".b" + std::to_string(i); }

}  // namespace detail

/// Parameter names:
///   audio.b{0..2}.{conv1,conv2}.{w,b}, .{gn1,gn2}.{g,b}, .skip.w, audio.proj.{w,b}
///   visual.b{0..3}.*, visual.up{0,1}.{w,b}, visual.final.{w,b}
///   attn.l{i}.*, out.{w,b}
template <class T>
ParamSet<T> init_fusion_params(const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet<T> ps;
  Rng rng(derive_seed(seed, {0xF051}));
  std::size_t cin = 1;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t c = cfg.audio_channels[i];
    detail::add_res_block(ps, detail::block_name("audio", i), cin, c, {3, 3}, cin != c, rng);
    cin = c;
  }
  add_linear(ps, "audio.proj", cin, cfg.width, rng);

  cin = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t c = cfg.visual_channels[i];
    const Shape kernel = i % 2 == 0 ? Shape{3, 3, 3} : Shape{1, 3, 3};
    detail::add_res_block(ps, detail::block_name("visual", i), cin, c, kernel, cin != c || cfg.visual_strides[i] != 1, rng);
    cin = c;
    if (i % 2 == 1) {
      // Channel mixing times a linear-interpolation tap profile.
      const std::string up = "visual.up" + std::to_string(i / 2);
      const Tensor<T> mix = glorot<T>(rng, {c, c}, c, c);
      Tensor<T> w({c, c, 4});
      constexpr std::array<double, 4> taps{0.25, 0.75, 0.75, 0.25};
      auto wd = w.mutable_data();
      for (std::size_t k = 0; k < c * c; ++k)
        for (std::size_t j = 0; j < 4; ++j) wd[k * 4 + j] = static_cast<T>(mix[k] * taps[j]);
      ps.add(up + ".w", w);
      ps.add(up + ".b", filled<T>(c, 0.0));
    }
  }
  ps.add("visual.final.w", detail::conv_weight<T>(rng, cfg.width, cin, {3, 3, 3}));
  ps.add("visual.final.b", filled<T>(cfg.width, 0.0));

  const AttentionShape as = detail::fusion_attention(cfg);
  for (std::size_t l = 0; l < cfg.layers; ++l) add_attention_layer(ps, "attn.l" + std::to_string(l) + ".", as, rng);
  ps.add("out.w", Tensor<T>({cfg.n_mels, cfg.width}, T{0}));
  ps.add("out.b", filled<T>(cfg.n_mels, 0.0));
  return ps;
}

template <class T>
Tensor<T> mel_tensor(const MelSpectrogram& mel) {
  std::vector<T> v(mel.values.begin(), mel.values.end());
  return Tensor<T>({mel.n_mels, mel.frames}, std::move(v));
}

template <class T>
MelSpectrogram to_mel(const Tensor<T>& t, double hop_s = 0.01) {
  MelSpectrogram m;
  m.n_mels = t.dim(0);
  m.frames = t.dim(1);
  m.hop_s = hop_s;
  m.values.assign(t.data().begin(), t.data().end());
  return m;
}

/// (1, 1, T_v, H, W) video volume.
template <class T>
Tensor<T> frames_tensor(const FrameSequence& seq) {
  if (seq.count == 0) throw VisualError("frame sequence is empty");
  std::vector<T> v(seq.values.begin(), seq.values.end());
  return Tensor<T>({1, 1, seq.count, seq.height, seq.width}, std::move(v));
}

namespace detail {

// Temporal axis (2) is padded by edge replication so that static input stays
// static; spatial axes are zero padded.
template <class T>
Tensor<T> res_block(const Bound<T>& p, const std::string& name, const Tensor<T>& x, std::size_t groups_out,
                    bool volumetric, std::size_t stride, bool has_skip) {
  Tensor<T> h, skip;
  if (!volumetric) {
    h = conv2d(x, p[name + ".conv1.w"], p[name + ".conv1.b"], {1, 1}, {1, 1});
    h = gelu(group_norm(h, p[name + ".gn1.g"], p[name + ".gn1.b"], groups_out));
    h = conv2d(h, p[name + ".conv2.w"], p[name + ".conv2.b"], {1, 1}, {1, 1});
    skip = has_skip ? conv2d(x, p[name + ".skip.w"], Tensor<T>{}) : x;
  } else {
    const bool temporal = p[name + ".conv1.w"].dim(2) == 3;
    auto tpad = [&](const Tensor<T>& v) { return temporal ? pad_edge(v, 2, 1, 1) : v; };
    h = conv3d(tpad(x), p[name + ".conv1.w"], p[name + ".conv1.b"], {1, stride, stride}, {0, 1, 1});
    h = gelu(group_norm(h, p[name + ".gn1.g"], p[name + ".gn1.b"], groups_out));
    h = conv3d(tpad(h), p[name + ".conv2.w"], p[name + ".conv2.b"], {1, 1, 1}, {0, 1, 1});
    skip = has_skip ? conv3d(x, p[name + ".skip.w"], Tensor<T>{}, {1, stride, stride}) : x;
  }
  h = group_norm(h, p[name + ".gn2.g"], p[name + ".gn2.b"], groups_out);
  return add(skip, h);
}

}  // namespace detail

/// mel: (n_mels x T) -> (width x T). Stride 1 throughout, frequency averaged out.
template <class T>
Tensor<T> extract_audio_features(const Bound<T>& p, const FusionConfig& cfg, const Tensor<T>& mel) {
  shape_require(mel.rank() == 2 && mel.dim(0) == cfg.n_mels, Op::Conv2d,
                "mel (" + std::to_string(cfg.n_mels) + ",T)", mel.shape());
  const std::size_t t = mel.dim(1);
  Tensor<T> x = reshape(mel, {1, 1, cfg.n_mels, t});
  std::size_t cin = 1;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t c = cfg.audio_channels[i];
    x = detail::res_block(p, detail::block_name("audio", i), x, cfg.groups_for(c), false, 1, cin != c);
    cin = c;
  }
  Tensor<T> pooled = reshape(mean_axis(x, 2), {cin, t});
  return linear(pooled, p["audio.proj.w"], p["audio.proj.b"]);
}

/// video: (1, 1, T_v, H, W) -> (width x 4 T_v).
template <class T>
Tensor<T> extract_visual_features(const Bound<T>& p, const FusionConfig& cfg, const Tensor<T>& video) {
  shape_require(video.rank() == 5 && video.dim(0) == 1 && video.dim(1) == 1, Op::Conv3d, "video (1,1,T,H,W)",
                video.shape());
  if (video.dim(2) == 0) throw VisualError("frame sequence is empty");
  Tensor<T> x = video;
  std::size_t cin = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t c = cfg.visual_channels[i], s = cfg.visual_strides[i];
    x = detail::res_block(p, detail::block_name("visual", i), x, cfg.groups_for(c), true, s, cin != c || s != 1);
    cin = c;
    if (i % 2 == 1) {
      const std::string up = "visual.up" + std::to_string(i / 2);
      const Shape s5 = x.shape();
      Tensor<T> y = reshape(x, {s5[1], s5[2], s5[3], s5[4]});
      // Edge-extend by one step so the output boundary sees a full stencil;
      // pad 3 crops the extension back off: 2 (T + 2) - 6 + 4 - 2 = 2 T.
      y = conv_transpose1d(pad_edge(y, 1, 1, 1), p[up + ".w"], p[up + ".b"], 2, 3);
      x = gelu(reshape(y, {1, y.dim(0), y.dim(1), y.dim(2), y.dim(3)}));
    }
  }
  x = conv3d(pad_edge(x, 2, 1, 1), p["visual.final.w"], p["visual.final.b"], {1, 1, 1}, {0, 1, 1});
  x = mean_axis(mean_axis(x, 4), 3);
  return reshape(x, {cfg.width, x.dim(2)});
}

/// Brings a (d x T) stream to exactly `t` steps: truncation, or edge
/// extension for a short stream. More than `max_skew` steps apart is an error.
template <class T>
Tensor<T> align_stream(const Tensor<T>& x, std::size_t t, std::size_t max_skew, const char* what) {
  const std::size_t n = x.dim(1);
  const std::size_t skew = n > t ? n - t : t - n;
  if (skew > max_skew)
    throw AlignmentError(std::string(what) + " has " + std::to_string(n) + " steps, mel has " + std::to_string(t) +
                         " (more than " + std::to_string(max_skew) + " apart)");
  if (n > t) return slice_last(x, 0, t);
  if (n < t) return pad_edge(x, 1, 0, t - n);
  return x;
}

/// Layer 1 attends from visual queries to audio keys/values; layer l > 1
/// attends from the same visual queries to layer l-1's output. The result is
/// mel_in plus a projection of the last layer, shaped exactly like mel_in.
template <class T>
Tensor<T> fuse(const Bound<T>& p, const FusionConfig& cfg, const Tensor<T>& audio_feat, const Tensor<T>& visual_feat,
               const Tensor<T>& mel_in, std::span<const std::uint8_t> audio_mask = {},
               std::vector<Tensor<T>>* probs = nullptr) {
  shape_require(mel_in.rank() == 2 && mel_in.dim(0) == cfg.n_mels, Op::Matmul,
                "mel (" + std::to_string(cfg.n_mels) + ",T)", mel_in.shape());
  shape_require(audio_feat.rank() == 2 && audio_feat.dim(0) == cfg.width, Op::Matmul,
                "audio features (" + std::to_string(cfg.width) + ",T)", audio_feat.shape());
  shape_require(visual_feat.rank() == 2 && visual_feat.dim(0) == cfg.width, Op::Matmul,
                "visual features (" + std::to_string(cfg.width) + ",T)", visual_feat.shape());
  const std::size_t t = mel_in.dim(1);
  const Tensor<T> pe = positional_encoding<T>(cfg.width, t);
  const Tensor<T> a = add(align_stream(audio_feat, t, cfg.max_skew, "audio stream"), pe);
  const Tensor<T> v = add(align_stream(visual_feat, t, cfg.max_skew, "visual stream"), pe);
  const AttentionShape as = detail::fusion_attention(cfg);
  Tensor<T> h = a;
  for (std::size_t l = 0; l < cfg.layers; ++l)
    h = attention_layer(p, "attn.l" + std::to_string(l) + ".", as, v, h,
                        l == 0 ? audio_mask : std::span<const std::uint8_t>{}, probs);
  return add(mel_in, linear(h, p["out.w"], p["out.b"]));
}

/// Full module: (noisy mel, preprocessed frames) -> enhanced mel.
template <class T>
Tensor<T> fusion_forward(const Bound<T>& p, const FusionConfig& cfg, const Tensor<T>& mel, const Tensor<T>& video,
                         std::vector<Tensor<T>>* probs = nullptr) {
  const Tensor<T> a = extract_audio_features(p, cfg, mel);
  const Tensor<T> v = extract_visual_features(p, cfg, video);
  return fuse(p, cfg, a, v, mel, {}, probs);
}

}  // namespace avf
