#pragma once

// Losses, stage definitions, the plateau learning-rate schedule and the
// training loops for the fusion module and for the ASR surrogate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/asr_stub.hpp"
#include "avfusion/audio.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/manifest.hpp"
#include "avfusion/nn.hpp"
#include "avfusion/synth.hpp"
#include "avfusion/util.hpp"
#include "avfusion/visual.hpp"

namespace avf {

// ---------------------------------------------------------------------------
// Losses

struct LossWeights {
  double mel = 1.0;
  double enc = 2.0;
  double dec = 2.0;

  void validate() const {
    if (!(mel >= 0) || !(enc >= 0) || !(dec >= 0)) throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct LossSet {
  bool mel = true, enc = true, dec = true;
  bool operator==(const LossSet&) const = default;
};

struct LossParts {
  std::optional<double> mel, enc, dec;
};

inline double total_loss(const LossParts& parts, const LossWeights& w, const LossSet& active) {
  w.validate();
  double total = 0;
  auto term = [&](bool on, const std::optional<double>& v, double weight, const char* name) {
    if (!on) return;
    if (!v) throw std::invalid_argument(std::string("total_loss: active part L_") + name + " is missing");
    total += weight * *v;
  };
  term(active.mel, parts.mel, w.mel, "mel");
  term(active.enc, parts.enc, w.enc, "enc");
  term(active.dec, parts.dec, w.dec, "dec");
  return total;
}

template <class T>
struct LossTensors {
  Tensor<T> mel, enc, dec;  // empty when inactive
};

template <class T>
Tensor<T> total_loss(const LossTensors<T>& parts, const LossWeights& w, const LossSet& active) {
  w.validate();
  Tensor<T> total;
  bool any = false;
  auto term = [&](bool on, const Tensor<T>& v, double weight, const char* name) {
    if (!on) return;
    if (v.empty()) throw std::invalid_argument(std::string("total_loss: active part L_") + name + " is missing");
    Tensor<T> t = scale(v, weight);
    total = any ? add(total, t) : t;
    any = true;
  };
  term(active.mel, parts.mel, w.mel, "mel");
  term(active.enc, parts.enc, w.enc, "enc");
  term(active.dec, parts.dec, w.dec, "dec");
  if (!any) throw std::invalid_argument("total_loss: no active loss");
  return total;
}

// ---------------------------------------------------------------------------
// Stages

enum class Stage { Pretrain, Main, Finetune };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Main: return "main";
    case Stage::Finetune: return "finetune";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::Pretrain;
  if (s == "main") return Stage::Main;
  if (s == "finetune") return Stage::Finetune;
  throw std::invalid_argument("unknown stage '" + s + "' (expected pretrain, main or finetune)");
}

struct StageConfig {
  Stage stage = Stage::Main;
  LossSet active;
  bool stub_frozen = true;
  double lr0 = 1e-4;
  double decay = 1.58;
  double plateau_threshold = 0.01;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 10;
  double snr_min = -20.0;
  double snr_max = 50.0;
  bool augment = true;

  static StageConfig defaults(Stage s) {
    StageConfig c;
    c.stage = s;
    switch (s) {
      case Stage::Pretrain: c.active = {true, true, false}; break;
      case Stage::Main: c.active = {true, true, true}; break;
      case Stage::Finetune:
        c.active = {true, true, true};
        c.stub_frozen = false;
        c.lr0 = 1e-5;
        break;
    }
    return c;
  }

  void validate() const {
    auto fail = [&](const std::string& m) { throw std::invalid_argument("stage " + to_string(stage) + ": " + m); };
    if (stage == Stage::Pretrain && !(active == LossSet{true, true, false}))
      fail("pretrain optimizes exactly L_mel and L_enc");
    if (stage == Stage::Main && !(active == LossSet{true, true, true})) fail("main optimizes all three losses");
    if (stage != Stage::Finetune && !stub_frozen) fail("the ASR surrogate stays frozen before finetune");
    if (stage == Stage::Finetune && stub_frozen) fail("finetune unfreezes the ASR surrogate");
    if (!(lr0 > 0) || !(decay > 1) || !(plateau_threshold >= 0)) fail("lr0 > 0, decay > 1, threshold >= 0 required");
    if (batch_size == 0 || max_epochs == 0) fail("batch_size and max_epochs must be positive");
    if (!(snr_min <= snr_max)) fail("snr range is empty");
  }
};

/// Constant learning rate until the validation loss improves by less than
/// `threshold` (relative to the best so far); from then on the rate is
/// divided by `decay` after every epoch, and the first epoch without such an
/// improvement ends training.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(double lr0, double decay = 1.58, double threshold = 0.01)
      : lr_(lr0), decay_(decay), threshold_(threshold) {}

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  bool decaying() const noexcept { return decaying_; }
  std::size_t decays() const noexcept { return decays_; }
  bool last_was_best() const noexcept { return last_best_; }

  /// Returns false once training should stop.
  bool end_epoch(double val_loss) {
    const bool improved = !std::isfinite(best_) || (best_ - val_loss) >= threshold_ * std::abs(best_);
    last_best_ = val_loss < best_;
    if (last_best_) best_ = val_loss;
    if (decaying_ && !improved) return false;
    if (!decaying_ && improved) return true;
    decaying_ = true;
    lr_ /= decay_;
    ++decays_;
    return true;
  }

 private:
  double lr_, decay_, threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  bool decaying_ = false, last_best_ = false;
  std::size_t decays_ = 0;
};

// ---------------------------------------------------------------------------
// Per-sample noisy inputs

struct MixDraw {
  double snr_db = 0;
  NoiseCategory category = NoiseCategory::Babble;
  std::uint64_t noise_seed = 0;
};

/// SNR uniform over the stage range, category uniform over all four.
inline MixDraw draw_mix(Rng& rng, double snr_min, double snr_max) {
  MixDraw d;
  d.snr_db = rng.uniform(snr_min, snr_max);
  d.category = kNoiseCategories[static_cast<std::size_t>(rng.uniform_int(0, kNoiseCategories.size() - 1))];
  d.noise_seed = rng.next();
  return d;
}

struct PipelineConfig {
  MelConfig mel;
  PauseConfig pause;
  AugmentConfig augment;
  MaskConfig mask;
  SynthConfig synth;
};

template <class T>
struct ModelInput {
  Tensor<T> mel;
  Tensor<T> video;
};

/// Clean (eval-mode) view of a sample.
template <class T>
ModelInput<T> clean_input(const AvSample& s, const PipelineConfig& pc) {
  Rng unused(0);
  return {mel_tensor<T>(compute_logmel(s.wave, pc.mel)),
          frames_tensor<T>(preprocess_frames(s.frames, CropMode::Eval, unused))};
}

template <class T>
Tensor<T> noisy_mel(const AvSample& s, const MixDraw& d, const PipelineConfig& pc, Rng& rng) {
  const WaveBuffer noise = generate_noise(d.noise_seed, d.category, s.wave.duration_s(), pc.synth);
  return mel_tensor<T>(compute_logmel(mix_at_snr(s.wave, noise, d.snr_db, rng, pc.pause), pc.mel));
}

/// Training view: seeded mix, and when `augment` is set, mel masking, a
/// random 88x88 crop and frame masking.
template <class T>
ModelInput<T> training_input(const AvSample& s, const StageConfig& st, const PipelineConfig& pc, std::uint64_t seed) {
  Rng rng(seed);
  const MixDraw d = draw_mix(rng, st.snr_min, st.snr_max);
  const WaveBuffer noise = generate_noise(d.noise_seed, d.category, s.wave.duration_s(), pc.synth);
  MelSpectrogram mel = compute_logmel(mix_at_snr(s.wave, noise, d.snr_db, rng, pc.pause), pc.mel);
  if (st.augment) mel = spec_augment(mel, pc.augment, rng);
  FrameSequence seq = preprocess_frames(s.frames, st.augment ? CropMode::Train : CropMode::Eval, rng);
  if (st.augment) seq = mask_augment(seq, rng, pc.mask);
  return {mel_tensor<T>(mel), frames_tensor<T>(seq)};
}

/// Validation view: seeded mix only, no augmentation.
template <class T>
ModelInput<T> validation_input(const AvSample& s, const StageConfig& st, const PipelineConfig& pc, std::uint64_t seed) {
  Rng rng(seed);
  const MixDraw d = draw_mix(rng, st.snr_min, st.snr_max);
  Rng crop(0);
  return {noisy_mel<T>(s, d, pc, rng), frames_tensor<T>(preprocess_frames(s.frames, CropMode::Eval, crop))};
}

// ---------------------------------------------------------------------------
// Fusion training

template <class T>
struct Models {
  FusionConfig fusion_cfg;
  StubConfig stub_cfg;
  ParamSet<T>* fusion = nullptr;
  ParamSet<T>* stub = nullptr;
};

template <class T>
struct SampleLoss {
  double mel = 0, enc = 0, dec = 0, total = 0;
  std::vector<std::vector<T>> fusion_grads, stub_grads;
};

/// Forward (and, when `train`, backward) for one sample against cached targets.
template <class T>
SampleLoss<T> sample_loss(const Models<T>& m, const ModelInput<T>& in, const StubTargets<T>& tgt, const StageConfig& st,
                          const LossWeights& w, bool train) {
  Tape<T> tape;
  Tape<T>* tp = train ? &tape : nullptr;
  const Bound<T> fp(*m.fusion, tp);
  const Bound<T> sp(*m.stub, train && !st.stub_frozen ? &tape : nullptr);
  const Tensor<T> fused = fusion_forward(fp, m.fusion_cfg, in.mel, in.video);
  LossTensors<T> parts;
  parts.mel = l1_loss(tgt.mel_t, fused);
  const Tensor<T> enc = stub_encode(sp, m.stub_cfg, fused);
  parts.enc = l1_loss(tgt.enc_t, enc);
  if (st.active.dec) parts.dec = cross_entropy_argmax(tgt.dec_t, stub_decode_logits(sp, m.stub_cfg, enc));
  const Tensor<T> total = total_loss(parts, w, st.active);
  SampleLoss<T> out;
  out.mel = parts.mel.item();
  out.enc = parts.enc.item();
  out.dec = st.active.dec ? parts.dec.item() : 0.0;
  out.total = total.item();
  if (train) {
    const Gradients<T> g = tape.backward(total);
    out.fusion_grads = fp.gradients(g);
    if (!st.stub_frozen) out.stub_grads = sp.gradients(g);
  }
  return out;
}

struct TrainData {
  const std::vector<AvSample>* train = nullptr;
  const std::vector<AvSample>* val = nullptr;
};

template <class T>
struct TargetCache {
  std::vector<StubTargets<T>> train, val;
};

/// Targets come from `generator` (the surrogate as it was before any
/// fine-tuning), on clean audio, without a tape.
template <class T>
TargetCache<T> build_targets(const TrainData& data, const ParamSet<T>& generator, const StubConfig& sc,
                             const PipelineConfig& pc, std::size_t threads) {
  TargetCache<T> c;
  auto fill = [&](const std::vector<AvSample>& src, std::vector<StubTargets<T>>& dst) {
    dst.resize(src.size());
    parallel_for(src.size(), threads, [&](std::size_t i) { dst[i] = generate_targets(src[i].wave, generator, sc, pc.mel); });
  };
  fill(*data.train, c.train);
  fill(*data.val, c.val);
  return c;
}

struct StageResult {
  std::size_t steps = 0, epochs = 0, decays = 0;
  double best_val = std::numeric_limits<double>::infinity();
  double final_lr = 0;
  std::vector<double> val_history;
};

struct StageRunOptions {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  LossWeights weights;
  AdamConfig adam;
  PipelineConfig pipeline;
  std::ostream* log = nullptr;
  std::size_t step_offset = 0;
  /// Called with (epoch, val_total) whenever a new best validation loss is
  /// reached, after the parameters hold that epoch's values.
  std::function<void(std::size_t, double)> on_best;
};

namespace detail {

inline std::string na_or(bool on, double v) { return on ? fmt_g(v) : std::string("NA"); }

template <class T>
void restore(ParamSet<T>& dst, const ParamSet<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst.value(i).mutable_data();
    auto s = src.value(i).data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace detail

/// Mean validation loss of the stage's active losses.
template <class T>
double validation_loss(const Models<T>& m, const std::vector<ModelInput<T>>& inputs,
                       const std::vector<StubTargets<T>>& targets, const StageConfig& st, const LossWeights& w,
                       std::size_t threads) {
  if (inputs.empty()) throw std::invalid_argument("validation split is empty");
  std::vector<double> totals(inputs.size());
  parallel_for(inputs.size(), threads,
               [&](std::size_t i) { totals[i] = sample_loss(m, inputs[i], targets[i], st, w, false).total; });
  double s = 0;
  for (double v : totals) s += v;
  return s / static_cast<double>(totals.size());
}

/// Epoch loop with the plateau schedule. Parameters end at the best
/// validation epoch. Stub parameters are only touched when the stage
/// unfreezes them.
template <class T>
StageResult run_stage(const Models<T>& m, const StageConfig& st, const TrainData& data, const TargetCache<T>& targets,
                      const StageRunOptions& opt) {
  st.validate();
  if (!data.train || data.train->empty()) throw std::invalid_argument("run_stage: training data is empty");
  if (!data.val || data.val->empty()) throw std::invalid_argument("run_stage: validation data is empty");
  const std::uint64_t stage_seed = derive_seed(opt.seed, {0x57A6E, static_cast<std::uint64_t>(st.stage)});

  std::vector<ModelInput<T>> val_inputs(data.val->size());
  parallel_for(val_inputs.size(), opt.threads, [&](std::size_t i) {
    val_inputs[i] = validation_input<T>((*data.val)[i], st, opt.pipeline, derive_seed(stage_seed, {0xA1, i}));
  });

  Adam<T> adam(opt.adam);
  PlateauSchedule sched(st.lr0, st.decay, st.plateau_threshold);
  StageResult res;
  ParamSet<T> best_fusion = m.fusion->deep_copy();
  ParamSet<T> best_stub = m.stub->deep_copy();
  const auto all = [](std::string_view) { return true; };
  const std::size_t n = data.train->size();

  for (std::size_t epoch = 0; epoch < st.max_epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(stage_seed, {0x5F, epoch}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, i - 1))]);

    const double lr = sched.lr();
    for (std::size_t b0 = 0; b0 < n; b0 += st.batch_size) {
      const std::size_t b1 = std::min(n, b0 + st.batch_size), bs = b1 - b0;
      std::vector<SampleLoss<T>> losses(bs);
      parallel_for(bs, opt.threads, [&](std::size_t k) {
        const std::size_t idx = order[b0 + k];
        const auto in = training_input<T>((*data.train)[idx], st, opt.pipeline, derive_seed(stage_seed, {epoch, idx}));
        losses[k] = sample_loss(m, in, targets.train[idx], st, opt.weights, true);
      });
      // Fixed-order reduction keeps updates independent of thread scheduling.
      auto reduce = [&](auto member) {
        std::vector<std::vector<T>> g = losses[0].*member;
        for (std::size_t k = 1; k < bs; ++k)
          for (std::size_t p = 0; p < g.size(); ++p)
            for (std::size_t j = 0; j < g[p].size(); ++j) g[p][j] += (losses[k].*member)[p][j];
        const T inv = T{1} / static_cast<T>(bs);
        for (auto& v : g)
          for (T& x : v) x *= inv;
        return g;
      };
      if (!st.stub_frozen) {
        // One clipping norm across both parameter groups.
        auto gf = reduce(&SampleLoss<T>::fusion_grads);
        auto gs = reduce(&SampleLoss<T>::stub_grads);
        ParamSet<T> joint;
        std::vector<std::vector<T>> gj;
        for (std::size_t i = 0; i < m.fusion->size(); ++i) {
          joint.add("fusion/" + m.fusion->names()[i], m.fusion->value(i));
          gj.push_back(std::move(gf[i]));
        }
        for (std::size_t i = 0; i < m.stub->size(); ++i) {
          joint.add("stub/" + m.stub->names()[i], m.stub->value(i));
          gj.push_back(std::move(gs[i]));
        }
        adam.step(joint, gj, lr, all);
      } else {
        adam.step(*m.fusion, reduce(&SampleLoss<T>::fusion_grads), lr, all);
      }
      ++res.steps;
      double lm = 0, le = 0, ld = 0, lt = 0;
      for (const auto& l : losses) {
        lm += l.mel;
        le += l.enc;
        ld += l.dec;
        lt += l.total;
      }
      const double inv = 1.0 / static_cast<double>(bs);
      const bool last = b1 == n;
      double val = 0;
      if (last) val = validation_loss(m, val_inputs, targets.val, st, opt.weights, opt.threads);
      if (opt.log)
        *opt.log << "step=" << opt.step_offset + res.steps << " stage=" << to_string(st.stage) << " lr=" << fmt_g(lr)
                 << " L_mel=" << fmt_g(lm * inv) << " L_enc=" << fmt_g(le * inv)
                 << " L_dec=" << detail::na_or(st.active.dec, ld * inv) << " total=" << fmt_g(lt * inv)
                 << " val_total=" << detail::na_or(last, val) << '\n';
      if (last) {
        res.val_history.push_back(val);
        ++res.epochs;
        const bool go_on = sched.end_epoch(val);
        if (sched.last_was_best()) {
          best_fusion = m.fusion->deep_copy();
          best_stub = m.stub->deep_copy();
          if (opt.on_best) opt.on_best(epoch, val);
        }
        if (!go_on) epoch = st.max_epochs;
      }
    }
  }
  detail::restore(*m.fusion, best_fusion);
  detail::restore(*m.stub, best_stub);
  res.decays = sched.decays();
  res.best_val = sched.best();
  res.final_lr = sched.lr();
  return res;
}

// ---------------------------------------------------------------------------
// Surrogate pre-training on clean synthetic speech

struct StubTrainConfig {
  double lr = 1e-3;
  std::size_t max_epochs = 30;
  std::size_t batch_size = 8;
  double target_accuracy = 0.9;
  /// Training stops once validation frame accuracy reaches this value.
  double stop_accuracy = 0.98;
};

struct StubTrainResult {
  std::size_t epochs = 0;
  double val_accuracy = 0;
  std::vector<double> accuracy_history;
};

template <class T>
struct LabelledMel {
  Tensor<T> mel;
  std::vector<int> labels;
};

template <class T>
LabelledMel<T> labelled_mel(const SynthSample& s, const StubConfig& sc, const MelConfig& mc) {
  const MelSpectrogram mel = compute_logmel(s.wave, mc);
  const std::size_t enc_frames = mel.frames / 2;
  return {mel_tensor<T>(mel), frame_labels(s.units, enc_frames, static_cast<int>(sc.blank()), mc.hop, mc.n_fft)};
}

/// Fraction of encoder frames whose argmax equals the label.
template <class T>
double frame_accuracy(const ParamSet<T>& stub, const StubConfig& sc, const std::vector<LabelledMel<T>>& data,
                      std::size_t threads = 1) {
  std::vector<std::size_t> hits(data.size()), total(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const Bound<T> p(stub, nullptr);
    const auto pred = frame_argmax(stub_decode_logits(p, sc, stub_encode(p, sc, data[i].mel)));
    for (std::size_t t = 0; t < pred.size(); ++t) hits[i] += pred[t] == data[i].labels[t];
    total[i] = pred.size();
  });
  const double h = std::accumulate(hits.begin(), hits.end(), 0.0);
  const double n = std::accumulate(total.begin(), total.end(), 0.0);
  return n > 0 ? h / n : 0.0;
}

template <class T>
StubTrainResult pretrain_stub(ParamSet<T>& stub, const StubConfig& sc, const std::vector<SynthSample>& train,
                              const std::vector<SynthSample>& val, const MelConfig& mc, const StubTrainConfig& tc,
                              std::uint64_t seed, std::size_t threads = 1, std::ostream* log = nullptr) {
  if (train.empty() || val.empty()) throw std::invalid_argument("pretrain_stub: empty data");
  std::vector<LabelledMel<T>> tr(train.size()), va(val.size());
  parallel_for(train.size(), threads, [&](std::size_t i) { tr[i] = labelled_mel<T>(train[i], sc, mc); });
  parallel_for(val.size(), threads, [&](std::size_t i) { va[i] = labelled_mel<T>(val[i], sc, mc); });
  Adam<T> opt;
  const auto all = [](std::string_view) { return true; };
  StubTrainResult res;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    std::vector<std::size_t> order(tr.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(seed, {0x57B, epoch}));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, i - 1))]);
    for (std::size_t b0 = 0; b0 < tr.size(); b0 += tc.batch_size) {
      const std::size_t bs = std::min(tr.size(), b0 + tc.batch_size) - b0;
      std::vector<std::vector<std::vector<T>>> grads(bs);
      std::vector<double> losses(bs);
      parallel_for(bs, threads, [&](std::size_t k) {
        const auto& item = tr[order[b0 + k]];
        Tape<T> tape;
        const Bound<T> p(stub, &tape);
        const Tensor<T> loss = frame_cross_entropy(stub_decode_logits(p, sc, stub_encode(p, sc, item.mel)), item.labels);
        losses[k] = loss.item();
        grads[k] = p.gradients(tape.backward(loss));
      });
      auto g = std::move(grads[0]);
      for (std::size_t k = 1; k < bs; ++k)
        for (std::size_t p = 0; p < g.size(); ++p)
          for (std::size_t j = 0; j < g[p].size(); ++j) g[p][j] += grads[k][p][j];
      for (auto& v : g)
        for (T& x : v) x /= static_cast<T>(bs);
      opt.step(stub, g, tc.lr, all);
      ++step;
      if (log) {
        double s = 0;
        for (double l : losses) s += l;
        *log << "step=" << step << " stage=stub lr=" << fmt_g(tc.lr) << " L_ce=" << fmt_g(s / bs) << '\n';
      }
    }
    ++res.epochs;
    res.val_accuracy = frame_accuracy(stub, sc, va, threads);
    res.accuracy_history.push_back(res.val_accuracy);
    if (log) *log << "epoch=" << epoch + 1 << " stage=stub val_frame_accuracy=" << fmt_g(res.val_accuracy) << '\n';
    if (res.val_accuracy >= tc.stop_accuracy) break;
  }
  return res;
}

}  // namespace avf
