#pragma once

// End-to-end runs shared by the CLI and the acceptance checks: synthetic
// splits, surrogate pre-training, the fusion stage sequence, checkpoints
// with architecture metadata, and grid evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "avfusion/asr_stub.hpp"
#include "avfusion/checkpoint.hpp"
#include "avfusion/config.hpp"
#include "avfusion/evaluator.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/manifest.hpp"
#include "avfusion/synth.hpp"
#include "avfusion/trainer.hpp"

namespace avf {

enum class Split { Train, Val, Eval };

inline std::vector<SynthSample> synth_split(const RunConfig& cfg, Split which, std::size_t threads = 1) {
  std::uint64_t first = cfg.data.train_seed;
  std::size_t n = cfg.data.train_samples;
  if (which == Split::Val) first = cfg.data.val_seed, n = cfg.data.val_samples;
  if (which == Split::Eval) first = cfg.data.eval_seed, n = cfg.data.eval_samples;
  std::vector<SynthSample> out(n);
  parallel_for(n, threads, [&](std::size_t i) { out[i] = generate_sample(first + i, cfg.pipeline.synth); });
  return out;
}

inline std::vector<AvSample> to_av_samples(const std::vector<SynthSample>& s) {
  std::vector<AvSample> out;
  out.reserve(s.size());
  for (const auto& x : s) out.push_back(to_av_sample(x));
  return out;
}

/// `params` reordered (and checked) to match the layout of `expected`.
inline ParamSet<float> arrange_like(const ParamSet<float>& params, const ParamSet<float>& expected, const std::string& what) {
  require_layout(params, expected, what);
  ParamSet<float> out;
  for (const auto& n : expected.names()) out.add(n, params.at(n));
  return out;
}

inline std::map<std::string, std::string> arch_meta(const RunConfig& cfg, bool with_fusion) {
  std::map<std::string, std::string> m;
  for (const auto& [k, v] : cfg.stub.arch_keys()) m["arch." + k] = v;
  if (with_fusion)
    for (const auto& [k, v] : cfg.fusion.arch_keys()) m["arch.fusion_" + k] = v;
  return m;
}

/// Rejects a checkpoint whose recorded architecture differs from `cfg`.
inline void check_arch(const Checkpoint& ck, const RunConfig& cfg, bool with_fusion, const std::string& what) {
  for (const auto& [k, v] : arch_meta(cfg, with_fusion)) {
    const auto it = ck.meta.find(k);
    if (it == ck.meta.end()) throw CheckpointError(what + ": no architecture record '" + k + "'");
    if (it->second != v)
      throw CheckpointError(what + ": architecture mismatch on " + k.substr(5) + " (checkpoint " + it->second +
                            ", config " + v + ")");
  }
}

// ---------------------------------------------------------------------------
// Surrogate

struct StubRun {
  ParamSet<float> params;
  StubTrainResult result;
};

inline std::uint64_t stub_init_seed(const RunConfig& cfg) { return derive_seed(cfg.seed, {0x5106}); }
inline std::uint64_t fusion_init_seed(const RunConfig& cfg) { return derive_seed(cfg.seed, {0xF0510}); }

inline StubRun train_stub(const RunConfig& cfg, std::size_t threads = 1, std::ostream* log = nullptr) {
  const auto train = synth_split(cfg, Split::Train, threads);
  const auto val = synth_split(cfg, Split::Val, threads);
  StubRun r{init_stub_params<float>(cfg.stub, stub_init_seed(cfg)), {}};
  r.result = pretrain_stub(r.params, cfg.stub, train, val, cfg.pipeline.mel, cfg.stub_train,
                           derive_seed(cfg.seed, {0x5107}), threads, log);
  return r;
}

inline Checkpoint stub_checkpoint(const RunConfig& cfg, const ParamSet<float>& stub, double val_accuracy) {
  Checkpoint ck;
  append_prefixed(ck.tensors, stub, "stub/");
  ck.meta = arch_meta(cfg, false);
  ck.meta["kind"] = "stub";
  ck.meta["config_hash"] = config_hash(cfg);
  ck.meta["val_frame_accuracy"] = fmt_g(val_accuracy);
  return ck;
}

inline ParamSet<float> stub_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg, const std::string& what) {
  check_arch(ck, cfg, false, what);
  return arrange_like(select_prefix(ck.tensors, "stub/"), init_stub_params<float>(cfg.stub, 0), what);
}

// ---------------------------------------------------------------------------
// Fusion

struct FusionRun {
  ParamSet<float> fusion;
  ParamSet<float> stub;
  std::vector<std::pair<Stage, StageResult>> stages;
};

struct FusionTrainOptions {
  std::size_t threads = 1;
  std::ostream* log = nullptr;
  const ParamSet<float>* fusion_init = nullptr;  // null: fresh weights
  const ParamSet<float>* stub_init = nullptr;    // null: copy of the generator
  /// Called whenever a stage reaches a new best validation loss, with the
  /// run holding that epoch's parameters.
  std::function<void(const FusionRun&)> on_best;
};

/// Runs `stages` in order. Targets always come from `generator`, the
/// pre-trained surrogate before any fine-tuning.
inline FusionRun train_fusion(const RunConfig& cfg, const ParamSet<float>& generator, const std::vector<Stage>& stages,
                              const FusionTrainOptions& fo = {}) {
  const auto train = to_av_samples(synth_split(cfg, Split::Train, fo.threads));
  const auto val = to_av_samples(synth_split(cfg, Split::Val, fo.threads));
  FusionRun r{fo.fusion_init ? fo.fusion_init->deep_copy() : init_fusion_params<float>(cfg.fusion, fusion_init_seed(cfg)),
              fo.stub_init ? fo.stub_init->deep_copy() : generator.deep_copy(),
              {}};
  const TrainData data{&train, &val};
  const TargetCache<float> targets = build_targets(data, generator, cfg.stub, cfg.pipeline, fo.threads);
  const Models<float> models{cfg.fusion, cfg.stub, &r.fusion, &r.stub};
  std::size_t steps = 0;
  for (Stage s : stages) {
    StageRunOptions opt;
    opt.seed = cfg.seed;
    opt.threads = fo.threads;
    opt.weights = cfg.loss;
    opt.adam = cfg.adam;
    opt.pipeline = cfg.pipeline;
    opt.log = fo.log;
    opt.step_offset = steps;
    if (fo.on_best)
      opt.on_best = [&, s](std::size_t epoch, double val_total) {
        FusionRun snapshot{r.fusion.deep_copy(), r.stub.deep_copy(), r.stages};
        StageResult partial;
        partial.epochs = epoch + 1;
        partial.best_val = val_total;
        snapshot.stages.emplace_back(s, partial);
        fo.on_best(snapshot);
      };
    const StageResult res = run_stage(models, cfg.stage(s), data, targets, opt);
    steps += res.steps;
    r.stages.emplace_back(s, res);
  }
  return r;
}

inline Checkpoint fusion_checkpoint(const RunConfig& cfg, const FusionRun& run) {
  Checkpoint ck;
  append_prefixed(ck.tensors, run.fusion, "fusion/");
  append_prefixed(ck.tensors, run.stub, "stub/");
  ck.meta = arch_meta(cfg, true);
  ck.meta["kind"] = "fusion";
  ck.meta["config_hash"] = config_hash(cfg);
  std::string done;
  for (const auto& [s, res] : run.stages) {
    done += (done.empty() ? "" : ",") + to_string(s);
    ck.meta["stage." + to_string(s) + ".best_val"] = fmt_g(res.best_val);
    ck.meta["stage." + to_string(s) + ".epochs"] = std::to_string(res.epochs);
  }
  ck.meta["stages"] = done;
  return ck;
}

struct FusionModel {
  ParamSet<float> fusion;
  ParamSet<float> stub;
};

inline FusionModel fusion_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg, const std::string& what) {
  const auto kind = ck.meta.find("kind");
  if (kind == ck.meta.end() || kind->second != "fusion") throw CheckpointError(what + ": not a fusion checkpoint");
  check_arch(ck, cfg, true, what);
  return {arrange_like(select_prefix(ck.tensors, "fusion/"), init_fusion_params<float>(cfg.fusion, 0), what),
          arrange_like(select_prefix(ck.tensors, "stub/"), init_stub_params<float>(cfg.stub, 0), what)};
}

// ---------------------------------------------------------------------------
// Evaluation

/// Surrogate alone and fusion + surrogate on the same grid and data.
inline std::vector<EvalReport> evaluate_pair(const RunConfig& cfg, const ParamSet<float>& stub_only,
                                             const FusionModel& fused, const std::vector<AvSample>& data,
                                             std::size_t threads = 1) {
  const AsrSystem<float> base{"stub", &stub_only, cfg.stub, nullptr, cfg.fusion};
  const AsrSystem<float> av{"fusion", &fused.stub, cfg.stub, &fused.fusion, cfg.fusion};
  return {evaluate_grid(base, cfg.eval, data, cfg.pipeline, threads),
          evaluate_grid(av, cfg.eval, data, cfg.pipeline, threads)};
}

}  // namespace avf
