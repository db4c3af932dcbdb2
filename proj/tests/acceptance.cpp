// Acceptance run: checks the ten behavioral criteria end to end and prints
// one PASS/FAIL line per criterion. Exit status is non-zero if any fails.
//
//   acceptance --work DIR [--config desk.conf] [--only 1,2,...]
//
// Criteria 3, 6, 8 and 10 share one training pipeline (surrogate, then
// fusion pretrain + main at desk scale), which is run twice for 10.

#include <array>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "avfusion/avfusion.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace avf;
using oracle::Td;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fixed(double v, int digits = 4) { return fmt_f(v, digits); }

template <class T>
bool bitwise_same(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

// ---------------------------------------------------------------------------
// 1. autodiff

Outcome autodiff_soundness() {
  const auto t0 = Clock::now();
  double worst_prim = 0;
  std::string worst_label;
  std::size_t min_instances = ~std::size_t{0}, ops = 0;
  for (Op kind : oracle::differentiable_ops()) {
    Rng rng(derive_seed(99, {static_cast<std::uint64_t>(kind)}));
    std::size_t n = 0;
    for (int inst = 0; inst < 20; ++inst) {
      const auto cases = oracle::primitive_cases(kind, rng);
      if (!cases.empty()) ++n;
      for (const auto& c : cases) {
        const double e = grad_check(c.f, c.x);
        if (e > worst_prim) worst_prim = e, worst_label = c.label;
      }
    }
    min_instances = std::min(min_instances, n);
    ++ops;
  }

  // End to end: fusion (d = 24, two layers) feeding a frozen surrogate, with
  // all three losses against surrogate targets.
  FusionConfig fc;
  fc.width = 24;
  fc.heads = 4;
  fc.layers = 2;
  fc.ffn_mult = 2;
  fc.audio_channels = {4, 4, 8};
  fc.visual_channels = {4, 8, 8, 8};
  fc.visual_strides = {2, 2, 2, 1};
  StubConfig sc;
  sc.width = 16;
  sc.heads = 2;
  sc.encoder_layers = 1;
  sc.decoder_layers = 1;
  sc.vocab = 8;
  auto fusion = init_fusion_params<double>(fc, 1);
  const auto stub = init_stub_params<double>(sc, 2);
  Rng rng(3);
  for (double& w : fusion.at("out.w").mutable_data()) w = rng.uniform(-0.3, 0.3);
  const Td mel = oracle::random_tensor(rng, {80, 12}, 0, 2);
  const Td video = oracle::random_tensor(rng, {1, 1, 3, 88, 88}, 0, 1);
  const Td clean = oracle::random_tensor(rng, {80, 12}, 0, 2);
  const Bound<double> sp(stub, nullptr);
  const Td enc_t = stub_encode(sp, sc, clean);
  const Td dec_t = stub_decode_logits(sp, sc, enc_t);
  const LossWeights w;
  const LossSet all{true, true, true};
  auto loss = [&](const Bound<double>& fp) {
    const Td fused = fusion_forward(fp, fc, mel, video);
    LossTensors<double> parts;
    parts.mel = l1_loss(clean, fused);
    const Td enc = stub_encode(sp, sc, fused);
    parts.enc = l1_loss(enc_t, enc);
    parts.dec = cross_entropy_argmax(dec_t, stub_decode_logits(sp, sc, enc));
    return total_loss(parts, w, all);
  };
  std::string worst_param;
  const double e2e = oracle::sampled_param_check(fusion, loss, 3, rng, 1e-6, &worst_param);
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = worst_prim <= 1e-4 && min_instances >= 20 && e2e <= 1e-3 && t < 300;
  o.detail = std::to_string(ops) + " primitives x " + std::to_string(min_instances) + " instances, worst " +
             fmt_g(worst_prim, 3) + " (" + worst_label + "); end-to-end worst " + fmt_g(e2e, 3) + " (" + worst_param +
             "); " + fixed(t, 1) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 2. shapes

Outcome shape_contract(const RunConfig& cfg) {
  const auto t0 = Clock::now();
  auto ps = init_fusion_params<float>(cfg.fusion, 5);
  Rng rng(6);
  for (float& v : ps.at("out.w").mutable_data()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
  const Bound<float> p(ps, nullptr);
  bool ok = true;
  std::string detail;
  for (double s : {0.5, 1.0, 2.0, 4.0, 10.0}) {
    WaveBuffer wave;
    wave.samples.resize(static_cast<std::size_t>(s * kSampleRate));
    for (double& v : wave.samples) v = 0.1 * rng.normal();
    const Tensor<float> mel = mel_tensor<float>(compute_logmel(wave, cfg.pipeline.mel));
    const auto frames = static_cast<std::size_t>(s * cfg.pipeline.synth.fps);
    std::vector<float> px(frames * kCropSize * kCropSize);
    for (float& v : px) v = static_cast<float>(rng.uniform());
    const Tensor<float> video({1, 1, frames, kCropSize, kCropSize}, std::move(px));
    const std::size_t vis = extract_visual_features(p, cfg.fusion, video).dim(1);
    const Tensor<float> out = fusion_forward(p, cfg.fusion, mel, video);
    const bool good = out.shape() == mel.shape() && vis == 4 * frames;
    ok = ok && good;
    detail += fmt_g(s) + "s: out " + shape_str(out.shape()) + " mel " + shape_str(mel.shape()) + " vis " +
              std::to_string(vis) + "/" + std::to_string(4 * frames) + (good ? "" : " MISMATCH") + "; ";
  }
  const double t = seconds_since(t0);
  return {ok && t < 60, detail + fixed(t, 1) + " s"};
}

// ---------------------------------------------------------------------------
// 4. SNR fidelity

Outcome snr_fidelity(const RunConfig& cfg) {
  std::vector<WaveBuffer> clean;
  for (std::uint64_t s = 0; s < 100; ++s) clean.push_back(generate_sample(700000 + s, cfg.pipeline.synth).wave);
  double worst = 0;
  bool invariant = true;
  Rng rng(7);
  std::size_t pairs = 0;
  for (double snr : {-20.0, -10.0, 0.0, 10.0, 50.0}) {
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const NoiseCategory cat = kNoiseCategories[i % kNoiseCategories.size()];
      const WaveBuffer noise = generate_noise(rng.next(), cat, rng.uniform(1.0, 4.0), cfg.pipeline.synth);
      const MixResult m = mix_components(clean[i], noise, snr, rng, cfg.pipeline.pause);
      worst = std::max(worst, std::abs(measured_snr_db(m.clean_part, m.noise_part, cfg.pipeline.pause) - snr));
      ++pairs;
    }
  }
  for (const auto& w : clean) {
    std::vector<double> padded = w.samples;
    padded.resize(padded.size() + 16000, 0.0);
    std::vector<double> front(8000, 0.0);
    front.insert(front.end(), padded.begin(), padded.end());
    const double p = active_power(w.samples, cfg.pipeline.pause);
    invariant = invariant && active_power(padded, cfg.pipeline.pause) == p && active_power(front, cfg.pipeline.pause) == p;
  }
  return {worst <= 0.05 && invariant,
          std::to_string(pairs) + " mixes, worst |measured - target| " + fmt_g(worst, 3) +
              " dB; silence invariance " + (invariant ? "exact" : "BROKEN")};
}

// ---------------------------------------------------------------------------
// 5. losses

Outcome loss_correctness() {
  Rng rng(8);
  double worst_l1 = 0, worst_ce = 0, worst_uniform = 0;
  for (int i = 0; i < 200; ++i) {
    const Shape s{oracle::rand_size(rng, 1, 40), oracle::rand_size(rng, 2, 60)};
    const Td a = oracle::random_tensor(rng, s, -5, 5), b = oracle::random_tensor(rng, s, -5, 5);
    worst_l1 = std::max(worst_l1, std::abs(l1_loss(a, b).item() - oracle::naive_l1(a, b)));
    worst_ce = std::max(worst_ce, std::abs(cross_entropy_argmax(a, b).item() - oracle::naive_ce(a, b)));
    const Td uniform(s, rng.uniform(-3, 3));
    worst_uniform = std::max(worst_uniform, std::abs(cross_entropy_argmax(a, uniform).item() - std::log(static_cast<double>(s[1]))));
  }
  const LossWeights w{1, 2, 2};
  LossParts parts;
  parts.mel = 1.0;
  parts.enc = 0.5;
  parts.dec = 0.25;
  const double main_total = total_loss(parts, w, StageConfig::defaults(Stage::Main).active);
  const LossSet pre = StageConfig::defaults(Stage::Pretrain).active;
  const double pre_total = total_loss(parts, w, pre);
  LossParts no_dec = parts;
  no_dec.dec.reset();
  const bool pre_ok = !pre.dec && pre.mel && pre.enc && pre_total == 2.0 && total_loss(no_dec, w, pre) == 2.0 &&
                      total_loss(parts, LossWeights{1, 2, 100}, pre) == 2.0;
  const bool ok = worst_l1 <= 1e-9 && worst_ce <= 1e-9 && worst_uniform <= 1e-12 && main_total == 2.5 && pre_ok;
  return {ok, "l1 " + fmt_g(worst_l1, 3) + ", ce " + fmt_g(worst_ce, 3) + ", uniform ce vs ln C " +
                  fmt_g(worst_uniform, 3) + ", total(1,0.5,0.25) = " + fmt_g(main_total) +
                  ", pretrain total = " + fmt_g(pre_total) + (pre.dec ? " (includes L_dec)" : " (L_dec excluded)")};
}

// ---------------------------------------------------------------------------
// 7. augmentation statistics

Outcome augmentation_statistics(const RunConfig& cfg) {
  const std::size_t n = 10000;
  const MaskConfig& mc = cfg.pipeline.mask;
  const SynthConfig& sy = cfg.pipeline.synth;
  Rng rng(9);
  std::size_t regions = 0, rects = 0, bad_rects = 0, bad_runs = 0;
  const double max_px = mc.max_area * kCropSize * kCropSize + 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double dur = rng.uniform(sy.min_duration_s, sy.max_duration_s);
    const auto count = static_cast<std::size_t>(dur * sy.fps);
    const MaskPlan p = draw_mask_plan(count, kCropSize, kCropSize, sy.fps, rng, mc);
    regions += p.region;
    for (const auto& r : p.rects) {
      ++rects;
      const auto dims = rect_dims(r.area_fraction, r.ratio, kCropSize, kCropSize);
      const bool good = static_cast<double>(r.height * r.width) <= max_px && r.ratio >= mc.min_ratio &&
                        r.ratio <= mc.max_ratio && r.area_fraction <= mc.max_area && dims.first == r.height &&
                        dims.second == r.width;
      bad_rects += !good;
    }
    std::vector<bool> masked(count, false);
    for (const auto& run : p.runs)
      for (std::size_t t = run.begin; t < run.begin + run.length && t < count; ++t) masked[t] = true;
    const auto per_second = static_cast<std::size_t>(sy.fps);
    for (std::size_t s0 = 0; s0 < count; s0 += per_second) {
      std::size_t k = 0;
      for (std::size_t t = s0; t < std::min(count, s0 + per_second); ++t) k += masked[t];
      bad_runs += k > 10;
    }
  }
  std::vector<double> snrs(n);
  Rng mix_rng(10);
  for (double& s : snrs) s = draw_mix(mix_rng, -20, 50).snr_db;
  const double ks = oracle::ks_uniform(snrs, -20, 50), crit = oracle::ks_critical_1pct(n);
  const double rate = static_cast<double>(regions) / static_cast<double>(n);
  const bool ok = std::abs(rate - 0.5) <= 0.015 && bad_rects == 0 && bad_runs == 0 && rects > 0 && ks < crit;
  return {ok, "region rate " + fixed(rate, 4) + ", " + std::to_string(rects) + " rectangles (" +
                  std::to_string(bad_rects) + " out of bounds), seconds over 10 masked frames: " +
                  std::to_string(bad_runs) + ", SNR KS " + fixed(ks, 4) + " < " + fixed(crit, 4)};
}

// ---------------------------------------------------------------------------
// 9. WER metric (the music+natural part uses the pipeline reports)

Outcome wer_metric(const std::vector<EvalReport>& reports) {
  std::vector<std::vector<char>> words{{}};
  for (std::size_t len = 1; len <= 4; ++len)
    for (std::size_t i = 0, n = words.size(); i < n; ++i)
      if (words[i].size() == len - 1)
        for (char c : {'a', 'b', 'c'}) {
          auto w = words[i];
          w.push_back(c);
          words.push_back(w);
        }
  std::size_t mismatches = 0, pairs = 0;
  for (const auto& r : words)
    for (const auto& h : words) {
      const std::size_t d = edit_distance(r, h);
      mismatches += d != oracle::brute_force_edits(r, h) || d != oracle::levenshtein(r, h);
      ++pairs;
    }
  using V = std::vector<std::string>;
  const double big = wer(V{"u1"}, V{"u2", "u3", "u4"});
  EvalReport synthetic;
  synthetic.model = "x";
  synthetic.cells.push_back({kCleanCategory, std::nullopt, 3, 1, 100.0 * big});
  const bool big_ok = big == 3.0 && report_csv({synthetic}).find("x,clean,clean,300.0000,1") != std::string::npos;
  double worst_mean = 0;
  std::size_t mean_cells = 0;
  for (const auto& rep : reports)
    for (const auto& c : rep.cells)
      if (c.category == kMusicNatural) {
        const double want = (rep.cell("music", c.snr_db).wer_percent + rep.cell("natural", c.snr_db).wer_percent) / 2;
        worst_mean = std::max(worst_mean, std::abs(c.wer_percent - want));
        ++mean_cells;
      }
  const bool ok = mismatches == 0 && pairs == 121 * 121 && big_ok && mean_cells > 0 && worst_mean <= 1e-12;
  return {ok, std::to_string(pairs) + " pairs, " + std::to_string(mismatches) + " disagreements; 1 ref vs 3 hyp words = " +
                  fixed(100 * big, 1) + "%; music+natural worst deviation " + fmt_g(worst_mean, 3) + " over " +
                  std::to_string(mean_cells) + " cells"};
}

// ---------------------------------------------------------------------------
// Training pipeline shared by 3, 6, 8 and 10

struct PipelineRun {
  fs::path dir;
  double stub_accuracy = 0;
  std::size_t identity_samples = 0;
  bool identity_logits = false;
  double untrained_clean = 0, stub_clean = 0;
  double train_seconds = 0;
  bool stub_frozen = false;
  std::vector<EvalReport> reports;
  FusionRun run;
  ParamSet<float> generator;
};

PipelineRun run_pipeline(const RunConfig& cfg, const fs::path& dir, std::size_t threads) {
  fs::create_directories(dir);
  PipelineRun out;
  out.dir = dir;
  std::ofstream stub_log(dir / "stub.log");
  stub_log << "config_hash=" << config_hash(cfg) << '\n';
  const StubRun stub = train_stub(cfg, threads, &stub_log);
  out.stub_accuracy = stub.result.val_accuracy;
  out.generator = stub.params.deep_copy();
  save_checkpoint(dir / "stub.ckpt", stub_checkpoint(cfg, stub.params, stub.result.val_accuracy));
  std::cerr << "  surrogate: frame accuracy " << fixed(out.stub_accuracy) << '\n';

  const auto eval = to_av_samples(synth_split(cfg, Split::Eval, threads));

  // identity at init
  FusionModel fresh{init_fusion_params<float>(cfg.fusion, fusion_init_seed(cfg)), stub.params.deep_copy()};
  out.identity_logits = true;
  const Bound<float> sp(stub.params, nullptr), fp(fresh.fusion, nullptr);
  for (std::size_t i = 0; i < std::min<std::size_t>(20, eval.size()); ++i) {
    const ModelInput<float> in = clean_input<float>(eval[i], cfg.pipeline);
    const auto raw = stub_decode_logits(sp, cfg.stub, stub_encode(sp, cfg.stub, in.mel));
    const auto fused = stub_decode_logits(sp, cfg.stub, stub_encode(sp, cfg.stub, fusion_forward(fp, cfg.fusion, in.mel, in.video)));
    out.identity_logits = out.identity_logits && bitwise_same(raw, fused);
    ++out.identity_samples;
  }
  const auto untrained = evaluate_pair(cfg, stub.params, fresh, eval, threads);
  write_file(dir / "wer_untrained.csv", report_csv(untrained));
  out.stub_clean = untrained[0].cell(kCleanCategory, std::nullopt).wer_percent;
  out.untrained_clean = untrained[1].cell(kCleanCategory, std::nullopt).wer_percent;
  std::cerr << "  untrained: clean WER stub " << fixed(out.stub_clean) << ", fusion " << fixed(out.untrained_clean) << '\n';

  std::ofstream train_log(dir / "train.log");
  train_log << "config_hash=" << config_hash(cfg) << '\n';
  FusionTrainOptions fo;
  fo.threads = threads;
  fo.log = &train_log;
  const auto t0 = Clock::now();
  out.run = train_fusion(cfg, stub.params, {Stage::Pretrain, Stage::Main}, fo);
  out.train_seconds = seconds_since(t0);
  train_log.close();
  out.stub_frozen = out.run.stub.bitwise_equal(stub.params);
  save_checkpoint(dir / "fusion.ckpt", fusion_checkpoint(cfg, out.run));
  std::cerr << "  fusion pretrain+main: " << fixed(out.train_seconds, 1) << " s\n";

  out.reports = evaluate_pair(cfg, stub.params, FusionModel{out.run.fusion.deep_copy(), out.run.stub.deep_copy()}, eval, threads);
  write_file(dir / "wer.csv", report_csv(out.reports));
  write_file(dir / "wer_table.txt", render_table(out.reports));
  std::cerr << render_table(out.reports);
  return out;
}

Outcome identity_at_init(const PipelineRun& r) {
  return {r.identity_logits && r.untrained_clean == r.stub_clean,
          "logits bitwise equal on " + std::to_string(r.identity_samples) + " clean samples: " +
              (r.identity_logits ? "yes" : "NO") + "; clean WER stub " + fixed(r.stub_clean) + "% vs untrained fusion " +
              fixed(r.untrained_clean) + "%"};
}

Outcome frozen_and_finetune(const RunConfig& cfg, const PipelineRun& r, std::size_t threads) {
  // a short finetune from the trained state
  RunConfig ft = cfg;
  ft.data.train_samples = 16;
  ft.data.val_samples = 4;
  ft.finetune.max_epochs = 1;
  FusionTrainOptions fo;
  fo.threads = threads;
  fo.fusion_init = &r.run.fusion;
  fo.stub_init = &r.run.stub;
  const FusionRun tuned = train_fusion(ft, r.generator, {Stage::Finetune}, fo);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < tuned.stub.size(); ++i)
    changed += !bitwise_same(tuned.stub.value(i), r.generator.value(i));
  const StageConfig def = StageConfig::defaults(Stage::Finetune);
  PlateauSchedule sched(def.lr0, def.decay, def.plateau_threshold);
  sched.end_epoch(1.0);
  const double before = sched.lr();
  sched.end_epoch(1.0);  // no improvement: decay starts
  const double after1 = sched.lr();
  sched.end_epoch(0.5);  // still improving: keep decaying
  const double after2 = sched.lr();
  const bool decay_ok = after1 == before / 1.58 && after2 == after1 / 1.58 && cfg.finetune.decay == 1.58 &&
                        cfg.main.decay == 1.58 && cfg.pretrain.decay == 1.58;
  const bool ok = r.stub_frozen && changed > 0 && def.lr0 == 1e-5 && cfg.finetune.lr0 == 1e-5 && decay_ok;
  return {ok, std::string("stub after pretrain+main ") + (r.stub_frozen ? "bitwise unchanged" : "CHANGED") +
                  "; after finetune " + std::to_string(changed) + "/" + std::to_string(tuned.stub.size()) +
                  " tensors changed; finetune lr0 " + fmt_g(cfg.finetune.lr0) + "; lr " + fmt_g(before) + " -> " +
                  fmt_g(after1) + " -> " + fmt_g(after2)};
}

Outcome learning_signal(const PipelineRun& r) {
  const EvalReport& stub = r.reports[0];
  const EvalReport& fused = r.reports[1];
  std::size_t wins = 0;
  std::string cats;
  for (NoiseCategory c : kNoiseCategories) {
    const double a = stub.cell(to_string(c), 0.0).wer_percent, b = fused.cell(to_string(c), 0.0).wer_percent;
    wins += b < a;
    cats += to_string(c) + " " + fixed(a, 1) + "->" + fixed(b, 1) + ", ";
  }
  const double sc = stub.cell(kCleanCategory, std::nullopt).wer_percent;
  const double fc = fused.cell(kCleanCategory, std::nullopt).wer_percent;
  const bool clean_ok = fc <= 1.1 * sc;
  const bool ok = r.stub_accuracy >= 0.9 && r.train_seconds <= 1800 && wins >= 3 && clean_ok;
  return {ok, "surrogate accuracy " + fixed(r.stub_accuracy) + "; training " + fixed(r.train_seconds, 0) + " s; 0 dB " +
                  cats + std::to_string(wins) + "/4 improved; clean " + fixed(sc, 1) + "->" + fixed(fc, 1) + " (" +
                  fixed(sc > 0 ? 100 * (fc - sc) / sc : 0.0, 1) + "% relative)"};
}

Outcome reproducibility(const PipelineRun& a, const PipelineRun& b) {
  std::size_t same = 0, files = 0;
  std::string diff;
  for (const auto& entry : fs::directory_iterator(a.dir)) {
    const fs::path other = b.dir / entry.path().filename();
    ++files;
    if (fs::exists(other) && read_file(entry.path()) == read_file(other))
      ++same;
    else
      diff += entry.path().filename().string() + " ";
  }
  return {files >= 7 && same == files,
          std::to_string(same) + "/" + std::to_string(files) + " artifacts identical (checkpoints, logs, CSVs)" +
              (diff.empty() ? "" : "; differing: " + diff)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work", config_path = AVF_DESK_CONFIG, only;
  std::size_t threads = 1;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--config", config_path, "desk-scale configuration");
  app.add_option("--threads", threads, "worker threads");
  app.add_option("--only", only, "comma-separated criteria to run (default all)");
  CLI11_PARSE(app, argc, argv);
  tune_allocator();

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  } else {
    for (int i = 1; i <= 10; ++i) selected.insert(i);
  }
  const auto want = [&](std::initializer_list<int> ids) {
    for (int i : ids)
      if (selected.count(i)) return true;
    return false;
  };

  const RunConfig cfg = load_config(config_path);
  fs::remove_all(work);
  fs::create_directories(work);
  std::cerr << "config " << config_path << " (hash " << config_hash(cfg) << ")\n";

  std::map<int, std::pair<std::string, Outcome>> results;
  auto record = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    std::cerr << "criterion " << id << " (" << name << ") ...\n";
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    results[id] = {name, o};
    std::cerr << "  " << (o.pass ? "PASS" : "FAIL") << ": " << o.detail << '\n';
  };

  if (want({1})) record(1, "autodiff soundness", autodiff_soundness);
  if (want({2})) record(2, "shape contract", [&] { return shape_contract(cfg); });
  if (want({4})) record(4, "SNR fidelity", [&] { return snr_fidelity(cfg); });
  if (want({5})) record(5, "loss correctness", loss_correctness);
  if (want({7})) record(7, "augmentation statistics", [&] { return augmentation_statistics(cfg); });

  std::optional<PipelineRun> first;
  if (want({3, 6, 8, 9, 10})) {
    std::cerr << "pipeline run 1\n";
    try {
      first = run_pipeline(cfg, fs::path(work) / "run1", threads);
    } catch (const std::exception& e) {
      std::cerr << "pipeline failed: " << e.what() << '\n';
    }
  }
  const auto needs_run = [&](const std::function<Outcome()>& fn) {
    return [&, fn] { return first ? fn() : Outcome{false, "pipeline did not complete"}; };
  };
  if (want({3})) record(3, "identity at init", needs_run([&] { return identity_at_init(*first); }));
  if (want({6})) record(6, "frozen/finetune discipline", needs_run([&] { return frozen_and_finetune(cfg, *first, threads); }));
  if (want({8})) record(8, "learning signal", needs_run([&] { return learning_signal(*first); }));
  if (want({9})) record(9, "WER metric", needs_run([&] { return wer_metric(first->reports); }));
  if (want({10})) {
    record(10, "reproducibility", needs_run([&] {
             std::cerr << "pipeline run 2\n";
             const PipelineRun second = run_pipeline(cfg, fs::path(work) / "run2", threads);
             return reproducibility(*first, second);
           }));
  }

  bool all = true;
  std::cout << '\n';
  for (const auto& [id, r] : results) {
    std::cout << "criterion " << id << " [" << r.first << "]: " << (r.second.pass ? "PASS" : "FAIL") << " - "
              << r.second.detail << '\n';
    all = all && r.second.pass;
  }
  std::cout << (all ? "all criteria passed" : "some criteria FAILED") << std::endl;
  return all ? 0 : 1;
}
