// avfuse: data generation, training stages, evaluation and inspection.
//
//   avfuse [--config F] [--set k=v]... [--seed N] [--threads N] [--out DIR] [--run-id ID] <command>
//
// Artifacts go to <out>/{checkpoints,logs,reports}/<run-id>/. The output
// root defaults to $AVFUSE_OUT, then ./out; the run id defaults to a UTC
// timestamp.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "avfusion/avfusion.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using namespace avf;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string out;
  std::string run_id;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), "--set: ");
  }
  if (g.seed) cfg.seed = *g.seed;
  cfg.finalize();
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

struct RunDirs {
  fs::path checkpoints, logs, reports;
};

RunDirs run_dirs(const Globals& g) {
  fs::path root = g.out;
  if (root.empty()) {
    const char* env = std::getenv("AVFUSE_OUT");
    root = env && *env ? fs::path(env) : fs::path("out");
  }
  const std::string id = g.run_id.empty() ? utc_stamp() : g.run_id;
  RunDirs d{root / "checkpoints" / id, root / "logs" / id, root / "reports" / id};
  return d;
}

void require_file(const std::string& path, const std::string& what, const std::string& hint) {
  if (path.empty()) throw UsageError("missing " + what + ": " + hint);
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path + " (" + hint + ")");
}

std::ofstream open_log(const fs::path& dir, const std::string& name, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream log(dir / name);
  if (!log) throw std::runtime_error("cannot write " + (dir / name).string());
  log << "config_hash=" << config_hash(cfg) << '\n';
  return log;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "eval") return Split::Eval;
  throw UsageError("unknown split '" + s + "' (train, val, eval)");
}

// --- commands --------------------------------------------------------------

int cmd_config_dump(const Globals& g, bool docs) {
  const RunConfig cfg = resolve_config(g);
  std::cout << dump_config(cfg, docs) << "# config_hash " << config_hash(cfg) << '\n';
  return 0;
}

int cmd_synth_export(const Globals& g, const std::string& split, const std::string& dir, std::size_t count) {
  const RunConfig cfg = resolve_config(g);
  auto samples = synth_split(cfg, parse_split(split), g.threads);
  if (count && count < samples.size()) samples.resize(count);
  std::vector<ManifestRow> rows;
  for (const auto& s : samples) rows.push_back(export_sample(s, dir));
  write_manifest(fs::path(dir) / "manifest.tsv", rows);
  std::cout << "wrote " << rows.size() << " samples and " << (fs::path(dir) / "manifest.tsv").string() << '\n';
  return 0;
}

int cmd_stub_pretrain(const Globals& g) {
  const RunConfig cfg = resolve_config(g);
  const RunDirs d = run_dirs(g);
  std::ofstream log = open_log(d.logs, "stub.log", cfg);
  const StubRun run = train_stub(cfg, g.threads, &log);
  const fs::path ck = d.checkpoints / "stub.ckpt";
  save_checkpoint(ck, stub_checkpoint(cfg, run.params, run.result.val_accuracy));
  std::cout << "stub: " << run.params.parameter_count() << " parameters, validation frame accuracy "
            << fmt_f(100.0 * run.result.val_accuracy, 2) << "% after " << run.result.epochs << " epochs\n"
            << "checkpoint: " << ck.string() << '\n';
  if (run.result.val_accuracy < cfg.stub_train.target_accuracy)
    std::cerr << "warning: accuracy below stub_train.target_accuracy (" << fmt_g(cfg.stub_train.target_accuracy)
              << ")\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& stage_arg, const std::string& stub_path, const std::string& init_path) {
  const RunConfig cfg = resolve_config(g);
  std::vector<Stage> stages;
  if (stage_arg == "all") stages = {Stage::Pretrain, Stage::Main};
  else stages = {parse_stage(stage_arg)};
  require_file(stub_path, "stub checkpoint", "train the surrogate first with `avfuse stub pretrain`, then pass --stub");
  const ParamSet<float> stub = stub_from_checkpoint(load_checkpoint(stub_path), cfg, stub_path);

  std::optional<FusionModel> init;
  if (!init_path.empty()) {
    require_file(init_path, "fusion checkpoint", "pass a checkpoint written by `avfuse train` or `avfuse init`");
    init = fusion_from_checkpoint(load_checkpoint(init_path), cfg, init_path);
  } else if (stages.front() != Stage::Pretrain) {
    throw UsageError("stage " + stage_arg + " continues from an earlier stage: pass --init <fusion checkpoint>");
  }
  // A continued run keeps the surrogate stored next to the fusion weights;
  // targets still come from the pre-trained surrogate given by --stub.
  const RunDirs d = run_dirs(g);
  std::ofstream log = open_log(d.logs, "train.log", cfg);
  const fs::path ck = d.checkpoints / "fusion.ckpt";
  FusionTrainOptions fo;
  fo.threads = g.threads;
  fo.log = &log;
  if (init) {
    fo.fusion_init = &init->fusion;
    fo.stub_init = &init->stub;
  }
  fo.on_best = [&](const FusionRun& snapshot) { save_checkpoint(ck, fusion_checkpoint(cfg, snapshot)); };
  const FusionRun run = train_fusion(cfg, stub, stages, fo);
  save_checkpoint(ck, fusion_checkpoint(cfg, run));
  for (const auto& [s, res] : run.stages)
    std::cout << to_string(s) << ": " << res.epochs << " epochs, " << res.steps << " steps, best val_total "
              << fmt_g(res.best_val) << ", final lr " << fmt_g(res.final_lr) << '\n';
  std::cout << "checkpoint: " << ck.string() << '\n';
  return 0;
}

int cmd_init(const Globals& g, const std::string& stub_path) {
  const RunConfig cfg = resolve_config(g);
  FusionRun run;
  run.fusion = init_fusion_params<float>(cfg.fusion, fusion_init_seed(cfg));
  if (!stub_path.empty()) {
    require_file(stub_path, "stub checkpoint", "pass a checkpoint written by `avfuse stub pretrain`");
    run.stub = stub_from_checkpoint(load_checkpoint(stub_path), cfg, stub_path);
  } else {
    run.stub = init_stub_params<float>(cfg.stub, stub_init_seed(cfg));
  }
  const RunDirs d = run_dirs(g);
  const fs::path ck = d.checkpoints / "fusion.ckpt";
  save_checkpoint(ck, fusion_checkpoint(cfg, run));
  std::cout << "fusion parameters: " << run.fusion.parameter_count() << "\ncheckpoint: " << ck.string() << '\n';
  return 0;
}

int cmd_eval(const Globals& g, const std::string& fusion_path, const std::string& stub_path, const std::string& grid,
             const std::string& manifest) {
  RunConfig cfg = resolve_config(g);
  if (!grid.empty()) {
    set_config_value(cfg, "eval.snrs", grid, "--grid: ");
    cfg.validate();
  }
  require_file(fusion_path, "fusion checkpoint", "pass --fusion <checkpoint from `avfuse train`>");
  require_file(stub_path, "stub checkpoint", "pass --stub <checkpoint from `avfuse stub pretrain`>");
  const FusionModel fused = fusion_from_checkpoint(load_checkpoint(fusion_path), cfg, fusion_path);
  const ParamSet<float> stub = stub_from_checkpoint(load_checkpoint(stub_path), cfg, stub_path);
  std::vector<AvSample> data = manifest.empty() ? to_av_samples(synth_split(cfg, Split::Eval, g.threads))
                                                : load_manifest_samples(manifest);
  const auto reports = evaluate_pair(cfg, stub, fused, data, g.threads);
  const RunDirs d = run_dirs(g);
  const std::string table = render_table(reports) + "config_hash " + config_hash(cfg) + "\nparameters stub " +
                            std::to_string(reports[0].stub_params) + " fusion " +
                            std::to_string(reports[1].fusion_params) + '\n';
  write_text(d.reports / "wer.csv", report_csv(reports));
  write_text(d.reports / "wer_table.txt", table);
  const DeltaTable dt = compare_reports(reports[0], reports[1]);
  write_text(d.reports / "delta.csv", delta_csv(dt));
  std::cout << table << "reports: " << d.reports.string() << '\n';
  return 0;
}

int cmd_inspect(const std::string& path) {
  require_file(path, "checkpoint", "pass the path of a .ckpt file");
  const Checkpoint ck = load_checkpoint(path);
  std::size_t fusion = 0, stub = 0;
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    const std::string& n = ck.tensors.names()[i];
    const std::size_t c = ck.tensors.value(i).size();
    if (n.rfind("fusion/", 0) == 0) fusion += c;
    else stub += c;
  }
  for (const auto& [k, v] : ck.meta) std::cout << k << " = " << v << '\n';
  std::cout << "tensors " << ck.tensors.size() << '\n';
  if (fusion) std::cout << "fusion parameters " << fusion << '\n';
  std::cout << "stub parameters " << stub << '\n';
  return 0;
}

int cmd_mix(const Globals& g, double snr, const std::string& clean, const std::string& noise, const std::string& out,
            const std::string& parts_dir) {
  const RunConfig cfg = resolve_config(g);
  require_file(clean, "clean wav", "pass --clean");
  require_file(noise, "noise wav", "pass --noise");
  if (out.empty()) throw UsageError("missing output path: pass --output");
  Rng rng(derive_seed(cfg.seed, {0x313}));
  const MixResult r = mix_components(read_wav(clean), read_wav(noise), snr, rng, cfg.pipeline.pause);
  write_wav(out, r.mix);
  if (!parts_dir.empty()) {
    fs::create_directories(parts_dir);
    write_wav(fs::path(parts_dir) / "clean_part.wav", WaveBuffer{r.clean_part});
    write_wav(fs::path(parts_dir) / "noise_part.wav", WaveBuffer{r.noise_part});
  }
  std::cout << "target " << fmt_g(snr) << " dB, measured " << fmt_f(measured_snr_db(r.clean_part, r.noise_part, cfg.pipeline.pause), 4)
            << " dB, noise scale " << fmt_g(r.alpha) << ", gain " << fmt_g(r.gain) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  openblas_set_num_threads(1);

  CLI::App app{"Audio-visual fusion front end: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "config file of `key = value` lines")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "override one config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "root seed (overrides run.seed)");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output root (default $AVFUSE_OUT or ./out)");
  app.add_option("--run-id", g.run_id, "run subdirectory name (default UTC timestamp)");

  auto* config = app.add_subcommand("config", "configuration utilities");
  config->require_subcommand(1);
  bool docs = false;
  auto* dump = config->add_subcommand("dump", "print every key with its effective value");
  dump->add_flag("--docs", docs, "include one comment line per key");

  auto* synth = app.add_subcommand("synth", "synthetic data");
  synth->require_subcommand(1);
  std::string split = "eval", synth_dir;
  std::size_t count = 0;
  auto* exp = synth->add_subcommand("export", "write wav + frame folders + manifest.tsv");
  exp->add_option("--split", split, "train, val or eval");
  exp->add_option("--dir", synth_dir, "destination folder")->required();
  exp->add_option("--count", count, "limit the number of samples (0: whole split)");

  auto* stub = app.add_subcommand("stub", "ASR surrogate");
  stub->require_subcommand(1);
  auto* stub_pre = stub->add_subcommand("pretrain", "train the surrogate on clean synthetic speech");

  std::string stage = "all", stub_path, init_path;
  auto* train = app.add_subcommand("train", "train the fusion module");
  train->add_option("--stage", stage, "pretrain, main, finetune, or all (pretrain then main)");
  train->add_option("--stub", stub_path, "surrogate checkpoint");
  train->add_option("--init", init_path, "fusion checkpoint to continue from");

  auto* init = app.add_subcommand("init", "write an untrained fusion checkpoint");
  init->add_option("--stub", stub_path, "surrogate checkpoint to bundle (default: fresh weights)");

  std::string fusion_path, grid, manifest;
  auto* eval = app.add_subcommand("eval", "WER over the noise/SNR grid, surrogate alone vs fused");
  eval->add_option("--fusion", fusion_path, "fusion checkpoint");
  eval->add_option("--stub", stub_path, "surrogate checkpoint (the stub-only baseline)");
  eval->add_option("--grid", grid, "comma-separated SNRs overriding eval.snrs");
  eval->add_option("--manifest", manifest, "evaluate a manifest instead of the synthetic eval split");

  std::string ck_path;
  auto* inspect = app.add_subcommand("inspect", "inspect artifacts");
  inspect->require_subcommand(1);
  auto* inspect_ck = inspect->add_subcommand("checkpoint", "print metadata and parameter counts");
  inspect_ck->add_option("path", ck_path, "checkpoint file")->required();

  double snr = 0;
  std::string clean, noise, mix_out, parts;
  auto* mix = app.add_subcommand("mix", "mix two wav files at a target active-frame SNR");
  mix->add_option("--snr", snr, "target SNR in dB")->required();
  mix->add_option("--clean", clean, "speech wav");
  mix->add_option("--noise", noise, "noise wav");
  mix->add_option("--output", mix_out, "mixture wav");
  mix->add_option("--parts", parts, "also write the scaled components here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*dump) return cmd_config_dump(g, docs);
    if (*exp) return cmd_synth_export(g, split, synth_dir, count);
    if (*stub_pre) return cmd_stub_pretrain(g);
    if (*train) return cmd_train(g, stage, stub_path, init_path);
    if (*init) return cmd_init(g, stub_path);
    if (*eval) return cmd_eval(g, fusion_path, stub_path, grid, manifest);
    if (*inspect_ck) return cmd_inspect(ck_path);
    if (*mix) return cmd_mix(g, snr, clean, noise, mix_out, parts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
