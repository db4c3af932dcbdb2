#pragma once

// Word error rate, SNR-grid evaluation and report rendering.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfusion/asr_stub.hpp"
#include "avfusion/fusion.hpp"
#include "avfusion/manifest.hpp"
#include "avfusion/trainer.hpp"
#include "avfusion/util.hpp"

namespace avf {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Minimal substitutions + deletions + insertions turning ref into hyp.
template <class W>
std::size_t edit_distance(const std::vector<W>& ref, const std::vector<W>& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

template <class W>
double wer(const std::vector<W>& ref, const std::vector<W>& hyp) {
  if (ref.empty()) throw EvalError("wer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

/// Total errors over total reference words.
template <class W>
double corpus_wer(const std::vector<std::vector<W>>& refs, const std::vector<std::vector<W>>& hyps) {
  if (refs.size() != hyps.size()) throw EvalError("corpus_wer: reference/hypothesis count mismatch");
  std::size_t errors = 0, words = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    errors += edit_distance(refs[i], hyps[i]);
    words += refs[i].size();
  }
  if (words == 0) throw EvalError("corpus_wer: no reference words");
  return static_cast<double>(errors) / static_cast<double>(words);
}

// ---------------------------------------------------------------------------
// Grid evaluation

struct EvalGrid {
  std::vector<double> snrs{-10, -5, 0, 5, 10};
  bool clean = true;
  std::vector<NoiseCategory> categories{kNoiseCategories.begin(), kNoiseCategories.end()};
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (snrs.empty() && !clean) throw EvalError("eval grid has no cells");
    if (!snrs.empty() && categories.empty()) throw EvalError("eval grid has SNRs but no categories");
    if (n_samples == 0) throw EvalError("eval grid needs at least one sample per cell");
  }

  bool operator==(const EvalGrid&) const = default;
};

inline constexpr const char* kCleanCategory = "clean";
inline constexpr const char* kMusicNatural = "music+natural";

struct CellResult {
  std::string category;
  std::optional<double> snr_db;  // empty for the clean column
  std::size_t errors = 0, words = 0;
  double wer_percent = 0;
};

struct EvalReport {
  std::string model;
  EvalGrid grid;
  std::size_t fusion_params = 0, stub_params = 0;
  std::vector<CellResult> cells;  // measured cells, then music+natural aggregates

  const CellResult& cell(const std::string& category, std::optional<double> snr) const {
    for (const auto& c : cells)
      if (c.category == category && c.snr_db == snr) return c;
    throw EvalError("report has no cell " + category + " @ " + (snr ? fmt_g(*snr) : std::string("clean")));
  }
};

/// A frozen recognizer: the surrogate alone, or fusion module + surrogate.
template <class T>
struct AsrSystem {
  std::string tag;
  const ParamSet<T>* stub = nullptr;
  StubConfig stub_cfg;
  const ParamSet<T>* fusion = nullptr;  // null: surrogate only
  FusionConfig fusion_cfg;

  std::vector<int> transcribe(const Tensor<T>& mel, const Tensor<T>& video) const {
    const Bound<T> sp(*stub, nullptr);
    Tensor<T> input = mel;
    if (fusion) input = fusion_forward(Bound<T>(*fusion, nullptr), fusion_cfg, mel, video);
    return greedy_decode(stub_decode_logits(sp, stub_cfg, stub_encode(sp, stub_cfg, input)), stub_cfg.blank());
  }
};

namespace detail {

inline std::vector<std::string> hyp_words(const std::vector<int>& tokens) { return token_words(tokens); }

}  // namespace detail

/// Appends music+natural cells: the arithmetic mean of the two category WERs.
inline void add_music_natural(EvalReport& rep) {
  std::vector<CellResult> extra;
  for (const auto& m : rep.cells) {
    if (m.category != "music") continue;
    for (const auto& nat : rep.cells)
      if (nat.category == "natural" && nat.snr_db == m.snr_db)
        extra.push_back({kMusicNatural, m.snr_db, m.errors + nat.errors, m.words + nat.words,
                         (m.wer_percent + nat.wer_percent) / 2.0});
  }
  rep.cells.insert(rep.cells.end(), extra.begin(), extra.end());
}

/// Noise for (category, sample) is drawn once from grid.seed and shared by
/// every SNR and every model, so cells differ only in the quantity studied.
template <class T>
EvalReport evaluate_grid(const AsrSystem<T>& sys, const EvalGrid& grid, const std::vector<AvSample>& data,
                         const PipelineConfig& pc, std::size_t threads = 1) {
  grid.validate();
  if (data.size() < grid.n_samples)
    throw EvalError("eval grid asks for " + std::to_string(grid.n_samples) + " samples, only " +
                    std::to_string(data.size()) + " available");
  const std::size_t n = grid.n_samples;
  const std::size_t ncat = grid.categories.size(), nsnr = grid.snrs.size();
  // errors[sample][cell]; cell 0 is clean when enabled.
  const std::size_t ncells = (grid.clean ? 1 : 0) + ncat * nsnr;
  std::vector<std::vector<std::size_t>> errors(n, std::vector<std::size_t>(ncells, 0));
  std::vector<std::size_t> words(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const AvSample& s = data[i];
    if (s.words.empty()) throw EvalError("sample " + s.id + " has an empty reference transcript");
    words[i] = s.words.size();
    const ModelInput<T> clean = clean_input<T>(s, pc);
    std::size_t cell = 0;
    if (grid.clean) errors[i][cell++] = edit_distance(s.words, detail::hyp_words(sys.transcribe(clean.mel, clean.video)));
    for (std::size_t c = 0; c < ncat; ++c) {
      const auto cat = grid.categories[c];
      const WaveBuffer noise = generate_noise(derive_seed(grid.seed, {0xE7, static_cast<std::uint64_t>(cat), i}), cat,
                                              s.wave.duration_s(), pc.synth);
      for (std::size_t k = 0; k < nsnr; ++k) {
        Rng rng(derive_seed(grid.seed, {0xE8, static_cast<std::uint64_t>(cat), i}));
        const Tensor<T> mel = mel_tensor<T>(compute_logmel(mix_at_snr(s.wave, noise, grid.snrs[k], rng, pc.pause), pc.mel));
        errors[i][cell++] = edit_distance(s.words, detail::hyp_words(sys.transcribe(mel, clean.video)));
      }
    }
  });

  EvalReport rep;
  rep.model = sys.tag;
  rep.grid = grid;
  rep.stub_params = sys.stub->parameter_count();
  rep.fusion_params = sys.fusion ? sys.fusion->parameter_count() : 0;
  std::size_t total_words = 0;
  for (std::size_t w : words) total_words += w;
  auto make = [&](std::string cat, std::optional<double> snr, std::size_t cell) {
    CellResult r{std::move(cat), snr, 0, total_words, 0};
    for (std::size_t i = 0; i < n; ++i) r.errors += errors[i][cell];
    r.wer_percent = 100.0 * static_cast<double>(r.errors) / static_cast<double>(total_words);
    return r;
  };
  std::size_t cell = 0;
  if (grid.clean) rep.cells.push_back(make(kCleanCategory, std::nullopt, cell++));
  for (std::size_t c = 0; c < ncat; ++c)
    for (std::size_t k = 0; k < nsnr; ++k) rep.cells.push_back(make(to_string(grid.categories[c]), grid.snrs[k], cell++));
  add_music_natural(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string snr_text(const std::optional<double>& snr) { return snr ? fmt_g(*snr, 6) : std::string("clean"); }

inline std::string report_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "model,category,snr_db,wer_percent,n_words\n";
  for (const auto& r : reports)
    for (const auto& c : r.cells)
      out << r.model << ',' << c.category << ',' << snr_text(c.snr_db) << ',' << fmt_f(c.wer_percent, 4) << ','
          << c.words << '\n';
  return out.str();
}

/// Plain-text table: one row per model, column groups per category and SNR;
/// '*' marks the best (lowest) value of each column.
inline std::string render_table(const std::vector<EvalReport>& reports) {
  if (reports.empty()) return "";
  const EvalGrid& g = reports.front().grid;
  struct Col {
    std::string category;
    std::optional<double> snr;
  };
  std::vector<Col> cols;
  if (g.clean) cols.push_back({kCleanCategory, std::nullopt});
  std::vector<std::string> groups;
  for (auto c : g.categories) {
    const std::string name = to_string(c);
    if (name == "music" || name == "natural") continue;
    groups.push_back(name);
  }
  const bool has_m = std::count(g.categories.begin(), g.categories.end(), NoiseCategory::Music) > 0;
  const bool has_n = std::count(g.categories.begin(), g.categories.end(), NoiseCategory::Natural) > 0;
  if (has_m && has_n) groups.insert(groups.begin() + std::min<std::size_t>(1, groups.size()), kMusicNatural);
  else if (has_m) groups.push_back("music");
  else if (has_n) groups.push_back("natural");
  for (const auto& grp : groups)
    for (double s : g.snrs) cols.push_back({grp, s});

  std::size_t name_w = 5;
  for (const auto& r : reports) name_w = std::max(name_w, r.model.size());
  constexpr std::size_t cw = 9;
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
  };
  std::ostringstream out;
  std::string h1 = std::string(name_w, ' '), h2 = "model" + std::string(name_w - 5, ' ');
  for (const auto& c : cols) {
    h1 += " " + pad(c.snr ? c.category.substr(0, cw) : std::string("clean"), cw);
    h2 += " " + pad(c.snr ? fmt_g(*c.snr, 4) + "dB" : std::string("-"), cw);
  }
  out << h1 << '\n' << h2 << '\n';
  for (const auto& r : reports) {
    std::string line = r.model + std::string(name_w - r.model.size(), ' ');
    for (const auto& c : cols) {
      const double v = r.cell(c.category, c.snr).wer_percent;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& o : reports) best = std::min(best, o.cell(c.category, c.snr).wer_percent);
      line += " " + pad(fmt_f(v, 1) + (reports.size() > 1 && v == best ? "*" : " "), cw);
    }
    out << line << '\n';
  }
  out << "WER in percent; SNRs measured over non-pause frames.\n";
  return out.str();
}

struct DeltaCell {
  std::string category;
  std::optional<double> snr_db;
  double a = 0, b = 0, abs_delta = 0, rel_delta = 0;
};

struct DeltaTable {
  std::vector<DeltaCell> cells;
  /// category -> (mean absolute delta, mean relative delta) over its cells.
  std::map<std::string, std::pair<double, double>> category_means;
};

inline double relative_delta(double a, double b) {
  if (a == 0) return b == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return (b - a) / a;
}

/// Per-cell b - a and (b - a) / a, with per-category averages.
inline DeltaTable compare_reports(const EvalReport& a, const EvalReport& b) {
  if (!(a.grid == b.grid) || a.cells.size() != b.cells.size()) throw EvalError("compare_reports: reports use different grids");
  DeltaTable t;
  std::map<std::string, std::pair<double, double>> sums;
  std::map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const auto& ca = a.cells[i];
    const auto& cb = b.cells[i];
    if (ca.category != cb.category || ca.snr_db != cb.snr_db) throw EvalError("compare_reports: cell layout differs");
    DeltaCell d{ca.category, ca.snr_db, ca.wer_percent, cb.wer_percent, cb.wer_percent - ca.wer_percent,
                relative_delta(ca.wer_percent, cb.wer_percent)};
    sums[d.category].first += d.abs_delta;
    sums[d.category].second += d.rel_delta;
    ++counts[d.category];
    t.cells.push_back(d);
  }
  for (const auto& [cat, s] : sums)
    t.category_means[cat] = {s.first / static_cast<double>(counts[cat]), s.second / static_cast<double>(counts[cat])};
  return t;
}

inline std::string delta_csv(const DeltaTable& t) {
  std::ostringstream out;
  out << "category,snr_db,wer_a,wer_b,abs_delta,rel_delta\n";
  for (const auto& c : t.cells)
    out << c.category << ',' << snr_text(c.snr_db) << ',' << fmt_f(c.a, 4) << ',' << fmt_f(c.b, 4) << ','
        << fmt_f(c.abs_delta, 4) << ',' << fmt_g(c.rel_delta, 6) << '\n';
  for (const auto& [cat, m] : t.category_means)
    out << cat << ",mean,,," << fmt_f(m.first, 4) << ',' << fmt_g(m.second, 6) << '\n';
  return out.str();
}

}  // namespace avf
