#include <gtest/gtest.h>

#include <sstream>

#include "avfusion/evaluator.hpp"
#include "oracles.hpp"

using namespace avf;

namespace {

std::vector<std::vector<char>> all_words(std::size_t max_len) {
  std::vector<std::vector<char>> out{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    const std::size_t start = out.size();
    for (std::size_t i = 0; i < start; ++i) {
      if (out[i].size() != len - 1) continue;
      for (char c : {'a', 'b', 'c'}) {
        auto w = out[i];
        w.push_back(c);
        out.push_back(w);
      }
    }
  }
  return out;
}

EvalReport fake_report(const std::string& model, const EvalGrid& g, double base) {
  EvalReport r;
  r.model = model;
  r.grid = g;
  double v = base;
  if (g.clean) r.cells.push_back({kCleanCategory, std::nullopt, 0, 100, v});
  for (auto c : g.categories)
    for (double s : g.snrs) r.cells.push_back({to_string(c), s, 0, 100, v += 3});
  add_music_natural(r);
  return r;
}

StubConfig tiny_stub() {
  StubConfig c;
  c.width = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  return c;
}

}  // namespace

TEST(Wer, EditDistanceMatchesExhaustiveSearch) {
  const auto words = all_words(4);
  ASSERT_EQ(words.size(), 121u);
  for (const auto& r : words)
    for (const auto& h : words) {
      const std::size_t d = edit_distance(r, h);
      ASSERT_EQ(d, oracle::brute_force_edits(r, h));
      ASSERT_EQ(d, oracle::levenshtein(r, h));
    }
}

TEST(Wer, HandExamples) {
  using V = std::vector<std::string>;
  EXPECT_DOUBLE_EQ(wer(V{"a", "b", "c"}, V{"a", "b", "c"}), 0.0);
  EXPECT_DOUBLE_EQ(wer(V{"a", "b", "c"}, V{"a", "c"}), 1.0 / 3);
  EXPECT_DOUBLE_EQ(wer(V{"a"}, V{"b", "c", "d"}), 3.0);
  EXPECT_THROW(wer(V{}, V{"a"}), EvalError);
}

TEST(Wer, CorpusRateIsNotMeanOfRates) {
  using V = std::vector<std::string>;
  const std::vector<V> refs{{"x"}, V(9, "y")};
  const std::vector<V> hyps{{"z"}, V(9, "y")};
  EXPECT_DOUBLE_EQ(corpus_wer(refs, hyps), 0.1);
  EXPECT_DOUBLE_EQ((wer(refs[0], hyps[0]) + wer(refs[1], hyps[1])) / 2, 0.5);
  EXPECT_THROW(corpus_wer(refs, std::vector<V>{{"x"}}), EvalError);
  EXPECT_THROW(corpus_wer(std::vector<V>{{}}, std::vector<V>{{}}), EvalError);
}

TEST(Report, MusicNaturalIsMeanOfBoth) {
  EvalGrid g;
  g.snrs = {0, 5};
  const EvalReport r = fake_report("m", g, 10);
  for (double s : g.snrs)
    EXPECT_DOUBLE_EQ(r.cell(kMusicNatural, s).wer_percent,
                     (r.cell("music", s).wer_percent + r.cell("natural", s).wer_percent) / 2);
  EXPECT_THROW(r.cell("traffic", 0.0), EvalError);
}

TEST(Report, CompareGivesPerCellAndCategoryDeltas) {
  EvalGrid g;
  g.snrs = {-5, 5};
  const EvalReport a = fake_report("a", g, 10), b = fake_report("b", g, 5);
  const DeltaTable t = compare_reports(a, b);
  ASSERT_EQ(t.cells.size(), a.cells.size());
  for (const auto& c : t.cells) {
    EXPECT_DOUBLE_EQ(c.abs_delta, -5.0);
    EXPECT_DOUBLE_EQ(c.rel_delta, -5.0 / c.a);
  }
  EXPECT_DOUBLE_EQ(t.category_means.at("babble").first, -5.0);
  EXPECT_DOUBLE_EQ(relative_delta(0, 0), 0.0);
  EvalGrid other = g;
  other.snrs = {0};
  EXPECT_THROW(compare_reports(a, fake_report("c", other, 1)), EvalError);
  const std::string csv = delta_csv(t);
  EXPECT_EQ(csv.rfind("category,snr_db,wer_a,wer_b,abs_delta,rel_delta\n", 0), 0u);
  EXPECT_NE(csv.find("babble,mean,,,-5.0000,"), std::string::npos);
}

TEST(Report, CsvAndTableLayout) {
  EvalGrid g;
  g.snrs = {0};
  const auto a = fake_report("stub", g, 10), b = fake_report("fusion", g, 4);
  const std::string csv = report_csv({a, b});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "model,category,snr_db,wer_percent,n_words");
  std::getline(in, line);
  EXPECT_EQ(line, "stub,clean,clean,10.0000,100");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows + 1, a.cells.size() + b.cells.size());
  const std::string table = render_table({a, b});
  EXPECT_NE(table.find("music+na"), std::string::npos);
  EXPECT_NE(table.find("4.0*"), std::string::npos);
}

TEST(Grid, EvaluationIsPureAndShared) {
  PipelineConfig pc;
  std::vector<AvSample> data;
  for (std::uint64_t s = 0; s < 3; ++s) data.push_back(to_av_sample(generate_sample(s, pc.synth)));
  const StubConfig sc = tiny_stub();
  const auto stub = init_stub_params<float>(sc, 1);
  const auto before = stub.deep_copy();
  EvalGrid g;
  g.snrs = {0, 10};
  g.n_samples = 3;
  const AsrSystem<float> sys{"stub", &stub, sc, nullptr, FusionConfig{}};
  const EvalReport r1 = evaluate_grid(sys, g, data, pc, 1);
  EXPECT_TRUE(stub.bitwise_equal(before));
  const EvalReport r2 = evaluate_grid(sys, g, data, pc, 2);
  ASSERT_EQ(r1.cells.size(), 1 + 4 * 2 + 2u);
  for (std::size_t i = 0; i < r1.cells.size(); ++i) {
    EXPECT_EQ(r1.cells[i].errors, r2.cells[i].errors);
    EXPECT_EQ(r1.cells[i].words, r2.cells[i].words);
  }
  std::size_t words = 0;
  for (const auto& s : data) words += s.words.size();
  EXPECT_EQ(r1.cell(kCleanCategory, std::nullopt).words, words);
  EXPECT_EQ(r1.stub_params, stub.parameter_count());
  EXPECT_EQ(r1.fusion_params, 0u);

  g.n_samples = 4;
  EXPECT_THROW(evaluate_grid(sys, g, data, pc, 1), EvalError);
  g.n_samples = 1;
  data[0].words.clear();
  EXPECT_THROW(evaluate_grid(sys, g, data, pc, 1), EvalError);
}
