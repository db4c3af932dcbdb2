#include <gtest/gtest.h>

#include <map>

#include "avfusion/trainer.hpp"
#include "oracles.hpp"

using namespace avf;
using oracle::Td;

namespace {

StubConfig small_stub() {
  StubConfig c;
  c.width = 32;
  c.heads = 4;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  return c;
}

Td logits_from_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Td({rows.size(), rows[0].size()}, std::move(v));
}

}  // namespace

TEST(Stub, EncoderHalvesTheFrameRate) {
  const StubConfig cfg = small_stub();
  const auto ps = init_stub_params<double>(cfg, 1);
  const Bound<double> p(ps, nullptr);
  Rng rng(2);
  for (std::size_t t : {2u, 3u, 10u, 11u, 98u, 99u, 250u}) {
    const Td emb = stub_encode(p, cfg, oracle::random_tensor(rng, {80, t}));
    EXPECT_EQ(emb.shape(), (Shape{32, t / 2})) << t;
    EXPECT_EQ(stub_decode_logits(p, cfg, emb).shape(), (Shape{t / 2, cfg.classes()}));
  }
  EXPECT_THROW(stub_encode(p, cfg, oracle::random_tensor(rng, {80, 1})), std::invalid_argument);
  EXPECT_THROW(stub_encode(p, cfg, oracle::random_tensor(rng, {40, 20})), ShapeError);
}

TEST(Stub, DefaultWidthsBySize) {
  StubConfig c;
  EXPECT_EQ(c.model_width(), 96u);
  c.size = StubSize::Small;
  EXPECT_EQ(c.model_width(), 192u);
  EXPECT_EQ(c.classes(), 33u);
  EXPECT_EQ(c.blank(), 32u);
  EXPECT_THROW(parse_stub_size("large"), std::invalid_argument);
}

TEST(Stub, DeterministicAndInputSensitive) {
  const StubConfig cfg = small_stub();
  const auto ps = init_stub_params<float>(cfg, 3);
  EXPECT_TRUE(ps.bitwise_equal(init_stub_params<float>(cfg, 3)));
  EXPECT_FALSE(ps.bitwise_equal(init_stub_params<float>(cfg, 4)));
  const auto s = generate_sample(5);
  const auto a = generate_targets(s.wave, ps, cfg), b = generate_targets(s.wave, ps, cfg);
  EXPECT_TRUE(a.enc_t.same_values(b.enc_t));
  EXPECT_TRUE(a.dec_t.same_values(b.dec_t));
  WaveBuffer louder = s.wave;
  for (std::size_t i = 10000; i < 12000; ++i) louder.samples[i] += 0.2 * std::sin(0.3 * static_cast<double>(i));
  const auto c = generate_targets(louder, ps, cfg);
  EXPECT_FALSE(a.enc_t.same_values(c.enc_t));
}

TEST(Decode, CollapsesRepeatsAndDropsBlanks) {
  // classes 0, 1, 2 with blank = 2
  const Td logits = logits_from_rows({{0, 0, 5}, {5, 0, 0}, {4, 1, 0}, {0, 0, 3}, {6, 0, 0}, {0, 2, 1}, {0, 2, 1}});
  EXPECT_EQ(greedy_decode(logits, 2), (std::vector<int>{0, 0, 1}));
  EXPECT_EQ(greedy_decode(logits_from_rows({{0, 0, 1}, {0, 0, 1}}), 2), std::vector<int>{});
  EXPECT_EQ(collapse_frames({3, 3, 9, 3, 1, 1, 9, 9}, 9), (std::vector<int>{3, 3, 1}));
  EXPECT_EQ(collapse_frames(frame_argmax(logits), 2), greedy_decode(logits, 2));
}

TEST(Decode, FrameLabelsFollowUnitCentres) {
  // frame j is centred on sample 320 j + 280
  const std::vector<UnitSpan> units{{4, 500, 1000}, {7, 1240, 1250}};
  const auto labels = frame_labels(units, 5, 32);
  // centres: 280, 600, 920, 1240, 1560
  EXPECT_EQ(labels, (std::vector<int>{32, 4, 4, 7, 32}));
}

TEST(Decode, FrameCrossEntropyMatchesOracle) {
  Rng rng(6);
  const Td logits = oracle::random_tensor(rng, {9, 5}, -3, 3);
  const std::vector<int> labels{0, 4, 2, 2, 1, 3, 4, 0, 1};
  Td onehot({9, 5});
  for (std::size_t t = 0; t < 9; ++t) onehot.mutable_data()[t * 5 + static_cast<std::size_t>(labels[t])] = 1;
  EXPECT_NEAR(frame_cross_entropy(logits, labels).item(), oracle::naive_ce(onehot, logits), 1e-12);
  EXPECT_THROW(frame_cross_entropy(logits, std::vector<int>(8, 0)), std::invalid_argument);
}

TEST(StubTraining, BeatsMajorityClassOnSmallData) {
  StubConfig cfg = small_stub();
  SynthConfig synth;
  synth.vocab = 8;
  cfg.vocab = 8;
  std::vector<SynthSample> data;
  for (std::uint64_t s = 0; s < 50; ++s) data.push_back(generate_sample(s, synth));
  auto ps = init_stub_params<float>(cfg, 7);
  StubTrainConfig tc;
  tc.max_epochs = 12;
  tc.lr = 3e-3;
  const MelConfig mc;
  const auto res = pretrain_stub(ps, cfg, data, data, mc, tc, 8);
  std::map<int, std::size_t> counts;
  std::size_t frames = 0;
  for (const auto& s : data)
    for (int l : labelled_mel<float>(s, cfg, mc).labels) ++counts[l], ++frames;
  std::size_t majority = 0;
  for (const auto& [label, n] : counts) majority = std::max(majority, n);
  const double baseline = static_cast<double>(majority) / static_cast<double>(frames);
  EXPECT_GT(res.val_accuracy, baseline + 0.1) << "baseline " << baseline;
  EXPECT_EQ(res.accuracy_history.size(), res.epochs);
}
