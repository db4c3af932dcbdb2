#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "avfusion/experiment.hpp"

using namespace avf;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "avf_test_ckpt";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  Rng rng(1);
  ck.tensors.add("a.w", glorot<float>(rng, {3, 4}, 4, 3));
  ck.tensors.add("a.b", Tensor<float>({3}, std::vector<float>{1.5f, -2.0f, 0.0f}));
  ck.tensors.add("s", Tensor<float>::scalar(7.0f));
  ck.meta["kind"] = "stub";
  ck.meta["note"] = "x y";
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const Checkpoint ck = sample_checkpoint();
  const auto p = scratch("rt.ckpt");
  save_checkpoint(p, ck);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_TRUE(back.tensors.bitwise_equal(ck.tensors));
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, DetectsCorruption) {
  const std::string buf = encode_checkpoint(sample_checkpoint());
  for (std::size_t pos : {std::size_t{8}, buf.size() / 2, buf.size() - 9}) {
    std::string bad = buf;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError) << pos;
  }
  std::string wrong_magic = buf;
  wrong_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(wrong_magic), CheckpointError);
}

TEST(Checkpoint, DetectsTruncation) {
  const std::string buf = encode_checkpoint(sample_checkpoint());
  for (std::size_t keep : {std::size_t{0}, std::size_t{10}, buf.size() / 2, buf.size() - 1}) {
    try {
      decode_checkpoint(buf.substr(0, keep), "cut");
      ADD_FAILURE() << "accepted " << keep << " bytes";
    } catch (const CheckpointError& e) {
      EXPECT_EQ(std::string(e.what()).rfind("cut:", 0), 0u);
    }
  }
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt")), CheckpointError);
}

TEST(Checkpoint, LayoutAndArchitectureChecks) {
  RunConfig cfg;
  cfg.fusion.width = 24;
  cfg.fusion.heads = 4;
  cfg.fusion.layers = 1;
  cfg.fusion.audio_channels = {4, 4, 8};
  cfg.fusion.visual_channels = {4, 8, 8, 8};
  cfg.stub.width = 16;
  cfg.stub.heads = 2;
  FusionRun run{init_fusion_params<float>(cfg.fusion, 1), init_stub_params<float>(cfg.stub, 2), {}};
  StageResult res;
  res.best_val = 1.25;
  res.epochs = 3;
  run.stages.emplace_back(Stage::Main, res);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(fusion_checkpoint(cfg, run)));
  EXPECT_EQ(ck.meta.at("stages"), "main");
  EXPECT_EQ(ck.meta.at("stage.main.epochs"), "3");
  EXPECT_EQ(ck.meta.at("config_hash"), config_hash(cfg));
  const FusionModel m = fusion_from_checkpoint(ck, cfg, "ck");
  EXPECT_TRUE(m.fusion.bitwise_equal(run.fusion));
  EXPECT_TRUE(m.stub.bitwise_equal(run.stub));

  RunConfig other = cfg;
  other.fusion.layers = 2;
  try {
    fusion_from_checkpoint(ck, other, "ck");
    ADD_FAILURE() << "architecture mismatch accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("fusion_layers"), std::string::npos) << e.what();
  }
  EXPECT_THROW(fusion_from_checkpoint(stub_checkpoint(cfg, run.stub, 0.9), cfg, "ck"), CheckpointError);
  EXPECT_TRUE(stub_from_checkpoint(stub_checkpoint(cfg, run.stub, 0.9), cfg, "s").bitwise_equal(run.stub));

  ParamSet<float> missing = run.stub.deep_copy();
  ParamSet<float> partial;
  for (std::size_t i = 1; i < missing.size(); ++i) partial.add(missing.names()[i], missing.value(i));
  EXPECT_THROW(require_layout(partial, run.stub, "x"), CheckpointError);
}

TEST(Manifest, ExportAndReload) {
  const auto dir = scratch("export");
  std::filesystem::remove_all(dir);
  std::vector<ManifestRow> rows;
  std::vector<SynthSample> src;
  for (std::uint64_t s = 0; s < 2; ++s) {
    src.push_back(generate_sample(s));
    rows.push_back(export_sample(src.back(), dir));
  }
  write_manifest(dir / "manifest.tsv", rows);
  const auto loaded = load_manifest_samples(dir / "manifest.tsv");
  ASSERT_EQ(loaded.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(loaded[i].id, src[i].id);
    EXPECT_EQ(loaded[i].words, token_words(src[i].tokens));
    EXPECT_EQ(loaded[i].frames.pixels, src[i].frames.pixels);
    ASSERT_EQ(loaded[i].wave.size(), src[i].wave.size());
    for (std::size_t k = 0; k < src[i].wave.size(); k += 97)
      EXPECT_NEAR(loaded[i].wave.samples[k], src[i].wave.samples[k], 1.0 / 32767);
  }
}

TEST(Manifest, RejectsMalformedRows) {
  const auto p = scratch("bad.tsv");
  std::ofstream(p) << "a\tb.wav\tb\t25\thello\nonly\ttwo\n";
  EXPECT_THROW(read_manifest(p), ManifestError);
  std::ofstream(p) << "a\tb.wav\tb\tfast\thello\n";
  EXPECT_THROW(read_manifest(p), ManifestError);
  EXPECT_EQ(normalize_words("Hello, World! It's  OK."), (std::vector<std::string>{"hello", "world", "it's", "ok"}));
}
