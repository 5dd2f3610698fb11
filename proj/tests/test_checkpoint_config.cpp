#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fdm/checkpoint.hpp"
#include "fdm/config.hpp"
#include "fdm/pipeline.hpp"

namespace fdm {
namespace {

namespace fs = std::filesystem;

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.config_text = "seed = 3\n";
  Rng rng(1);
  TensorF a({2, 3}), b({4});
  for (auto& v : a.data()) v = static_cast<float>(rng.normal());
  for (auto& v : b.data()) v = static_cast<float>(rng.normal());
  ck.tensors["layer.weight"] = a;
  ck.tensors["layer.bias"] = b;
  ck.tensors["scalar"] = TensorF::scalar(2.5f);
  return ck;
}

TEST(Checkpoint, SerializeParseRoundTrip) {
  const auto ck = sample_checkpoint();
  const auto back = parse_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(back.config_text, ck.config_text);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    ASSERT_TRUE(back.has(name)) << name;
    EXPECT_EQ(back.tensors.at(name).shape(), t.shape());
    EXPECT_EQ(back.tensors.at(name).vec(), t.vec());
  }
  EXPECT_TRUE(back.has_prefix("layer."));
  EXPECT_FALSE(back.has_prefix("other"));
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "FDMC");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kCheckpointVersion);
  EXPECT_EQ(bytes[5], 0);
}

TEST(Checkpoint, BadMagicRejected) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bytes), IoError);
}

TEST(Checkpoint, FutureVersionRejected) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[4] = static_cast<char>(kCheckpointVersion + 1);
  try {
    parse_checkpoint(bytes);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationRejected) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  for (std::size_t cut : {std::size_t{6}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, cut)), IoError) << cut;
}

TEST(Checkpoint, NonFiniteRefusedOnSave) {
  auto ck = sample_checkpoint();
  ck.tensors["layer.bias"][1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(serialize_checkpoint(ck), ContractError);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const fs::path p = fs::temp_directory_path() / "fdm_test_ckpt.fdmc";
  save_checkpoint(p.string(), sample_checkpoint());
  EXPECT_EQ(load_checkpoint(p.string()).tensors.at("layer.weight").vec(), sample_checkpoint().tensors.at("layer.weight").vec());
  fs::remove(p);
  EXPECT_THROW(load_checkpoint(p.string()), IoError);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_size = 16;
  c.channels = 8;
  c.codebook_n = 16;
  c.encoder_blocks = 2;
  c.decoder_blocks_per_stage = 1;
  c.fdm_blocks = 1;
  c.sampler = {16, 1, 2};
  return c;
}

TEST(ModelCheckpoint, PresentPartsRoundTrip) {
  ModelConfig a_cfg = tiny_model(), b_cfg = tiny_model();
  b_cfg.init_seed = 99;
  Model a(a_cfg), b(b_cfg);
  a.present = {"encoder", "codebook", "decoder", "discriminator"};
  const auto missing = b.load(parse_checkpoint(serialize_checkpoint(a.to_checkpoint("x"))));
  EXPECT_EQ(missing, (std::vector<std::string>{"sampler", "fdm"}));
  for (const char* p : {"encoder", "codebook", "decoder", "discriminator"}) EXPECT_EQ(a.part_hash(p), b.part_hash(p)) << p;
  EXPECT_NE(a.part_hash("sampler"), b.part_hash("sampler"));
  EXPECT_FALSE(b.present.count("sampler"));
  EXPECT_THROW(b.require("sampler", "inpaint"), ContractError);
}

TEST(ModelCheckpoint, IncompletePartRejected) {
  Model a(tiny_model());
  a.present = {"encoder"};
  auto ck = a.to_checkpoint("");
  ck.tensors.erase(ck.tensors.begin());
  Model b(tiny_model());
  EXPECT_THROW(b.load(ck), IoError);
}

TEST(ModelCheckpoint, ShapeMismatchRejected) {
  Model a(tiny_model());
  a.present = {"codebook"};
  auto cfg = tiny_model();
  cfg.codebook_n = 32;
  Model b(cfg);
  EXPECT_THROW(b.load(a.to_checkpoint("")), ConfigError);
}

TEST(RunConfig, UnknownKeyRejected) {
  RunConfig rc;
  EXPECT_THROW(rc.set("no.such.key", "1"), ConfigError);
  EXPECT_THROW(rc.apply_override("channels"), ConfigError);
  EXPECT_THROW(rc.apply_text("channels 32"), ConfigError);
  EXPECT_THROW(rc.set("channels", "many"), ConfigError);
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig rc;
  rc.apply_override("lr.fdm=3.5e-4");
  rc.apply_override("sampler.order = confidence");
  rc.apply_override("fdm.target=paper_literal");
  rc.apply_override("data.path=some/dir");
  rc.apply_text("# comment\n\nchannels = 16   # trailing\n");
  RunConfig back = RunConfig::paper();
  back.apply_text(rc.to_text());
  EXPECT_EQ(back.to_text(), rc.to_text());
  EXPECT_EQ(back.get("lr.fdm"), "0.00035");
  EXPECT_EQ(back.get("sampler.order"), "confidence");
  EXPECT_EQ(back.model.channels, 16u);
}

TEST(RunConfig, Presets) {
  EXPECT_EQ(RunConfig::from_preset("desk").model.image_size, 32u);
  const auto p = RunConfig::from_preset("paper");
  EXPECT_EQ(p.model.image_size, 256u);
  EXPECT_EQ(p.model.patch_size, 8u);
  EXPECT_EQ(p.model.codebook_n, 512u);
  EXPECT_EQ(p.top_k, 50u);
  EXPECT_THROW(RunConfig::from_preset("huge"), ConfigError);
}

TEST(RunConfig, PresetFilesMatchBuiltins) {
  for (const char* name : {"desk", "paper"}) {
    RunConfig from_file = RunConfig::from_preset(name);
    from_file.apply_file(std::string(FDM_SOURCE_DIR) + "/presets/" + name + ".cfg");
    RunConfig builtin = RunConfig::from_preset(name);
    // The paper preset file also points at an image directory.
    builtin.data_source = from_file.data_source;
    builtin.data_path = from_file.data_path;
    EXPECT_EQ(from_file.to_text(), builtin.to_text()) << name;
  }
}

TEST(RunConfig, ValidateRejectsBadValues) {
  RunConfig rc;
  rc.model.patch_size = 3;
  EXPECT_THROW(rc.validate(), ConfigError);
  rc = RunConfig{};
  rc.top_k = rc.model.codebook_n + 1;
  EXPECT_THROW(rc.validate(), ConfigError);
  rc = RunConfig{};
  rc.model.sampler.heads = 3;
  EXPECT_THROW(rc.validate(), ConfigError);
}

}  // namespace
}  // namespace fdm
