#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fdm/cli.hpp"

namespace fdm {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fdm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const char* kTinyConfig = R"(image_size = 16
channels = 8
codebook_n = 16
encoder.blocks = 2
decoder.blocks_per_stage = 1
fdm.blocks = 2
sampler.d_model = 16
sampler.layers = 1
sampler.heads = 2
sampler.k = 4
epochs.ae = 1
epochs.sampler = 1
epochs.fdm = 1
epochs.finetune = 1
batch_size = 8
data.count = 16
data.val_fraction = 0.25
mask.pool = 16
eval.images = 2
eval.diversity_images = 1
eval.diversity_pairs = 1
inpaint.samples = 2
)";

class CliChain : public ::testing::Test {
 protected:
  static fs::path dir;
  static fs::path cfg;
  static Result chain[5];

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "fdm_test_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    cfg = dir / "tiny.cfg";
    std::ofstream(cfg) << kTinyConfig;
    const char* cmds[] = {"train-ae", "train-sampler", "train-fdm", "finetune", "evaluate"};
    for (int i = 0; i < 5; ++i) chain[i] = run_cli({cmds[i], "--config", cfg.string(), "--out", (dir / "run").string(), "-q"});
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  std::vector<std::string> common() const { return {"--config", cfg.string(), "--out", (dir / "run").string(), "-q"}; }
};
fs::path CliChain::dir;
fs::path CliChain::cfg;
Result CliChain::chain[5];

TEST_F(CliChain, EveryPhaseSucceedsAndWritesItsCheckpoint) {
  for (const auto& r : chain) EXPECT_EQ(r.code, 0) << r.err;
  for (const char* f : {"ae.fdmc", "sampler.fdmc", "fdm.fdmc", "finetune.fdmc", "report.txt", "report.csv",
                        "report_extended.csv", "diversity.csv", "logs/p1_autoencoder.log", "logs/p2_fdm.log"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
}

TEST_F(CliChain, TrainingLogsAreTabSeparated) {
  std::istringstream log(read_file(dir / "run" / "logs" / "p2_fdm.log"));
  std::string line;
  int rows = 0;
  while (std::getline(log, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 3) << line;
  }
  EXPECT_GT(rows, 0);
}

TEST_F(CliChain, DiversityCsvHasOneRowPerBucket) {
  const std::string csv = read_file(dir / "run" / "diversity.csv");
  EXPECT_EQ(csv.rfind("bucket,image,pairs,score\n", 0), 0u);
  EXPECT_NE(csv.find("\nsmall,0,1,"), std::string::npos);
  EXPECT_NE(csv.find("\nlarge,0,1,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "run" / "diversity" / "small_000_s1.png"));
}

TEST_F(CliChain, InpaintWithKOneIsReproducible) {
  const fs::path img = dir / "probe.png";
  png_write(img.string(), synth_texture(5, 3, 16));
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    auto args = common();
    for (const char* a : {"--k", "1", "--bucket", "large"}) args.push_back(a);
    args.insert(args.begin(), {"inpaint", "--image", img.string()});
    const auto r = run_cli(args);
    ASSERT_EQ(r.code, 0) << r.err;
    bytes[i] = read_file(dir / "run" / "inpaint" / "probe_sample0.png");
  }
  EXPECT_FALSE(bytes[0].empty());
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_TRUE(fs::exists(dir / "run" / "inpaint" / "probe_sample1.png"));
  EXPECT_TRUE(fs::exists(dir / "run" / "inpaint" / "probe_grid.png"));
  const auto mask = mask_read((dir / "run" / "inpaint" / "probe_mask.png").string());
  EXPECT_GE(masked_fraction(mask), 0.4);
}

TEST_F(CliChain, InpaintMissingImageIsIoError) {
  auto args = common();
  args.insert(args.begin(), {"inpaint", "--image", (dir / "nope.png").string()});
  EXPECT_EQ(run_cli(args).code, 2);
}

TEST(Cli, SynthDataWritesImagesAndManifest) {
  const fs::path dir = fs::temp_directory_path() / "fdm_test_synth";
  fs::remove_all(dir);
  const auto r = run_cli({"synth-data", "--out", dir.string(), "-O", "data.count=8", "-O", "image_size=16"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir / "data")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 8u);
  const std::string manifest = read_file(dir / "data" / "manifest.txt");
  EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 8);
  EXPECT_EQ(png_read((dir / "data" / "img_00002.png").string()).vec(), quantize_to_bytes(synth_texture(1, 2, 16)).vec());
  fs::remove_all(dir);
}

TEST(Cli, OverridesAndFlagsLandInResolvedConfig) {
  const fs::path dir = fs::temp_directory_path() / "fdm_test_resolved";
  fs::remove_all(dir);
  const auto r = run_cli({"report", "--out", dir.string(), "-O", "lr.fdm=5e-4", "-O", "channels=16", "--seed", "9", "--k", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  RunConfig rc;
  rc.apply_file((dir / "report.cfg").string());
  EXPECT_EQ(rc.fdm.lr, 5e-4);
  EXPECT_EQ(rc.model.channels, 16u);
  EXPECT_EQ(rc.seed, 9u);
  EXPECT_EQ(rc.top_k, 3u);
  const std::string table = read_file(dir / "params_flops.txt");
  EXPECT_EQ(table.find("MISMATCH"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"no-such-command"}).code, 1);
  EXPECT_EQ(run_cli({"report", "-O", "no.such.key=1", "--out", "/tmp/fdm_test_unused"}).code, 1);
  EXPECT_EQ(run_cli({"report", "--config", "/nonexistent/x.cfg"}).code, 2);
  const auto missing = run_cli({"train-fdm", "--out", (fs::temp_directory_path() / "fdm_test_empty").string(), "-q"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("train-ae"), std::string::npos) << missing.err;
  fs::remove_all(fs::temp_directory_path() / "fdm_test_empty");
  fs::remove_all("/tmp/fdm_test_unused");
}

}  // namespace
}  // namespace fdm
