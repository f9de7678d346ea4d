#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmnet/cli.hpp"
#include "mmnet/errors.hpp"
#include "mmnet/train.hpp"

using namespace mmnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "mmnet");
  return cli::run(args);
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path subdir(const fs::path& dir, const std::string& prefix) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().starts_with(prefix)) return e.path();
  return {};
}

const char* kTinyConfig = R"({
  "synth": {"n_plots": 8, "ratios": [0.5, 0.25, 0.25]},
  "network": {"stem_channels": 8, "widths": [4, 4, 8, 8], "se_reduction": 4, "head_hidden": 8,
              "voxel_size": 2.0, "mamba": {"state_dim": 4}},
  "epochs": 2, "batch": 2
})";

}  // namespace

TEST(Cli, MissingManifestIsUsageError) {
  TempDir dir("mmnet_cli_missing");
  testing::internal::CaptureStderr();
  const int code = run({"train", "--seed", "1", "--manifest", (dir.path / "none.csv").string(), "--out",
                        dir.path.string()});
  const auto err = testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, 2);
  EXPECT_NE(err.find("none.csv"), std::string::npos) << err;
}

TEST(Cli, WrongDepthsIsUsageError) {
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"audit", "--seed", "1", "--depths", "3,4,6,4"}), 2);
  EXPECT_NE(testing::internal::GetCapturedStderr().find("depth"), std::string::npos);
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"frobnicate"}), 2);
  testing::internal::GetCapturedStderr();
}

TEST(Cli, UnknownConfigKeyNamed) {
  try {
    (void)cli::config_from_json_text(R"({"epochz": 3})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos) << e.what();
  }
}

TEST(Cli, AuditPrintsLayout) {
  testing::internal::CaptureStdout();
  EXPECT_EQ(run({"audit", "--seed", "1"}), 0);
  const auto out = testing::internal::GetCapturedStdout();
  EXPECT_NE(out.find("blocks=16 mamba_se=4 at [3,7,13,16]"), std::string::npos) << out;
}

TEST(Cli, GradcheckSucceeds) {
  TempDir dir("mmnet_cli_gradcheck");
  testing::internal::CaptureStdout();
  EXPECT_EQ(run({"gradcheck", "--seed", "2", "--out", dir.path.string()}), 0);
  EXPECT_NE(testing::internal::GetCapturedStdout().find("all gradient checks passed"), std::string::npos);
}

TEST(Cli, RunDirectoryDependsOnResultAffectingSettingsOnly) {
  cli::RunConfig a;
  a.command = "train";
  a.seed = 3;
  cli::RunConfig b = a;
  b.threads = 4;
  b.out = "elsewhere";
  EXPECT_EQ(cli::config_hash(a), cli::config_hash(b));
  b.lr = 0.01;
  EXPECT_NE(cli::config_hash(a), cli::config_hash(b));
  EXPECT_EQ(cli::run_directory(a).filename().string().rfind("train-agb-seed3-", 0), 0u);
}

TEST(Cli, SynthTrainEvalAndRepeatability) {
  TempDir dir("mmnet_cli_pipeline");
  std::ofstream(dir.path / "c.json") << kTinyConfig;
  const std::string cfg = (dir.path / "c.json").string();
  testing::internal::CaptureStdout();
  testing::internal::CaptureStderr();
  ASSERT_EQ(run({"synth", "--config", cfg, "--seed", "5", "--out", (dir.path / "data").string()}), 0);
  const auto manifest = subdir(dir.path / "data", "synth-") / "manifest.csv";
  ASSERT_TRUE(fs::exists(manifest));
  for (const char* out : {"a", "b"}) {
    ASSERT_EQ(run({"train", "--config", cfg, "--manifest", manifest.string(), "--seed", "1", "--threads", "1",
                   "--out", (dir.path / out).string()}),
              0);
  }
  const auto ra = subdir(dir.path / "a", "train-"), rb = subdir(dir.path / "b", "train-");
  ASSERT_FALSE(ra.empty());
  EXPECT_EQ(ra.filename(), rb.filename());
  for (const char* f : {"model.ckpt", "report.json", "loss_log.csv", "config.json"})
    EXPECT_EQ(bytes(ra / f), bytes(rb / f)) << f;

  ASSERT_EQ(run({"eval", "--config", cfg, "--manifest", manifest.string(), "--seed", "1", "--checkpoint",
                 (ra / "model.ckpt").string(), "--split", "test", "--reference-report",
                 (ra / "report.json").string(), "--out", (dir.path / "bad").string()}),
            2);  // a train report has no "metrics" block
  ASSERT_EQ(run({"eval", "--config", cfg, "--manifest", manifest.string(), "--seed", "1", "--checkpoint",
                 (ra / "model.ckpt").string(), "--split", "test", "--out", (dir.path / "e").string()}),
            0);
  const auto re = subdir(dir.path / "e", "eval-");
  EXPECT_TRUE(fs::exists(re / "residuals_agb.csv"));
  ASSERT_EQ(run({"eval", "--config", cfg, "--manifest", manifest.string(), "--seed", "1", "--checkpoint",
                 (ra / "model.ckpt").string(), "--split", "test", "--reference-report",
                 (re / "report.json").string(), "--out", (dir.path / "e2").string()}),
            0);
  const auto out = testing::internal::GetCapturedStdout();
  testing::internal::GetCapturedStderr();
  // Against its own report every gap is zero.
  EXPECT_NE(out.find("R2 0.000 RMSE 0.000 MAPE 0.000 MB 0.000"), std::string::npos) << out;
}

TEST(Train, SameSeedSameFinalLoss) {
  data::SynthOptions so;
  so.seed = 21;
  so.n_plots = 6;
  NetworkConfig cfg;
  cfg.stem_channels = 8;
  cfg.widths = {4, 4, 8, 8};
  cfg.se_reduction = 4;
  cfg.head_hidden = 8;
  cfg.voxel_size = 2.0;
  cfg.mamba.state_dim = 4;
  const auto prep = train::prepare(data::synth_forest(so), cfg, {data::Target::agb});
  ASSERT_FALSE(prep.samples.empty());
  train::TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 2;
  opts.seed = 4;
  std::vector<double> losses;
  for (int rep = 0; rep < 2; ++rep) {
    Network net(cfg, 4);
    const auto res = train::fit(net, prep.samples, opts);
    ASSERT_EQ(res.log.size(), 3u);
    losses.push_back(res.log.back().loss);
  }
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_TRUE(std::isfinite(losses[0]));
}
