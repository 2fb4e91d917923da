#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "promptrecon/gridio.hpp"

namespace fs = std::filesystem;

#ifndef PROMPTRECON_CLI
#error "PROMPTRECON_CLI must name the command-line binary"
#endif

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = (fs::temp_directory_path() / ("pr_cli_" + std::to_string(::getpid()))).string();
    fs::remove_all(root_);
    fs::create_directories(root_);
    // One small dataset and checkpoint shared by the suite.
    ASSERT_EQ(run("gen-data --out " + root_ + "/data --scenes 2 --views 3 --seed 40 --height 32 --width 32").code, 0);
    const std::string sets =
        " --set model.token_dim=32 --set model.depth=2 --set model.heads=2 --set model.dpt_features=8"
        " --set model.dpt_channels=[8,8,8,8] --set model.head_channels=8 --set model.gs_feature_dim=4"
        " --set data.fixed_height=32 --set data.fixed_width=32 --set train.steps_per_epoch=1"
        " --set curriculum.stages.0.epochs=1 --set curriculum.stages.1.epochs=1 --set curriculum.stages.2.epochs=1";
    const CliResult t = run("train --data " + root_ + "/data --out " + root_ + "/run" + sets);
    ASSERT_EQ(t.code, 0) << t.output;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static CliResult run(const std::string& args) {
    const std::string log = root_ + "/last_output.txt";
    const std::string cmd = std::string(PROMPTRECON_CLI) + " " + args + " > " + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
  }

  static std::string scene(int i) {
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root_ + "/data"))
      if (e.is_directory()) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    return dirs.at(i);
  }

  static std::string root_;
};

std::string Cli::root_;

}  // namespace

TEST_F(Cli, GenDataWritesRequestedScenesDeterministically) {
  int count = 0;
  for (const auto& e : fs::directory_iterator(root_ + "/data")) count += e.is_directory();
  EXPECT_EQ(count, 2);
  ASSERT_EQ(run("gen-data --out " + root_ + "/again --scenes 1 --views 3 --seed 40 --height 32 --width 32").code, 0);
  const std::string name = fs::path(scene(0)).filename().string();
  EXPECT_EQ(promptrecon::read_float_grid(scene(0) + "/depth_1.bin"),
            promptrecon::read_float_grid(root_ + "/again/" + name + "/depth_1.bin"));
}

TEST_F(Cli, UsageAndDataErrorsMapToExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("gen-data --out " + root_ + "/x --resolution-policy banana").code, 1);
  EXPECT_EQ(run("train --data " + root_ + "/data --out " + root_ + "/y --set optim.nope=1").code, 1);
  const CliResult missing = run("train --data " + root_ + "/nowhere --out " + root_ + "/z");
  EXPECT_EQ(missing.code, 2) << missing.output;
  EXPECT_EQ(run("infer --ckpt " + root_ + "/run/nothing --images " + scene(0) + " --out " + root_ + "/i").code, 2);
}

TEST_F(Cli, TrainWritesArtifactsWithConfigSnapshot) {
  for (const char* f : {"config.json", "final.bin", "final.json", "stage1.log.csv", "stage3.log.csv"})
    EXPECT_TRUE(fs::exists(root_ + "/run/" + f)) << f;
  std::ifstream f(root_ + "/run/final.json");
  const auto meta = nlohmann::json::parse(f);
  EXPECT_TRUE(meta.dump().find("token_dim") != std::string::npos);
}

TEST_F(Cli, InferAcceptsEveryPriorCombination) {
  const std::string s = scene(0);
  std::vector<std::string> depth_of;
  for (int mask = 0; mask < 8; ++mask) {
    std::string args = "infer --ckpt " + root_ + "/run/final --images " + s;
    if (mask & 1) args += " --pose-prior " + s + "/cameras.json";
    if (mask & 2) args += " --intr-prior " + s + "/cameras.json";
    if (mask & 4) args += " --depth-prior " + s;
    const std::string out = root_ + "/infer_" + std::to_string(mask);
    const CliResult r = run(args + " --out " + out);
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* file : {"cameras.json", "cloud.bin", "depth_0.bin", "view_2.png", "inference.json"})
      EXPECT_TRUE(fs::exists(out + "/" + file)) << mask << " " << file;
    std::ifstream f(out + "/depth_0.bin", std::ios::binary);
    depth_of.emplace_back(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  EXPECT_NE(depth_of[0], depth_of[7]);
}

TEST_F(Cli, InferRejectsMalformedCameraPrior) {
  const std::string bad = root_ + "/bad_cameras.json";
  {
    std::ofstream f(bad);
    f << R"({"views": [{"fx": 10}]})";
  }
  const CliResult r = run("infer --ckpt " + root_ + "/run/final --images " + scene(0) + " --pose-prior " + bad +
                    " --out " + root_ + "/bad_infer");
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, EvalOfGroundTruthIsPerfect) {
  const CliResult r = run("eval --pred " + root_ + "/data --gt " + root_ + "/data --out " + root_ + "/perfect");
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream f(root_ + "/perfect.json");
  const auto rep = nlohmann::json::parse(f);
  const auto& m = rep.at("metrics");
  EXPECT_NEAR(m.at("depth_abs_rel").at("value").get<double>(), 0.0, 1e-9);
  EXPECT_NEAR(m.at("depth_inlier_1.03").at("value").get<double>(), 100.0, 1e-9);
  EXPECT_NEAR(m.at("rra_5").at("value").get<double>(), 100.0, 1e-9);
  EXPECT_NEAR(m.at("auc_30").at("value").get<double>(), 100.0, 1e-9);
  EXPECT_NEAR(m.at("normal_mean_deg").at("value").get<double>(), 0.0, 1e-3);
  EXPECT_NEAR(m.at("point_inlier_1.03").at("value").get<double>(), 100.0, 1e-9);
  EXPECT_NEAR(m.at("ssim").at("value").get<double>(), 1.0, 1e-9);
  EXPECT_TRUE(fs::exists(root_ + "/perfect.csv"));
}

TEST_F(Cli, EvalListsMissingFiles) {
  const std::string pred = root_ + "/partial";
  fs::copy(root_ + "/data", pred, fs::copy_options::recursive);
  const std::string name = fs::path(scene(1)).filename().string();
  fs::remove(pred + "/" + name + "/depth_2.bin");
  const CliResult r = run("eval --pred " + pred + " --gt " + root_ + "/data --tasks depth");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("depth_2.bin"), std::string::npos) << r.output;
  EXPECT_EQ(run("eval --pred " + pred + " --gt " + root_ + "/data --tasks flight").code, 1);
}

TEST_F(Cli, RenderOfEmptyCloudIsBackground) {
  const std::string infer = root_ + "/infer_render";
  ASSERT_EQ(run("infer --ckpt " + root_ + "/run/final --images " + scene(0) + " --out " + infer).code, 0);
  const CliResult full = run("render --cloud " + infer + "/cloud.bin --camera " + infer + "/cloud_cameras.json --out " +
                       root_ + "/full.png");
  ASSERT_EQ(full.code, 0) << full.output;

  // A cloud file with zero records.
  const std::string empty = root_ + "/empty.bin";
  {
    std::ofstream f(empty, std::ios::binary);
    const std::uint32_t header[2] = {0x31435347u, 0u};
    f.write(reinterpret_cast<const char*>(header), sizeof(header));
  }
  const CliResult r = run("render --cloud " + empty + " --camera " + scene(0) + "/cameras.json --background 0.2 0.4 0.6 --out " +
                    root_ + "/empty.png");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto img = promptrecon::read_png(root_ + "/empty.png");
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j) {
      EXPECT_NEAR(img.at(i, j, 0), 0.2f, 0.5f / 255.0f);
      EXPECT_NEAR(img.at(i, j, 2), 0.6f, 0.5f / 255.0f);
    }
  EXPECT_EQ(run("render --cloud " + empty + " --camera " + scene(0) + "/cameras.json --view 9 --out " + root_ +
                "/x.png")
                .code,
            2);
}
