#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "promptrecon/config.hpp"
#include "promptrecon/errors.hpp"

using namespace promptrecon;
namespace fs = std::filesystem;

TEST(Config, DefaultsValidateAndDescribeCurriculum) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  const auto t = c.train();
  ASSERT_EQ(t.stages.size(), 3u);
  EXPECT_TRUE(t.stages[0].heads.point && t.stages[0].heads.depth && t.stages[0].heads.camera);
  EXPECT_FALSE(t.stages[0].heads.normal);
  EXPECT_TRUE(t.stages[1].heads.normal);
  EXPECT_TRUE(t.stages[2].heads.gs);
  EXPECT_FALSE(t.stages[2].frozen.empty());
  const auto o = c.optim();
  EXPECT_DOUBLE_EQ(o.lr_patch, 2e-5);
  EXPECT_DOUBLE_EQ(o.lr_core, 1e-4);
  EXPECT_DOUBLE_EQ(o.lr_new, 2e-4);
}

TEST(Config, OverridesByDottedKey) {
  RunConfig c;
  c.set("optim.lr_scale=2.5");
  c.set("curriculum.stages.1.epochs=7");
  c.set("curriculum.stages.0.heads=[\"depth\"]");
  c.set("model.prior_embedding=dense");
  EXPECT_DOUBLE_EQ(c.optim().lr_scale, 2.5);
  EXPECT_EQ(c.train().stages[1].epochs, 7);
  EXPECT_FALSE(c.train().stages[0].heads.point);
  EXPECT_EQ(c.model().prior_embedding, PriorEmbedding::kDense);
  // Integers are accepted for float keys, not the other way round.
  c.set("optim.lr_scale=3");
  EXPECT_DOUBLE_EQ(c.optim().lr_scale, 3.0);
  EXPECT_THROW(c.set("train.log_every=1.5"), ConfigError);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  RunConfig c;
  EXPECT_THROW(c.set("optim.nope=1"), ConfigError);
  EXPECT_THROW(c.set("no_equals_sign"), ConfigError);
  EXPECT_THROW(c.set("curriculum.stages.9.epochs=1"), ConfigError);
  EXPECT_THROW(c.set("optim.lr_core=\"fast\""), ConfigError);
  c.set("priors.dropout_p=1.5");
  EXPECT_THROW(c.validate(), ConfigError);
  RunConfig d;
  d.set("curriculum.stages.2.frozen=[\"engine\"]");
  EXPECT_THROW(d.validate(), ConfigError);
  RunConfig e;
  e.set("curriculum.stages.0.heads=[\"wings\"]");
  EXPECT_THROW(e.train(), ConfigError);
}

TEST(Config, MergeFileAndSaveRoundTrip) {
  const auto dir = fs::temp_directory_path() / ("pr_cfg_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "run.json");
    f << R"({"seed": 42, "gs": {"voxel": 0.05}, "curriculum": {"stages": [{"name": "only", "epochs": 3}]}})";
  }
  RunConfig c;
  c.merge_file((dir / "run.json").string());
  EXPECT_EQ(c.train().seed, 42u);
  EXPECT_DOUBLE_EQ(c.gs().voxel, 0.05);
  ASSERT_EQ(c.train().stages.size(), 1u);
  EXPECT_EQ(c.train().stages[0].name, "only");
  c.save((dir / "saved.json").string());
  RunConfig d;
  d.merge_file((dir / "saved.json").string());
  EXPECT_EQ(c.tree(), d.tree());
  {
    std::ofstream f(dir / "broken.json");
    f << "{ not json";
  }
  EXPECT_THROW(d.merge_file((dir / "broken.json").string()), ConfigError);
  EXPECT_THROW(d.merge_file((dir / "missing.json").string()), ConfigError);
  fs::remove_all(dir);
}

TEST(Config, HeadNames) {
  const auto h = parse_heads({"point", "gs"});
  EXPECT_TRUE(h.point && h.gs && !h.depth);
  EXPECT_EQ(head_names(h), (std::vector<std::string>{"point", "gs"}));
  EXPECT_THROW(parse_heads({"tail"}), ConfigError);
}
