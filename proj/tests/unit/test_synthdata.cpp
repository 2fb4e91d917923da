#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "promptrecon/errors.hpp"
#include "promptrecon/gridio.hpp"
#include "promptrecon/synthdata.hpp"

using namespace promptrecon;
namespace fs = std::filesystem;

namespace {

SceneSpec small_spec() {
  SceneSpec s;
  s.views = 3;
  s.height = 24;
  s.width = 32;
  return s;
}

std::string temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pr_synth_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace

TEST(SynthData, DeterministicInSeed) {
  const auto a = generate_scene(5, small_spec());
  const auto b = generate_scene(5, small_spec());
  const auto c = generate_scene(6, small_spec());
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.depths, b.depths);
  EXPECT_NE(a.images, c.images);
}

TEST(SynthData, GroundTruthIsConsistent) {
  const auto s = generate_scene(9, small_spec());
  ASSERT_EQ(s.views(), 3u);
  for (std::size_t v = 0; v < s.views(); ++v) {
    EXPECT_EQ(s.images[v].channels, 3);
    for (int i = 0; i < s.height(); ++i)
      for (int j = 0; j < s.width(); ++j) {
        if (!s.valid[v].at(i, j)) continue;
        const float d = s.depths[v].at(i, j);
        EXPECT_GT(d, 0.0f);
        // Point map (first camera frame) agrees with depth back-projection.
        const Vec3 w = unproject(j + 0.5, i + 0.5, d, s.cams.intrinsics[v], s.cams.poses[v]);
        const Vec3 p0 = s.cams.poses[0].to_camera(w);
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(s.pointmaps[v].at(i, j, c), p0[c], 1e-4);
        // Unit normals facing the camera.
        const Vec3 n(s.normals[v].at(i, j, 0), s.normals[v].at(i, j, 1), s.normals[v].at(i, j, 2));
        EXPECT_NEAR(n.norm(), 1.0, 1e-4);
        const Vec3 ray((j + 0.5 - s.cams.intrinsics[v].cx) / s.cams.intrinsics[v].fx,
                       (i + 0.5 - s.cams.intrinsics[v].cy) / s.cams.intrinsics[v].fy, 1.0);
        EXPECT_LE(n.dot(ray), 1e-6);
      }
  }
  // View 0's point map is its own camera frame: z equals depth.
  for (int i = 0; i < s.height(); ++i)
    for (int j = 0; j < s.width(); ++j)
      if (s.valid[0].at(i, j)) EXPECT_NEAR(s.pointmaps[0].at(i, j, 2), s.depths[0].at(i, j), 1e-5);
}

TEST(SynthData, ResolutionPolicyIsPatchAligned) {
  ResolutionPolicy p;
  p.stage_multiplier = 0.02;
  const auto options = p.admissible();
  ASSERT_FALSE(options.empty());
  for (auto [h, w] : options) {
    EXPECT_EQ(h % p.patch, 0);
    EXPECT_EQ(w % p.patch, 0);
    EXPECT_GE(h * w, p.min_pixels * p.stage_multiplier);
    EXPECT_LE(h * w, p.max_pixels * p.stage_multiplier);
    EXPECT_GE(static_cast<double>(h) / w, p.aspect_min);
    EXPECT_LE(static_cast<double>(h) / w, p.aspect_max);
  }
  std::mt19937_64 a(3), b(3);
  EXPECT_EQ(sample_resolution(p, a), sample_resolution(p, b));
  ResolutionPolicy bad = p;
  bad.min_pixels = 10;
  bad.max_pixels = 20;
  EXPECT_THROW(sample_resolution(bad, a), ConfigError);
}

TEST(SynthData, PersistenceRoundTrip) {
  const auto dir = temp_dir("rt");
  const auto s = generate_scene(11, small_spec());
  write_scene(s, dir + "/" + scene_dir_name(11));
  const auto scenes = list_scenes(dir);
  ASSERT_EQ(scenes.size(), 1u);
  const auto r = read_scene(scenes[0]);
  EXPECT_EQ(r.seed, 11u);
  EXPECT_EQ(r.depths, s.depths);
  EXPECT_EQ(r.normals, s.normals);
  EXPECT_EQ(r.pointmaps, s.pointmaps);
  for (std::size_t v = 0; v < s.views(); ++v) EXPECT_EQ(r.images[v], quantize_8bit(s.images[v]));
  fs::remove(scenes[0] + "/depth_1.bin");
  try {
    read_scene(scenes[0]);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("depth_1.bin"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(GridIO, FloatGridRoundTripAndCorruption) {
  const auto dir = temp_dir("grid");
  Grid<float> g(3, 5, 2);
  for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] = 0.25f * k - 1.0f;
  write_float_grid(g, dir + "/g.bin");
  EXPECT_EQ(read_float_grid(dir + "/g.bin"), g);
  {
    std::ofstream f(dir + "/bad.bin", std::ios::binary);
    f << "nonsense";
  }
  EXPECT_THROW(read_float_grid(dir + "/bad.bin"), DataError);
  EXPECT_THROW(read_float_grid(dir + "/missing.bin"), DataError);
  fs::resize_file(dir + "/g.bin", 20);
  EXPECT_THROW(read_float_grid(dir + "/g.bin"), DataError);
  fs::remove_all(dir);
}

TEST(GridIO, PngQuantization) {
  const auto dir = temp_dir("png");
  Grid<float> img(2, 2, 3);
  for (std::size_t k = 0; k < img.data.size(); ++k) img.data[k] = static_cast<float>(k) / 11.0f;
  write_png(img, dir + "/a.png");
  EXPECT_EQ(read_png(dir + "/a.png"), quantize_8bit(img));
  EXPECT_EQ(quantize_8bit(quantize_8bit(img)), quantize_8bit(img));
  fs::remove_all(dir);
}
