#pragma once

// Deterministic raycast scenes with exact ground truth, scene persistence and
// the multi-resolution sampler used by the curriculum.
//
// Dataset layout:
//   root/scene_<seed>/{view_<i>.png, depth_<i>.bin, normal_<i>.bin,
//                      pointmap_<i>.bin, cameras.json, manifest.json}

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptrecon/geomcore.hpp"

namespace promptrecon {

struct SceneSpec {
  int views = 4;
  int height = 64;
  int width = 64;
  int min_objects = 1;
  int max_objects = 4;
  double orbit_radius_min = 1.8;
  double orbit_radius_max = 2.4;
  double arc_step_deg_min = 12.0;
  double arc_step_deg_max = 25.0;
  double fov_deg_min = 50.0;
  double fov_deg_max = 70.0;
  int max_retries = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

/// One multi-view scene. Depth is camera z-depth, normals are in each view's
/// camera frame and face the camera, point maps are in the first camera's
/// frame. All distances are in scene units.
struct SceneSample {
  std::vector<Grid<float>> images;     // H x W x 3 in [0, 1]
  std::vector<Grid<float>> depths;     // H x W
  std::vector<Grid<float>> normals;    // H x W x 3
  std::vector<Grid<float>> pointmaps;  // H x W x 3
  std::vector<Mask> valid;             // H x W
  CameraSet cams;
  std::uint64_t seed = 0;
  SceneSpec spec;

  std::size_t views() const { return images.size(); }
  int height() const { return images.empty() ? 0 : images.front().height; }
  int width() const { return images.empty() ? 0 : images.front().width; }
};

/// Pure function of (seed, spec). Throws ConfigError when no valid camera
/// placement is found within spec.max_retries attempts.
SceneSample generate_scene(std::uint64_t seed, const SceneSpec& spec);

struct ResolutionPolicy {
  double min_pixels = 100000.0;
  double max_pixels = 250000.0;
  double aspect_min = 0.5;  // H / W
  double aspect_max = 2.0;
  double stage_multiplier = 1.0;
  int patch = 16;

  void validate() const;
  /// Every (H, W) multiple of the patch size inside the scaled bounds.
  std::vector<std::pair<int, int>> admissible() const;
};

/// Uniform draw over the admissible resolutions. Throws ConfigError when the
/// bounds admit none.
std::pair<int, int> sample_resolution(const ResolutionPolicy& policy, std::mt19937_64& rng);

void write_scene(const SceneSample& sample, const std::string& dir);
/// Throws DataError naming the missing file or manifest field.
SceneSample read_scene(const std::string& dir);

std::string scene_dir_name(std::uint64_t seed);
/// Sorted scene directories below root.
std::vector<std::string> list_scenes(const std::string& root);

}  // namespace promptrecon
