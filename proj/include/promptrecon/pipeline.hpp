#pragma once

// Glue between scenes, the model and the metrics: supervision targets in the
// model frame, one-call inference with Gaussian cloud export, and the
// directory-level evaluation used by the eval command.

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "promptrecon/config.hpp"
#include "promptrecon/evalsuite.hpp"
#include "promptrecon/gsplat.hpp"
#include "promptrecon/model.hpp"
#include "promptrecon/synthdata.hpp"

namespace promptrecon {

/// Cameras re-expressed relative to view `ref` with translations divided by
/// `scale`. Intrinsics are unchanged.
CameraSet frame_cameras(const CameraSet& cams, std::size_t ref, double scale);

struct SceneTargets {
  std::vector<int> views;   // scene view indices, views[0] is the reference
  double scale = 1.0;       // alpha of the selected cameras
  CameraSet cams;           // selected views, model frame
  torch::Tensor images;     // [N, 3, H, W]
  torch::Tensor valid;      // [N, H, W] bool
  torch::Tensor depth;      // [N, H, W], model units
  torch::Tensor pointmap;   // [N, 3, H, W], model frame
  torch::Tensor normals;    // [N, 3, H, W], camera frames
  torch::Tensor camera;     // [N, 9]
};

/// Empty `views` selects every view in order. `scale` defaults to alpha of
/// the selected cameras.
SceneTargets make_targets(const SceneSample& scene, std::vector<int> views = {},
                          std::optional<double> scale = std::nullopt);

/// Ground-truth priors for the selected views, filtered by `mask`.
PriorBundle scene_priors(const SceneSample& scene, const PriorMask& mask);

/// Flips camera-frame normals [N, 3, H, W] that point away from the camera,
/// i.e. with a positive dot product against the pixel ray K^-1 (u, v, 1).
torch::Tensor orient_normals_to_camera(const torch::Tensor& normals, const std::vector<Intrinsics>& intrinsics);

struct Inference {
  Predictions pred;
  std::vector<Grid<float>> depth, gs_depth, normals, pointmap;  // model frame
  CameraSet cameras;      // camera-head output, model frame
  CameraSet cloud_cams;   // cameras used to place the Gaussians
  GaussianCloud cloud;    // pruned
};

/// Runs every head without gradients. Normals are oriented towards the
/// predicted cameras. The cloud uses `cloud_cams` when given
/// (model frame, one per view) and the predicted cameras otherwise.
Inference run_inference(ReconModel& model, const std::vector<Grid<float>>& images, const PriorBundle& priors,
                        const GsConfig& gs, const std::optional<CameraSet>& cloud_cams = std::nullopt);

/// Renders every view of `cams` from the cloud; images are H x W x 3.
std::vector<Grid<float>> render_views(const GaussianCloud& cloud, const CameraSet& cams, const GsConfig& gs,
                                      std::vector<Grid<float>>* depths = nullptr);

/// Writes depth_i.bin, gs_depth_i.bin, normal_i.bin, pointmap_i.bin,
/// view_i.png (rendered), cameras.json, cloud_cameras.json and cloud.bin.
void write_inference(const Inference& inf, const std::vector<Grid<float>>& rendered, const std::string& dir,
                     const nlohmann::json& sidecar);

inline const std::vector<std::string>& eval_tasks() {
  static const std::vector<std::string> t{"depth", "points", "normals", "cameras", "nvs"};
  return t;
}

/// Compares a prediction tree against a dataset tree (same scene_<seed>
/// layout). Throws DataError listing missing files.
MetricReport evaluate_dirs(const std::string& pred_root, const std::string& gt_root,
                           const std::vector<std::string>& tasks, DepthScaling depth_mode = DepthScaling::kVideo);

/// Adds the metrics of one scene to `report`.
void evaluate_scene(MetricReport& report, const std::string& name, const SceneSample& gt,
                    const std::vector<Grid<float>>* depth, const std::vector<Grid<float>>* pointmap,
                    const std::vector<Grid<float>>* normals, const CameraSet* cams,
                    const std::vector<Grid<float>>* rendered, DepthScaling depth_mode);

}  // namespace promptrecon
