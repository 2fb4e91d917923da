#pragma once

// The full prompted reconstruction network and its checkpoint format.
//
// Outputs live in the "model frame": the first camera's frame scaled by
// 1 / alpha, where alpha is the largest distance of a camera center from the
// centroid of all centers. Camera rows are [q(4), t(3), fx/W, fy/H].

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "promptrecon/backbone.hpp"
#include "promptrecon/heads.hpp"
#include "promptrecon/priors.hpp"

namespace promptrecon {

struct ModelConfig {
  BackboneConfig backbone;
  DPTConfig dpt;
  PriorEmbedding prior_embedding = PriorEmbedding::kSingleToken;
  int camera_head_depth = 2;
  double gs_max_scale = 0.05;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct HeadSelection {
  bool point = true;
  bool depth = true;
  bool normal = true;
  bool camera = true;
  bool gs = true;

  static HeadSelection none() { return {false, false, false, false, false}; }
};

/// Undefined tensors for heads that were not run.
struct Predictions {
  torch::Tensor pointmap;    // [N, 3, H, W]
  torch::Tensor point_conf;  // [N, H, W]
  torch::Tensor depth;       // [N, H, W]
  torch::Tensor depth_conf;  // [N, H, W]
  torch::Tensor normals;     // [N, 3, H, W]
  torch::Tensor camera;      // [N, 9]
  torch::Tensor gs_depth;    // [N, H, W]
  torch::Tensor gs_conf;     // [N, H, W]
  torch::Tensor gs_features; // [N, Cg, H, W]
  GaussianAttributes gs;
};

class ReconModelImpl : public torch::nn::Module {
 public:
  explicit ReconModelImpl(const ModelConfig& cfg);

  /// images [N, 3, H, W] in [0, 1]. Priors are optional per view and modality.
  Predictions forward(const torch::Tensor& images, const PriorBundle& priors, const HeadSelection& heads = {});

  BackboneOutput encode(const torch::Tensor& images, const PriorBundle& priors);
  Predictions decode(const BackboneOutput& tokens, const torch::Tensor& images, const HeadSelection& heads);

  const ModelConfig& config() const { return cfg_; }
  /// Backbone layers consumed by the dense heads.
  std::vector<int> dense_layer_ids() const;

  /// Copies the depth head into the Gaussian head. The output layer shares
  /// its depth and confidence channels; the feature channels keep their
  /// values.
  void warm_start_gs_head();

  PatchEmbed patch_embed{nullptr};
  PriorEncoder prior_encoder{nullptr};
  Backbone backbone{nullptr};
  DPTHead point_head{nullptr}, depth_head{nullptr}, normal_head{nullptr}, gs_head{nullptr};
  CameraHead camera_head{nullptr};
  GaussianAttrHead gs_attr{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(ReconModel);

// ---- frame conversion ------------------------------------------------------

/// alpha for a camera set (rotation and translation invariant).
double model_frame_scale(const CameraSet& cams, double eps = 1e-8);
/// Cameras rebased to view 0 with translations divided by model_frame_scale.
CameraSet to_model_frame(const CameraSet& cams);
/// Ground-truth [N, 9] camera rows in the model frame.
torch::Tensor camera_targets(const CameraSet& cams, const torch::TensorOptions& opts);
/// Decodes [N, 9] rows into poses relative to view 0; translations are
/// multiplied by `scale` and the principal point is centered.
CameraSet cameras_from_prediction(const torch::Tensor& camera, int height, int width, double scale = 1.0);

// ---- grid / tensor helpers -------------------------------------------------

/// Grids (H x W x C each) -> [N, C, H, W] float32.
torch::Tensor grids_to_tensor(const std::vector<Grid<float>>& grids);
torch::Tensor masks_to_tensor(const std::vector<Mask>& masks);  // [N, H, W] bool
/// [C, H, W] or [H, W] -> grid.
Grid<float> tensor_to_grid(const torch::Tensor& t);

// ---- checkpoints -----------------------------------------------------------

/// Named tensors plus JSON metadata. On disk: <prefix>.bin holds the raw
/// little-endian payloads back to back, <prefix>.json the manifest
/// {format_version, tensors: [{name, shape, dtype, offset, bytes}], meta}.
struct TensorArchive {
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const torch::Tensor* find(const std::string& name) const;
};

inline constexpr int kArchiveFormatVersion = 1;

/// Both files are written to temporaries and renamed into place.
void save_archive(const TensorArchive& archive, const std::string& prefix);
/// Throws DataError on missing files, version mismatch or truncation.
TensorArchive load_archive(const std::string& prefix);

/// Adds every parameter as "model.<name>" and the config under meta["model"].
void add_model_to_archive(ReconModel& model, TensorArchive& archive);
/// Copies "model.*" tensors into an existing model. Throws DataError naming
/// any missing, extra or wrongly shaped parameter.
void load_model_from_archive(ReconModel& model, const TensorArchive& archive);
/// Builds a model from meta["model"] and loads its parameters.
ReconModel model_from_archive(const TensorArchive& archive);

}  // namespace promptrecon
