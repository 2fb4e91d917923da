#pragma once

// Per-pixel Gaussian clouds: construction from predicted depth and
// attributes, voxel merging, a differentiable alpha-compositing renderer, and
// context/target view selection for novel-view supervision.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "promptrecon/geomcore.hpp"
#include "promptrecon/heads.hpp"

namespace promptrecon {

struct GaussianCloud {
  torch::Tensor means;        // [G, 3]
  torch::Tensor quats;        // [G, 4] (w, x, y, z), world frame
  torch::Tensor scales;       // [G, 3]
  torch::Tensor opacity;      // [G]
  torch::Tensor colors;       // [G, 3] DC color in [0, 1]
  torch::Tensor source_view;  // [G] int64

  std::int64_t size() const { return means.defined() ? means.size(0) : 0; }
  static GaussianCloud empty(const torch::TensorOptions& opts);
  GaussianCloud index_select(const torch::Tensor& ids) const;
  GaussianCloud detached() const;
};

/// Rotation matrices for [G, 4] quaternions (normalized internally).
torch::Tensor quat_to_rotmat(const torch::Tensor& q);
/// Hamilton product of [.., 4] quaternions.
torch::Tensor quat_multiply(const torch::Tensor& a, const torch::Tensor& b);

/// One Gaussian per pixel with positive finite depth, back-projected with
/// `cams`. attrs and depths are indexed by position in `view_ids`; cams and
/// source_view use the original view index. Per-pixel orientations are taken
/// in the camera frame and rotated into the world frame.
GaussianCloud build_cloud(const torch::Tensor& gs_depth, const GaussianAttributes& attrs, const CameraSet& cams,
                          const std::vector<int>& view_ids, const torch::Tensor& valid = {});

/// The cameras used to place Gaussians: ground truth unless
/// use_predicted_cameras is set.
const CameraSet& cloud_cameras(const CameraSet& ground_truth, const CameraSet& predicted, bool use_predicted_cameras);

/// Merge Gaussians sharing floor(center / voxel): opacity-weighted mean of
/// center, scale and color; orientation of the most opaque member; opacity of
/// the most opaque member. Output is ordered by voxel key and differentiable.
GaussianCloud voxel_prune(const GaussianCloud& cloud, double voxel);

struct RenderOptions {
  double near = 0.01;
  /// Composite contributions below this alpha are skipped.
  double min_alpha = 1.0 / 255.0;
  /// Screen footprint radius in standard deviations; 0 evaluates every pixel.
  double radius_sigma = 3.5;
  double max_alpha = 0.99;
};

struct RenderOutput {
  torch::Tensor image;  // [3, H, W]
  torch::Tensor depth;  // [H, W], alpha-normalized expected depth, 0 where alpha = 0
  torch::Tensor alpha;  // [H, W]
};

/// Projected 2D Gaussians in pixel units.
struct Projected {
  torch::Tensor ids;     // [K] indices into the cloud of the kept Gaussians
  torch::Tensor means2d; // [K, 2] (u, v)
  torch::Tensor cov2d;   // [K, 3] (a, b, c) of [[a, b], [b, c]]
  torch::Tensor conics;  // [K, 3] inverse covariance, same layout
  torch::Tensor depths;  // [K]
};

/// Local-affine projection J W Sigma W^T J^T. Gaussians nearer than
/// opts.near are culled.
Projected project_gaussians(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& intr, double near);

/// Front-to-back compositing in depth order over `background`.
RenderOutput render(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& intr,
                    const std::array<double, 3>& background = {0.0, 0.0, 0.0}, const RenderOptions& opts = {});

/// Differentiable rasterization of already projected Gaussians.
RenderOutput rasterize(const torch::Tensor& means2d, const torch::Tensor& conics, const torch::Tensor& opacity,
                       const torch::Tensor& colors, const torch::Tensor& depths, int height, int width,
                       const std::array<double, 3>& background, const RenderOptions& opts);

struct ViewSplit {
  std::vector<int> context_ids;
  std::vector<int> target_ids;
  double overlap_score = 0.0;
};

/// Fraction of valid target pixels whose ground-truth point lands inside
/// some context view on a pixel with valid depth.
double split_overlap(const std::vector<Grid<float>>& depths, const CameraSet& cams, const std::vector<int>& context,
                     const std::vector<int>& target);

/// K random partitions with `context_count` context views (0 = ceil(N / 2));
/// the best mean overlap wins, ties go to the earliest candidate.
ViewSplit select_split(const std::vector<Grid<float>>& depths, const CameraSet& cams, int K, std::mt19937_64& rng,
                       int context_count = 0);

struct VisibilityMask {
  Mask mask;
  bool missing_depth = false;
};

/// A target pixel is visible when its back-projected point reprojects into a
/// context view whose depth there agrees within `rel_tol`.
VisibilityMask novel_view_mask(const std::optional<Grid<float>>& target_depth, const Pose& target_pose,
                               const Intrinsics& target_intr, const std::vector<Grid<float>>& context_depths,
                               const std::vector<Pose>& context_poses, const std::vector<Intrinsics>& context_intr,
                               double rel_tol = 0.03);

// Binary cloud: uint32 magic "GSC1", uint32 count, then count records of 17
// float32 (center 3, quat 4, scale 3, opacity 1, color 3, pad 3). The JSON
// sidecar <path>.json carries {count, voxel_size, config}.
inline constexpr std::uint32_t kCloudMagic = 0x31435347;

void write_cloud(const GaussianCloud& cloud, const std::string& path, const nlohmann::json& sidecar = {});
/// Throws DataError on a missing file, bad magic or truncated payload.
GaussianCloud read_cloud(const std::string& path);

}  // namespace promptrecon
