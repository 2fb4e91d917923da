#pragma once

// Optional per-view priors (pose, calibrated intrinsics, depth), their token
// encoders, and assembly of the prompted token sequence
//   [camera token, intrinsics token, image tokens + depth tokens].
// An absent prior always contributes exact zeros.

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "promptrecon/geomcore.hpp"

namespace promptrecon {

enum class PriorEmbedding { kSingleToken, kDense };
PriorEmbedding parse_prior_embedding(const std::string& s);
std::string to_string(PriorEmbedding e);

enum PriorModality : int { kPosePrior = 0, kIntrinsicsPrior = 1, kDepthPrior = 2 };

/// Per-view keep flags, indexed by PriorModality.
struct PriorMask {
  std::vector<std::array<bool, 3>> keep;

  static PriorMask all(std::size_t views, bool value);
  bool any(PriorModality m) const;
};

/// Each modality is kept with probability 1 - p_drop. With per_view false the
/// draw is made once per modality and shared by every view.
PriorMask sample_prior_mask(double p_drop, std::mt19937_64& rng, std::size_t views, bool per_view = false);

struct PriorBundle {
  std::vector<std::optional<Pose>> poses;  // world-to-camera, arbitrary world frame
  std::vector<std::optional<Intrinsics>> intrinsics;
  std::vector<std::optional<Grid<float>>> depths;  // raw metric depth; <= 0 is invalid
  bool depths_normalized = false;  // true when depths already hold min-max values

  static PriorBundle none(std::size_t views);
  static PriorBundle full(const CameraSet& cams, const std::vector<Grid<float>>& depths);

  std::size_t views() const { return poses.size(); }
  bool has(PriorModality m, std::size_t view) const;
  /// Copy with every prior whose keep flag is false removed.
  PriorBundle masked(const PriorMask& mask) const;
  PriorBundle select(const std::vector<int>& view_ids) const;
  void validate(int height, int width) const;
};

/// 7-vector [q(4); t(3)] for one view of a normalized camera set.
/// Throws GeometryError when the set carries no normalization record.
std::array<double, 7> pose_token_input(const CameraSet& normalized, std::size_t view);

/// (fx / W, fy / H, cx / W, cy / H).
std::array<double, 4> intrinsics_token_input(const Intrinsics& intr);

/// Min-max normalization to [0, 1] over valid pixels. Invalid pixels map to 0.
/// Returns nullopt when no pixel is valid.
std::optional<Grid<float>> normalize_depth_prior(const Grid<float>& depth);

/// Normalized camera set built from the views that carry a pose prior,
/// expressed relative to the first such view. Views without a pose prior get
/// an identity placeholder and are reported in `present`.
struct PosePriorFrame {
  CameraSet normalized;
  std::vector<bool> present;
};
std::optional<PosePriorFrame> pose_prior_frame(const PriorBundle& priors, int height, int width);

struct TokenGrid {
  torch::Tensor cam_token;     // [N, D]
  torch::Tensor intr_token;    // [N, D]
  torch::Tensor patch_tokens;  // [N, Hp*Wp, D]
  int hp = 0;
  int wp = 0;

  /// [N, 2 + Hp*Wp, D]
  torch::Tensor sequence() const;
  std::int64_t length() const { return 2 + static_cast<std::int64_t>(hp) * wp; }
};

/// Encoded priors before assembly; zeros wherever a prior is absent.
struct PromptTokens {
  torch::Tensor cam;    // [N, D]
  torch::Tensor intr;   // [N, D]
  torch::Tensor dense;  // [N, Hp*Wp, D], added to the image tokens
};

/// T_prompt = [T_cam, T_intr, T_img + T_dense]. Throws ShapeError on mismatch.
TokenGrid assemble_prompt(const torch::Tensor& img_tokens, const PromptTokens& prompt, int hp, int wp);

/// Two-layer perceptron: Linear(in, D) -> GELU -> Linear(D, D).
class TokenMLPImpl : public torch::nn::Module {
 public:
  TokenMLPImpl(int in_dim, int token_dim);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TokenMLP);

class PriorEncoderImpl : public torch::nn::Module {
 public:
  PriorEncoderImpl(int token_dim, int patch, PriorEmbedding mode);

  /// `like` supplies dtype and device. Output shapes follow the image grid.
  PromptTokens forward(const PriorBundle& priors, int height, int width, const torch::Tensor& like);

  torch::Tensor encode_pose(const std::array<double, 7>& input, const torch::Tensor& like);
  torch::Tensor encode_intrinsics(const std::array<double, 4>& input, const torch::Tensor& like);
  /// [Hp*Wp, D] tokens for one normalized depth map.
  torch::Tensor encode_depth(const Grid<float>& normalized_depth, const torch::Tensor& like);

  PriorEmbedding mode() const { return mode_; }
  int token_dim() const { return token_dim_; }
  int patch() const { return patch_; }

 private:
  int token_dim_;
  int patch_;
  PriorEmbedding mode_;
  TokenMLP pose_mlp{nullptr};
  TokenMLP intr_mlp{nullptr};
  torch::nn::Conv2d depth_conv{nullptr};
  torch::nn::Conv2d plucker_conv{nullptr};
  torch::nn::Conv2d raymap_conv{nullptr};
};
TORCH_MODULE(PriorEncoder);

/// Plücker rays (direction, moment) for every pixel, [6, H, W].
torch::Tensor plucker_rays(const Pose& normalized_pose, const Intrinsics& intr, const torch::Tensor& like);
/// Camera-frame ray directions K^-1 [u, v, 1], [3, H, W].
torch::Tensor raymap(const Intrinsics& intr, const torch::Tensor& like);

/// Nominal intrinsics used by the dense pose embedding when no calibration is given.
Intrinsics nominal_intrinsics(int height, int width);

}  // namespace promptrecon
