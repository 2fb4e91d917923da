#pragma once

// Prediction heads decoding backbone tokens into dense maps, camera
// parameters and per-pixel Gaussian attributes.

#include <array>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace promptrecon {

enum class DenseKind { kPoint, kDepth, kNormal, kGaussian };
/// "point" | "depth" | "normal" | "gs"; throws ConfigError otherwise.
DenseKind parse_dense_kind(const std::string& s);

struct DPTConfig {
  int features = 64;
  std::array<int, 4> channels{32, 64, 96, 96};
  int head_channels = 32;
  int gs_feature_dim = 16;
};

/// Raw output channels of a dense head.
int dense_out_channels(DenseKind kind, int gs_feature_dim);

class ResidualConvUnitImpl : public torch::nn::Module {
 public:
  explicit ResidualConvUnitImpl(int features);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResidualConvUnit);

class FusionBlockImpl : public torch::nn::Module {
 public:
  explicit FusionBlockImpl(int features);
  /// Fuses the coarser path with `skip` (if defined) and resamples to `size`.
  torch::Tensor forward(const torch::Tensor& path, const torch::Tensor& skip, std::vector<std::int64_t> size);

 private:
  ResidualConvUnit rcu1{nullptr}, rcu2{nullptr};
  torch::nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(FusionBlock);

/// Dense-prediction decoder: tokens from four depths are reassembled at 1/4,
/// 1/8, 1/16 and 1/32 of the input resolution, fused coarse-to-fine with
/// residual conv units and upsampled to full resolution. Produces raw
/// (pre-activation) maps.
class DPTHeadImpl : public torch::nn::Module {
 public:
  DPTHeadImpl(int token_dim, int patch, const DPTConfig& cfg, int out_channels);
  /// layers: four [N, Hp*Wp, D] tensors. Returns [N, out_channels, H, W].
  torch::Tensor forward(const std::vector<torch::Tensor>& layers, int hp, int wp, int height, int width);

 private:
  int patch_;
  torch::nn::ModuleList norms{nullptr};
  torch::nn::ModuleList projects{nullptr};
  torch::nn::ModuleList resize{nullptr};
  torch::nn::ModuleList layer_rn{nullptr};
  torch::nn::ModuleList fusion{nullptr};
  torch::nn::Conv2d head1{nullptr}, head2{nullptr}, head3{nullptr};
};
TORCH_MODULE(DPTHead);

/// Confidence parameterization 1 + softplus(raw); strictly >= 1.
torch::Tensor confidence_activation(const torch::Tensor& raw);
/// Per-pixel L2 normalization over the channel dimension of [N, 3, H, W].
torch::Tensor normalize_normals(const torch::Tensor& raw);

/// Small self-attention stack over the N camera tokens, then a linear
/// read-out to [q(4), t(3), fx/W, fy/H]. The quaternion is normalized and the
/// first view is pinned to the identity pose.
class CameraHeadImpl : public torch::nn::Module {
 public:
  CameraHeadImpl(int token_dim, int heads, int depth, double mlp_ratio);
  /// cam_tokens [N, D] -> [N, 9]
  torch::Tensor forward(const torch::Tensor& cam_tokens);

 private:
  torch::nn::LayerNorm norm_in{nullptr}, norm_out{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Linear readout{nullptr};
};
TORCH_MODULE(CameraHead);

struct GaussianAttributes {
  torch::Tensor opacity;      // [N, H, W] in (0, 1)
  torch::Tensor rotation;     // [N, 4, H, W] unit quaternions (w, x, y, z)
  torch::Tensor scale;        // [N, 3, H, W] in (0, s_max)
  torch::Tensor delta_color;  // [N, 3, H, W] residual DC coefficients
  torch::Tensor fusion;       // [N, H, W] in (0, 1)
  torch::Tensor color;        // [N, 3, H, W] blended DC color
};

/// w * pixel + (1 - w) * sigmoid(delta), broadcasting w over channels.
torch::Tensor blend_gaussian_color(const torch::Tensor& fusion, const torch::Tensor& pixels, const torch::Tensor& delta);

/// Convolutional fusion of the Gaussian feature map with the raw image.
class GaussianAttrHeadImpl : public torch::nn::Module {
 public:
  GaussianAttrHeadImpl(int feature_dim, double max_scale);
  GaussianAttributes forward(const torch::Tensor& features, const torch::Tensor& images);
  double max_scale() const { return max_scale_; }

 private:
  double max_scale_;
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, out{nullptr};
};
TORCH_MODULE(GaussianAttrHead);

}  // namespace promptrecon
