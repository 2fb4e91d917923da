#pragma once

// Patch embedding and the alternating-attention transformer that fuses the
// prompted token sequences of all views.

#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "promptrecon/priors.hpp"

namespace promptrecon {

struct BackboneConfig {
  int depth = 4;  // frame/global block pairs
  int token_dim = 192;
  int heads = 3;
  int patch = 16;
  double mlp_ratio = 4.0;
  int max_grid = 16;  // side of the learned positional grid

  void validate() const;
  nlohmann::json to_json() const;
};

/// Learnable patch convolution plus a learned 2D positional grid, resampled
/// bilinearly to the token grid of the input.
class PatchEmbedImpl : public torch::nn::Module {
 public:
  PatchEmbedImpl(int token_dim, int patch, int max_grid);
  /// images [N, 3, H, W] in [0, 1] -> [N, Hp*Wp, D]. Throws ShapeError when
  /// H or W is not a multiple of the patch size.
  torch::Tensor forward(const torch::Tensor& images);
  torch::Tensor positional(int hp, int wp);

  torch::nn::Conv2d proj{nullptr};
  torch::Tensor pos_embed;  // [1, D, G, G]

 private:
  int patch_;
};
TORCH_MODULE(PatchEmbed);

/// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int dim, int heads, double mlp_ratio);
  /// x [B, L, D]
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int heads_;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(AttentionBlock);

struct BackboneOutput {
  torch::Tensor tokens;               // [N, 2 + Hp*Wp, D], final block output
  std::vector<torch::Tensor> layers;  // one [N, 2 + Hp*Wp, D] per block pair
  int hp = 0;
  int wp = 0;

  torch::Tensor camera_tokens() const;                  // [N, D]
  torch::Tensor patch_tokens(std::size_t layer) const;  // [N, Hp*Wp, D]
};

/// Each block pair runs frame attention inside every view's sequence, then
/// global attention over the concatenation of all views. The first view gets a
/// learned reference embedding so outputs can be expressed in its frame; no
/// other view index is encoded.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneConfig& cfg);
  BackboneOutput forward(const TokenGrid& grid);
  const BackboneConfig& config() const { return cfg_; }

  torch::Tensor reference_embed;  // [D]

 private:
  BackboneConfig cfg_;
  torch::nn::ModuleList frame_blocks{nullptr};
  torch::nn::ModuleList global_blocks{nullptr};
};
TORCH_MODULE(Backbone);

}  // namespace promptrecon
