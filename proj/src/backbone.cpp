#include "promptrecon/backbone.hpp"

#include <cmath>

#include "promptrecon/errors.hpp"

namespace F = torch::nn::functional;

namespace promptrecon {

void BackboneConfig::validate() const {
  if (depth < 1) throw ConfigError("backbone depth must be >= 1");
  if (token_dim < 1 || heads < 1 || token_dim % heads != 0) {
    throw ConfigError("token_dim must be a positive multiple of the head count");
  }
  if (patch < 1) throw ConfigError("patch_size must be positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
  if (max_grid < 1) throw ConfigError("max_grid must be positive");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"depth", depth}, {"token_dim", token_dim}, {"heads", heads},
          {"patch_size", patch}, {"mlp_ratio", mlp_ratio}, {"max_grid", max_grid}};
}

PatchEmbedImpl::PatchEmbedImpl(int token_dim, int patch, int max_grid) : patch_(patch) {
  proj = register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, token_dim, patch).stride(patch)));
  pos_embed = register_parameter("pos_embed", torch::randn({1, token_dim, max_grid, max_grid}) * 0.02);
}

torch::Tensor PatchEmbedImpl::positional(int hp, int wp) {
  if (hp == pos_embed.size(2) && wp == pos_embed.size(3)) return pos_embed;
  return F::interpolate(pos_embed, F::InterpolateFuncOptions()
                                       .size(std::vector<std::int64_t>{hp, wp})
                                       .mode(torch::kBilinear)
                                       .align_corners(true));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("patchify expects images of shape [N, 3, H, W]");
  if (images.size(2) % patch_ != 0 || images.size(3) % patch_ != 0) {
    throw ShapeError("image size " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                     " is not divisible by patch size " + std::to_string(patch_));
  }
  const int hp = static_cast<int>(images.size(2) / patch_), wp = static_cast<int>(images.size(3) / patch_);
  const torch::Tensor x = proj->forward(images) + positional(hp, wp);  // [N, D, Hp, Wp]
  return x.flatten(2).transpose(1, 2);
}

AttentionBlockImpl::AttentionBlockImpl(int dim, int heads, double mlp_ratio) : heads_(heads) {
  const int hidden = static_cast<int>(std::lround(dim * mlp_ratio));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const auto B = x.size(0), L = x.size(1), D = x.size(2);
  const auto dh = D / heads_;
  auto qkv_out = qkv->forward(norm1->forward(x)).reshape({B, L, 3, heads_, dh}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0], k = qkv_out[1], v = qkv_out[2];  // [B, h, L, dh]
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh)), -1);
  auto h = torch::matmul(attn, v).transpose(1, 2).reshape({B, L, D});
  auto y = x + proj->forward(h);
  return y + fc2->forward(torch::gelu(fc1->forward(norm2->forward(y))));
}

torch::Tensor BackboneOutput::camera_tokens() const { return tokens.select(1, 0); }

torch::Tensor BackboneOutput::patch_tokens(std::size_t layer) const {
  return layers.at(layer).narrow(1, 2, layers.at(layer).size(1) - 2);
}

BackboneImpl::BackboneImpl(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  frame_blocks = register_module("frame_blocks", torch::nn::ModuleList());
  global_blocks = register_module("global_blocks", torch::nn::ModuleList());
  for (int i = 0; i < cfg.depth; ++i) {
    frame_blocks->push_back(AttentionBlock(cfg.token_dim, cfg.heads, cfg.mlp_ratio));
    global_blocks->push_back(AttentionBlock(cfg.token_dim, cfg.heads, cfg.mlp_ratio));
  }
  reference_embed = register_parameter("reference_embed", torch::randn({cfg.token_dim}) * 0.02);
}

BackboneOutput BackboneImpl::forward(const TokenGrid& grid) {
  torch::Tensor x = grid.sequence();  // [N, S, D]
  if (x.size(2) != cfg_.token_dim) {
    throw ShapeError("token width " + std::to_string(x.size(2)) + " does not match backbone width " +
                     std::to_string(cfg_.token_dim));
  }
  const auto N = x.size(0), S = x.size(1), D = x.size(2);
  // Reference flag on every token of view 0.
  const torch::Tensor flag = torch::cat({torch::ones({1, 1, 1}, x.options()), torch::zeros({N - 1, 1, 1}, x.options())}, 0);
  x = x + flag * reference_embed.view({1, 1, D});

  BackboneOutput out;
  out.hp = grid.hp;
  out.wp = grid.wp;
  for (int i = 0; i < cfg_.depth; ++i) {
    x = frame_blocks[i]->as<AttentionBlock>()->forward(x);
    x = global_blocks[i]->as<AttentionBlock>()->forward(x.reshape({1, N * S, D})).reshape({N, S, D});
    out.layers.push_back(x);
  }
  out.tokens = x;
  return out;
}

}  // namespace promptrecon
