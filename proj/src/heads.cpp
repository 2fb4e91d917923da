#include "promptrecon/heads.hpp"

#include <cmath>

#include "promptrecon/backbone.hpp"
#include "promptrecon/errors.hpp"

namespace F = torch::nn::functional;

namespace promptrecon {

namespace {

torch::nn::Conv2d conv3x3(int in, int out, bool bias = true) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1).bias(bias));
}

torch::nn::Conv2d conv1x1(int in, int out) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)); }

torch::Tensor resample(const torch::Tensor& x, std::vector<std::int64_t> size) {
  if (x.size(2) == size[0] && x.size(3) == size[1]) return x;
  return F::interpolate(x, F::InterpolateFuncOptions().size(size).mode(torch::kBilinear).align_corners(true));
}

}  // namespace

DenseKind parse_dense_kind(const std::string& s) {
  if (s == "point") return DenseKind::kPoint;
  if (s == "depth") return DenseKind::kDepth;
  if (s == "normal") return DenseKind::kNormal;
  if (s == "gs") return DenseKind::kGaussian;
  throw ConfigError("unknown dense head kind '" + s + "'");
}

int dense_out_channels(DenseKind kind, int gs_feature_dim) {
  switch (kind) {
    case DenseKind::kPoint: return 4;   // xyz + confidence
    case DenseKind::kDepth: return 2;   // depth + confidence
    case DenseKind::kNormal: return 3;
    case DenseKind::kGaussian: return 2 + gs_feature_dim;  // depth + confidence + features
  }
  throw ConfigError("unknown dense head kind");
}

ResidualConvUnitImpl::ResidualConvUnitImpl(int features) {
  conv1 = register_module("conv1", conv3x3(features, features));
  conv2 = register_module("conv2", conv3x3(features, features));
}

torch::Tensor ResidualConvUnitImpl::forward(const torch::Tensor& x) {
  return x + conv2->forward(torch::gelu(conv1->forward(torch::gelu(x))));
}

FusionBlockImpl::FusionBlockImpl(int features) {
  rcu1 = register_module("rcu1", ResidualConvUnit(features));
  rcu2 = register_module("rcu2", ResidualConvUnit(features));
  out_conv = register_module("out_conv", conv1x1(features, features));
}

torch::Tensor FusionBlockImpl::forward(const torch::Tensor& path, const torch::Tensor& skip,
                                       std::vector<std::int64_t> size) {
  torch::Tensor x = path;
  if (skip.defined()) x = x + rcu1->forward(skip);
  x = rcu2->forward(x);
  return out_conv->forward(resample(x, std::move(size)));
}

DPTHeadImpl::DPTHeadImpl(int token_dim, int patch, const DPTConfig& cfg, int out_channels) : patch_(patch) {
  norms = register_module("norms", torch::nn::ModuleList());
  projects = register_module("projects", torch::nn::ModuleList());
  resize = register_module("resize", torch::nn::ModuleList());
  layer_rn = register_module("layer_rn", torch::nn::ModuleList());
  fusion = register_module("fusion", torch::nn::ModuleList());
  const auto& c = cfg.channels;
  for (int i = 0; i < 4; ++i) {
    norms->push_back(torch::nn::LayerNorm(torch::nn::LayerNormOptions({token_dim})));
    projects->push_back(conv1x1(token_dim, c[i]));
    layer_rn->push_back(conv3x3(c[i], cfg.features, false));
    fusion->push_back(FusionBlock(cfg.features));
  }
  resize->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(c[0], c[0], 4).stride(4)));
  resize->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(c[1], c[1], 2).stride(2)));
  resize->push_back(torch::nn::Identity());
  resize->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c[3], c[3], 3).stride(2).padding(1)));
  head1 = register_module("head1", conv3x3(cfg.features, cfg.features / 2));
  head2 = register_module("head2", conv3x3(cfg.features / 2, cfg.head_channels));
  head3 = register_module("head3", conv1x1(cfg.head_channels, out_channels));
}

torch::Tensor DPTHeadImpl::forward(const std::vector<torch::Tensor>& layers, int hp, int wp, int height, int width) {
  if (layers.size() != 4) throw ShapeError("dense head expects four token layers");
  std::vector<torch::Tensor> rn;
  for (int i = 0; i < 4; ++i) {
    const torch::Tensor& t = layers[i];
    if (t.dim() != 3 || t.size(1) != static_cast<std::int64_t>(hp) * wp) {
      throw ShapeError("dense head token grid does not match Hp*Wp");
    }
    auto x = norms[i]->as<torch::nn::LayerNorm>()->forward(t);
    x = x.transpose(1, 2).reshape({t.size(0), t.size(2), hp, wp});
    x = projects[i]->as<torch::nn::Conv2d>()->forward(x);
    if (i == 0) x = resize[0]->as<torch::nn::ConvTranspose2d>()->forward(x);
    if (i == 1) x = resize[1]->as<torch::nn::ConvTranspose2d>()->forward(x);
    if (i == 3) x = resize[3]->as<torch::nn::Conv2d>()->forward(x);
    rn.push_back(layer_rn[i]->as<torch::nn::Conv2d>()->forward(x));
  }
  auto size_of = [](const torch::Tensor& t) { return std::vector<std::int64_t>{t.size(2), t.size(3)}; };
  auto path = fusion[3]->as<FusionBlock>()->forward(rn[3], torch::Tensor(), size_of(rn[2]));
  path = fusion[2]->as<FusionBlock>()->forward(path, rn[2], size_of(rn[1]));
  path = fusion[1]->as<FusionBlock>()->forward(path, rn[1], size_of(rn[0]));
  path = fusion[0]->as<FusionBlock>()->forward(path, rn[0], {2 * rn[0].size(2), 2 * rn[0].size(3)});
  auto x = head1->forward(path);
  x = resample(x, {height, width});
  x = torch::gelu(head2->forward(x));
  return head3->forward(x);
}

torch::Tensor confidence_activation(const torch::Tensor& raw) { return 1.0 + F::softplus(raw); }

torch::Tensor normalize_normals(const torch::Tensor& raw) {
  return raw / raw.pow(2).sum(1, true).clamp_min(1e-24).sqrt();
}

CameraHeadImpl::CameraHeadImpl(int token_dim, int heads, int depth, double mlp_ratio) {
  norm_in = register_module("norm_in", torch::nn::LayerNorm(torch::nn::LayerNormOptions({token_dim})));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < depth; ++i) blocks->push_back(AttentionBlock(token_dim, heads, mlp_ratio));
  norm_out = register_module("norm_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({token_dim})));
  readout = register_module("readout", torch::nn::Linear(token_dim, 9));
  torch::NoGradGuard guard;
  readout->weight.mul_(0.1);
  readout->bias.zero_();
  readout->bias[0] = 1.0;
  // softplus(0.4328) ~= 0.9, a typical normalized focal length.
  readout->bias[7] = 0.4328;
  readout->bias[8] = 0.4328;
}

torch::Tensor CameraHeadImpl::forward(const torch::Tensor& cam_tokens) {
  if (cam_tokens.dim() != 2) throw ShapeError("camera head expects [N, D] tokens");
  auto x = norm_in->forward(cam_tokens).unsqueeze(0);
  for (const auto& b : *blocks) x = b->as<AttentionBlock>()->forward(x);
  const auto raw = readout->forward(norm_out->forward(x.squeeze(0)));  // [N, 9]
  const auto n = raw.size(0);
  const auto quat = raw.narrow(1, 0, 4);
  const auto q = quat / quat.pow(2).sum(1, true).clamp_min(1e-24).sqrt();
  const auto t = raw.narrow(1, 4, 3);
  const auto focal = F::softplus(raw.narrow(1, 7, 2));
  auto pose = torch::cat({q, t}, 1);
  auto ref = torch::zeros({1, 7}, raw.options());
  ref.index_put_({0, 0}, 1.0);
  pose = torch::cat({ref, pose.narrow(0, 1, n - 1)}, 0);
  return torch::cat({pose, focal}, 1);
}

torch::Tensor blend_gaussian_color(const torch::Tensor& fusion, const torch::Tensor& pixels, const torch::Tensor& delta) {
  const auto w = fusion.unsqueeze(1);
  return w * pixels + (1.0 - w) * torch::sigmoid(delta);
}

GaussianAttrHeadImpl::GaussianAttrHeadImpl(int feature_dim, double max_scale) : max_scale_(max_scale) {
  conv1 = register_module("conv1", conv3x3(feature_dim + 3, 32));
  conv2 = register_module("conv2", conv3x3(32, 32));
  out = register_module("out", conv1x1(32, 12));
  torch::NoGradGuard guard;
  out->weight.mul_(0.1);
  out->bias.zero_();
  out->bias[0] = 2.0;   // opacity ~0.88
  out->bias[1] = 1.0;   // quaternion w
  for (int k = 5; k < 8; ++k) out->bias[k] = -1.5;  // scale ~0.18 s_max
  out->bias[11] = 2.0;  // fusion weight ~0.88
}

GaussianAttributes GaussianAttrHeadImpl::forward(const torch::Tensor& features, const torch::Tensor& images) {
  if (features.size(0) != images.size(0) || features.size(2) != images.size(2) || features.size(3) != images.size(3)) {
    throw ShapeError("Gaussian features and images disagree in shape");
  }
  auto x = torch::gelu(conv1->forward(torch::cat({features, images}, 1)));
  x = torch::gelu(conv2->forward(x));
  const auto raw = out->forward(x);
  GaussianAttributes g;
  g.opacity = torch::sigmoid(raw.select(1, 0));
  const auto q = raw.narrow(1, 1, 4);
  g.rotation = q / q.pow(2).sum(1, true).clamp_min(1e-24).sqrt();
  g.scale = max_scale_ * torch::sigmoid(raw.narrow(1, 5, 3));
  g.delta_color = raw.narrow(1, 8, 3);
  g.fusion = torch::sigmoid(raw.select(1, 11));
  g.color = blend_gaussian_color(g.fusion, images, g.delta_color);
  return g;
}

}  // namespace promptrecon
