#include "promptrecon/priors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "promptrecon/errors.hpp"

namespace promptrecon {

PriorEmbedding parse_prior_embedding(const std::string& s) {
  if (s == "single_token") return PriorEmbedding::kSingleToken;
  if (s == "dense") return PriorEmbedding::kDense;
  throw ConfigError("prior_embedding must be 'single_token' or 'dense', got '" + s + "'");
}

std::string to_string(PriorEmbedding e) {
  return e == PriorEmbedding::kDense ? "dense" : "single_token";
}

PriorMask PriorMask::all(std::size_t views, bool value) {
  PriorMask m;
  m.keep.assign(views, {value, value, value});
  return m;
}

bool PriorMask::any(PriorModality m) const {
  return std::any_of(keep.begin(), keep.end(), [m](const auto& k) { return k[m]; });
}

PriorMask sample_prior_mask(double p_drop, std::mt19937_64& rng, std::size_t views, bool per_view) {
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ConfigError("prior dropout probability must lie in [0, 1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PriorMask m;
  m.keep.resize(views);
  if (per_view) {
    for (auto& k : m.keep)
      for (auto& flag : k) flag = u(rng) >= p_drop;
  } else {
    std::array<bool, 3> shared{};
    for (auto& flag : shared) flag = u(rng) >= p_drop;
    for (auto& k : m.keep) k = shared;
  }
  return m;
}

PriorBundle PriorBundle::none(std::size_t views) {
  PriorBundle b;
  b.poses.resize(views);
  b.intrinsics.resize(views);
  b.depths.resize(views);
  return b;
}

PriorBundle PriorBundle::full(const CameraSet& cams, const std::vector<Grid<float>>& depths) {
  if (depths.size() != cams.size()) throw ShapeError("PriorBundle::full: view count mismatch");
  PriorBundle b = none(cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) {
    b.poses[i] = cams.poses[i];
    b.intrinsics[i] = cams.intrinsics[i];
    b.depths[i] = depths[i];
  }
  return b;
}

bool PriorBundle::has(PriorModality m, std::size_t view) const {
  switch (m) {
    case kPosePrior: return poses.at(view).has_value();
    case kIntrinsicsPrior: return intrinsics.at(view).has_value();
    case kDepthPrior: return depths.at(view).has_value();
  }
  return false;
}

PriorBundle PriorBundle::masked(const PriorMask& mask) const {
  if (mask.keep.size() != views()) throw ShapeError("prior mask / view count mismatch");
  PriorBundle b = *this;
  for (std::size_t i = 0; i < views(); ++i) {
    if (!mask.keep[i][kPosePrior]) b.poses[i].reset();
    if (!mask.keep[i][kIntrinsicsPrior]) b.intrinsics[i].reset();
    if (!mask.keep[i][kDepthPrior]) b.depths[i].reset();
  }
  return b;
}

PriorBundle PriorBundle::select(const std::vector<int>& view_ids) const {
  PriorBundle b;
  b.depths_normalized = depths_normalized;
  for (int v : view_ids) {
    b.poses.push_back(poses.at(v));
    b.intrinsics.push_back(intrinsics.at(v));
    b.depths.push_back(depths.at(v));
  }
  return b;
}

void PriorBundle::validate(int height, int width) const {
  if (intrinsics.size() != poses.size() || depths.size() != poses.size()) {
    throw ShapeError("prior bundle: per-modality view counts disagree");
  }
  for (const auto& k : intrinsics) {
    if (!k) continue;
    k->validate();
    if (k->height != height || k->width != width) {
      throw ShapeError("intrinsics prior describes a " + std::to_string(k->height) + "x" + std::to_string(k->width) +
                       " image, input is " + std::to_string(height) + "x" + std::to_string(width));
    }
  }
  for (const auto& d : depths) {
    if (d && (!d->same_extent(height, width) || d->channels != 1)) {
      throw ShapeError("depth prior resolution " + std::to_string(d->height) + "x" + std::to_string(d->width) +
                       " does not match image " + std::to_string(height) + "x" + std::to_string(width));
    }
  }
}

std::array<double, 7> pose_token_input(const CameraSet& normalized, std::size_t view) {
  if (!normalized.normalization) {
    throw GeometryError("pose token requested from a camera set that was not normalized");
  }
  const Pose& p = normalized.poses.at(view);
  const Quat q = canonical_quat(p.quat);
  return {q[0], q[1], q[2], q[3], p.translation[0], p.translation[1], p.translation[2]};
}

std::array<double, 4> intrinsics_token_input(const Intrinsics& k) {
  k.validate();
  return {k.fx / k.width, k.fy / k.height, k.cx / k.width, k.cy / k.height};
}

std::optional<Grid<float>> normalize_depth_prior(const Grid<float>& depth) {
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (float d : depth.data) {
    if (std::isfinite(d) && d > 0.0f) {
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
  }
  if (!(hi >= lo)) return std::nullopt;
  Grid<float> out(depth.height, depth.width, 1, 0.0f);
  const double range = static_cast<double>(hi) - lo;
  for (std::size_t i = 0; i < depth.data.size(); ++i) {
    const float d = depth.data[i];
    if (!(std::isfinite(d) && d > 0.0f) || range <= 0.0) continue;
    out.data[i] = static_cast<float>((static_cast<double>(d) - lo) / range);
  }
  return out;
}

std::optional<PosePriorFrame> pose_prior_frame(const PriorBundle& priors, int height, int width) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < priors.views(); ++i)
    if (priors.poses[i]) ids.push_back(static_cast<int>(i));
  if (ids.empty()) return std::nullopt;
  CameraSet sub;
  for (int i : ids) {
    sub.poses.push_back(*priors.poses[i]);
    sub.intrinsics.push_back(priors.intrinsics[i] ? *priors.intrinsics[i] : nominal_intrinsics(height, width));
  }
  const CameraSet norm = normalize_camera_set(rebase_to_view(sub, 0));
  PosePriorFrame f;
  f.present.assign(priors.views(), false);
  f.normalized.poses.assign(priors.views(), Pose::identity());
  f.normalized.intrinsics.assign(priors.views(), nominal_intrinsics(height, width));
  f.normalized.normalization = norm.normalization;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    f.normalized.poses[ids[k]] = norm.poses[k];
    f.normalized.intrinsics[ids[k]] = norm.intrinsics[k];
    f.present[ids[k]] = true;
  }
  return f;
}

torch::Tensor TokenGrid::sequence() const {
  return torch::cat({cam_token.unsqueeze(1), intr_token.unsqueeze(1), patch_tokens}, 1);
}

TokenGrid assemble_prompt(const torch::Tensor& img_tokens, const PromptTokens& prompt, int hp, int wp) {
  if (img_tokens.dim() != 3) throw ShapeError("image tokens must be [N, Hp*Wp, D]");
  const auto n = img_tokens.size(0), l = img_tokens.size(1), d = img_tokens.size(2);
  if (l != static_cast<std::int64_t>(hp) * wp) throw ShapeError("image token count does not match Hp*Wp");
  if (!prompt.cam.defined() || !prompt.intr.defined() || !prompt.dense.defined()) {
    throw ShapeError("prompt tokens are incomplete");
  }
  if (prompt.cam.sizes() != torch::IntArrayRef{n, d} || prompt.intr.sizes() != torch::IntArrayRef{n, d}) {
    throw ShapeError("camera/intrinsics tokens must be [N, D] with matching N and D");
  }
  if (prompt.dense.sizes() != img_tokens.sizes()) throw ShapeError("dense prior tokens must match image tokens");
  TokenGrid g;
  g.cam_token = prompt.cam;
  g.intr_token = prompt.intr;
  g.patch_tokens = img_tokens + prompt.dense;
  g.hp = hp;
  g.wp = wp;
  return g;
}

TokenMLPImpl::TokenMLPImpl(int in_dim, int token_dim) {
  fc1 = register_module("fc1", torch::nn::Linear(in_dim, token_dim));
  fc2 = register_module("fc2", torch::nn::Linear(token_dim, token_dim));
}

torch::Tensor TokenMLPImpl::forward(const torch::Tensor& x) {
  return fc2->forward(torch::gelu(fc1->forward(x)));
}

PriorEncoderImpl::PriorEncoderImpl(int token_dim, int patch, PriorEmbedding mode)
    : token_dim_(token_dim), patch_(patch), mode_(mode) {
  depth_conv = register_module("depth_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, token_dim, patch).stride(patch)));
  if (mode == PriorEmbedding::kSingleToken) {
    pose_mlp = register_module("pose_mlp", TokenMLP(7, token_dim));
    intr_mlp = register_module("intr_mlp", TokenMLP(4, token_dim));
  } else {
    plucker_conv = register_module("plucker_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(6, token_dim, patch).stride(patch)));
    raymap_conv = register_module("raymap_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, token_dim, patch).stride(patch)));
  }
}

namespace {

torch::Tensor vec_tensor(const double* v, int n, const torch::Tensor& like) {
  return torch::from_blob(const_cast<double*>(v), {n}, torch::kFloat64).clone().to(like.options());
}

torch::Tensor grid_tensor(const Grid<float>& g, const torch::Tensor& like) {
  return torch::from_blob(const_cast<float*>(g.data.data()), {1, 1, g.height, g.width}, torch::kFloat32)
      .clone()
      .to(like.options());
}

torch::Tensor conv_tokens(torch::nn::Conv2d& conv, const torch::Tensor& img) {
  // [1, C, H, W] -> [Hp*Wp, D]
  return conv->forward(img).flatten(2).squeeze(0).transpose(0, 1);
}

}  // namespace

torch::Tensor PriorEncoderImpl::encode_pose(const std::array<double, 7>& input, const torch::Tensor& like) {
  if (!pose_mlp) throw ConfigError("pose token encoder is disabled in dense prior mode");
  return pose_mlp->forward(vec_tensor(input.data(), 7, like));
}

torch::Tensor PriorEncoderImpl::encode_intrinsics(const std::array<double, 4>& input, const torch::Tensor& like) {
  if (!intr_mlp) throw ConfigError("intrinsics token encoder is disabled in dense prior mode");
  return intr_mlp->forward(vec_tensor(input.data(), 4, like));
}

torch::Tensor PriorEncoderImpl::encode_depth(const Grid<float>& normalized_depth, const torch::Tensor& like) {
  if (normalized_depth.height % patch_ != 0 || normalized_depth.width % patch_ != 0) {
    throw ShapeError("depth prior size must be divisible by the patch size");
  }
  return conv_tokens(depth_conv, grid_tensor(normalized_depth, like));
}

PromptTokens PriorEncoderImpl::forward(const PriorBundle& priors, int height, int width, const torch::Tensor& like) {
  priors.validate(height, width);
  if (height % patch_ != 0 || width % patch_ != 0) throw ShapeError("image size must be divisible by the patch size");
  const std::size_t n = priors.views();
  const std::int64_t l = static_cast<std::int64_t>(height / patch_) * (width / patch_);
  const auto opts = like.options();
  const auto pose_frame = pose_prior_frame(priors, height, width);

  std::vector<torch::Tensor> cam, intr, dense;
  for (std::size_t i = 0; i < n; ++i) {
    torch::Tensor c = torch::zeros({token_dim_}, opts);
    torch::Tensor k = torch::zeros({token_dim_}, opts);
    std::vector<torch::Tensor> dense_terms;

    if (priors.depths[i]) {
      std::optional<Grid<float>> nd =
          priors.depths_normalized ? std::optional<Grid<float>>(*priors.depths[i]) : normalize_depth_prior(*priors.depths[i]);
      if (nd) dense_terms.push_back(encode_depth(*nd, like));
    }
    if (mode_ == PriorEmbedding::kSingleToken) {
      if (pose_frame && pose_frame->present[i]) c = encode_pose(pose_token_input(pose_frame->normalized, i), like);
      if (priors.intrinsics[i]) k = encode_intrinsics(intrinsics_token_input(*priors.intrinsics[i]), like);
    } else {
      if (pose_frame && pose_frame->present[i]) {
        const Intrinsics intr = priors.intrinsics[i] ? *priors.intrinsics[i] : nominal_intrinsics(height, width);
        dense_terms.push_back(conv_tokens(plucker_conv, plucker_rays(pose_frame->normalized.poses[i], intr, like).unsqueeze(0)));
      }
      if (priors.intrinsics[i]) {
        dense_terms.push_back(conv_tokens(raymap_conv, raymap(*priors.intrinsics[i], like).unsqueeze(0)));
      }
    }
    torch::Tensor dn;
    if (dense_terms.empty()) {
      dn = torch::zeros({l, token_dim_}, opts);
    } else {
      dn = dense_terms.front();
      for (std::size_t t = 1; t < dense_terms.size(); ++t) dn = dn + dense_terms[t];
    }
    cam.push_back(c);
    intr.push_back(k);
    dense.push_back(dn);
  }
  return {torch::stack(cam), torch::stack(intr), torch::stack(dense)};
}

Intrinsics nominal_intrinsics(int height, int width) {
  Intrinsics k;
  k.width = width;
  k.height = height;
  // 60 degree horizontal field of view.
  k.fx = k.fy = 0.5 * width / std::tan(M_PI / 6.0);
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

torch::Tensor raymap(const Intrinsics& intr, const torch::Tensor& like) {
  const int H = intr.height, W = intr.width;
  std::vector<double> buf(static_cast<std::size_t>(3) * H * W);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * W + j;
      buf[p] = (j + 0.5 - intr.cx) / intr.fx;
      buf[static_cast<std::size_t>(H) * W + p] = (i + 0.5 - intr.cy) / intr.fy;
      buf[2 * static_cast<std::size_t>(H) * W + p] = 1.0;
    }
  }
  return torch::from_blob(buf.data(), {3, H, W}, torch::kFloat64).clone().to(like.options());
}

torch::Tensor plucker_rays(const Pose& pose, const Intrinsics& intr, const torch::Tensor& like) {
  const int H = intr.height, W = intr.width;
  const Mat3 Rt = pose.rotation().transpose();
  const Vec3 o = pose.center();
  std::vector<double> buf(static_cast<std::size_t>(6) * H * W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const Vec3 d = (Rt * Vec3((j + 0.5 - intr.cx) / intr.fx, (i + 0.5 - intr.cy) / intr.fy, 1.0)).normalized();
      const Vec3 m = o.cross(d);
      const std::size_t p = static_cast<std::size_t>(i) * W + j;
      for (int k = 0; k < 3; ++k) {
        buf[k * plane + p] = d[k];
        buf[(3 + k) * plane + p] = m[k];
      }
    }
  }
  return torch::from_blob(buf.data(), {6, H, W}, torch::kFloat64).clone().to(like.options());
}

}  // namespace promptrecon
