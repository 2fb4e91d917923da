#pragma once

// Training objective. Every term takes batched tensors:
//   dense maps [N, C, H, W] (or [N, H, W] for one channel), masks [N, H, W]
//   bool, camera rows [N, 9].
// Image-space gradients are forward differences; a difference is used only
// when both of its pixels are inside the mask.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace promptrecon {

struct LossWeights {
  double points = 1.0;
  double depth = 1.0;
  double cam = 5.0;
  double normal = 1.0;
  double gs = 1.0;  // multiplies L_rgb + gsdepth * L_gsdepth + consis * L_consis
  double lpips = 0.05;
  double gsdepth = 0.1;
  double consis = 0.1;
  double alpha = 0.2;     // weight of -log(confidence)
  double alpha_l = 1.0;   // angle loss weight
  double huber_delta = 0.1;
  double consis_quantile = 0.3;  // fraction of most confident pixels

  void validate() const;
  nlohmann::json to_json() const;
};

/// A scalar loss and whether its support was empty (value is then zero).
struct LossTerm {
  torch::Tensor value;
  bool empty = false;
};

/// mean over valid pixels of  conf * |pred - target| - alpha * log(conf)
/// plus, per image axis, the mean over valid forward-difference pairs of
/// conf * |grad pred - grad target| (confidence of the first pixel of the pair).
LossTerm confidence_regression_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& conf,
                                    const torch::Tensor& valid, double alpha);

inline LossTerm point_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& conf,
                           const torch::Tensor& valid, double alpha) {
  return confidence_regression_loss(pred, target, conf, valid, alpha);
}
inline LossTerm depth_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& conf,
                           const torch::Tensor& valid, double alpha) {
  return confidence_regression_loss(pred, target, conf, valid, alpha);
}
inline LossTerm gs_depth_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& conf,
                              const torch::Tensor& valid, double alpha) {
  return confidence_regression_loss(pred, target, conf, valid, alpha);
}

/// Elementwise Huber penalty summed over all entries and views.
torch::Tensor camera_loss(const torch::Tensor& pred, const torch::Tensor& target, double delta);

/// mean over valid pixels of alpha_l * (1 - |n_pred . n_gt|).
LossTerm normal_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& valid, double alpha_l);

/// Perceptual stand-in: (rendered, target) [N, 3, H, W] -> scalar.
using PerceptualProxy = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

/// L1 between gradient magnitudes sqrt(gx^2 + gy^2 + 1e-12) over three
/// 2x average-pooled scales.
torch::Tensor gradient_magnitude_proxy(const torch::Tensor& rendered, const torch::Tensor& target);

/// Masked L1 plus lpips_weight * proxy(masked rendered, masked target).
LossTerm rgb_loss(const torch::Tensor& rendered, const torch::Tensor& target, const torch::Tensor& mask,
                  double lpips_weight, const PerceptualProxy& proxy = gradient_magnitude_proxy);

/// L1 between forward differences of the rendered and predicted depth over
/// the pairs inside `mask`, summed over both image axes.
LossTerm gradient_consistency_loss(const torch::Tensor& rendered_depth, const torch::Tensor& depth,
                                   const torch::Tensor& mask);

/// Per view, the `fraction` of valid pixels with the highest confidence.
/// Detached boolean [N, H, W].
torch::Tensor confidence_top_mask(const torch::Tensor& conf, const torch::Tensor& valid, double fraction);

/// Inputs of the composite objective. A group participates only when its
/// prediction tensor is defined.
struct LossInputs {
  torch::Tensor valid;  // [N, H, W] ground-truth validity

  torch::Tensor pointmap, point_conf, point_target;
  torch::Tensor depth, depth_conf, depth_target;
  torch::Tensor normals, normal_target;
  torch::Tensor camera, camera_target;

  // Gaussian branch, over rendered (target) views.
  torch::Tensor rendered, render_target, render_mask;   // [T, 3, H, W], [T, 3, H, W], [T, H, W]
  torch::Tensor gs_depth, gs_conf, gs_depth_target, gs_valid;  // over context views
  torch::Tensor rendered_depth, consis_depth, consis_mask;     // [T, H, W]
};

struct LossBreakdown {
  torch::Tensor total;
  std::map<std::string, double> terms;  // includes "total"
  std::vector<std::string> empty_terms;
};

/// Names in the order they are logged.
const std::vector<std::string>& loss_term_names();

/// Weighted sum. Throws TrainingFault naming the first non-finite term.
LossBreakdown total_loss(const LossInputs& in, const LossWeights& w);

}  // namespace promptrecon
