#include "promptrecon/losses.hpp"

#include <cmath>

#include "promptrecon/errors.hpp"

namespace F = torch::nn::functional;

namespace promptrecon {

void LossWeights::validate() const {
  for (double v : {points, depth, cam, normal, gs, lpips, gsdepth, consis, alpha, alpha_l}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and nonnegative");
  }
  if (!(huber_delta > 0.0)) throw ConfigError("huber_delta must be positive");
  if (!(consis_quantile > 0.0 && consis_quantile <= 1.0)) throw ConfigError("consis_quantile must lie in (0, 1]");
}

nlohmann::json LossWeights::to_json() const {
  return {{"points", points}, {"depth", depth},         {"cam", cam},
          {"normal", normal}, {"gs", gs},               {"lpips", lpips},
          {"gsdepth", gsdepth}, {"consis", consis},     {"alpha", alpha},
          {"alpha_l", alpha_l}, {"huber_delta", huber_delta}, {"consis_quantile", consis_quantile}};
}

namespace {

torch::Tensor as_nchw(const torch::Tensor& t) { return t.dim() == 3 ? t.unsqueeze(1) : t; }

// Zero that stays attached to the graph of `like`.
torch::Tensor graph_zero(const torch::Tensor& like) { return (like * 0.0).sum(); }

torch::Tensor masked_mean(const torch::Tensor& values, const torch::Tensor& mask) {
  const auto m = mask.to(values.scalar_type());
  return (values * m).sum() / m.sum().clamp_min(1.0);
}

struct AxisDiff {
  torch::Tensor pred, target, conf, mask;
};

// dim 3: along columns, dim 2: along rows.
AxisDiff forward_diff(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& conf,
                      const torch::Tensor& valid, int dim) {
  const auto n = pred.size(dim) - 1;
  AxisDiff d;
  d.pred = pred.narrow(dim, 1, n) - pred.narrow(dim, 0, n);
  d.target = target.narrow(dim, 1, n) - target.narrow(dim, 0, n);
  if (conf.defined()) d.conf = conf.narrow(dim - 1, 0, n);
  d.mask = valid.narrow(dim - 1, 1, n).logical_and(valid.narrow(dim - 1, 0, n));
  return d;
}

void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

LossTerm confidence_regression_loss(const torch::Tensor& pred_in, const torch::Tensor& target_in, const torch::Tensor& conf,
                                    const torch::Tensor& valid_in, double alpha) {
  const auto pred = as_nchw(pred_in), target = as_nchw(target_in);
  check_same(pred, target, "confidence_regression_loss");
  const auto valid = valid_in.to(torch::kBool);
  if (conf.sizes() != valid.sizes() || valid.size(0) != pred.size(0) || valid.size(1) != pred.size(2) ||
      valid.size(2) != pred.size(3)) {
    throw ShapeError("confidence_regression_loss: confidence / mask must be [N, H, W]");
  }
  if (!valid.any().item<bool>()) return {graph_zero(pred) + graph_zero(conf), true};

  const auto err = (pred - target).norm(2, 1);  // [N, H, W]
  torch::Tensor loss = masked_mean(conf * err - alpha * conf.log(), valid);
  for (int dim : {3, 2}) {
    if (pred.size(dim) < 2) continue;
    const AxisDiff d = forward_diff(pred, target, conf, valid, dim);
    if (!d.mask.any().item<bool>()) continue;
    loss = loss + masked_mean(d.conf * (d.pred - d.target).norm(2, 1), d.mask);
  }
  return {loss, false};
}

torch::Tensor camera_loss(const torch::Tensor& pred, const torch::Tensor& target, double delta) {
  check_same(pred, target, "camera_loss");
  return F::huber_loss(pred, target, F::HuberLossFuncOptions().reduction(torch::kSum).delta(delta));
}

LossTerm normal_loss(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& valid_in, double alpha_l) {
  check_same(pred, target, "normal_loss");
  const auto valid = valid_in.to(torch::kBool);
  if (!valid.any().item<bool>()) return {graph_zero(pred), true};
  const auto dot = (pred * target).sum(1);
  return {masked_mean(alpha_l * (1.0 - dot.abs()), valid), false};
}

torch::Tensor gradient_magnitude_proxy(const torch::Tensor& rendered, const torch::Tensor& target) {
  check_same(rendered, target, "gradient_magnitude_proxy");
  torch::Tensor a = rendered, b = target;
  torch::Tensor total = graph_zero(rendered);
  for (int scale = 0; scale < 3; ++scale) {
    if (a.size(2) < 2 || a.size(3) < 2) break;
    auto magnitude = [](const torch::Tensor& x) {
      const auto h = x.size(2) - 1, w = x.size(3) - 1;
      const auto gx = x.narrow(3, 1, w).narrow(2, 0, h) - x.narrow(3, 0, w).narrow(2, 0, h);
      const auto gy = x.narrow(2, 1, h).narrow(3, 0, w) - x.narrow(2, 0, h).narrow(3, 0, w);
      return (gx * gx + gy * gy + 1e-12).sqrt();
    };
    total = total + (magnitude(a) - magnitude(b)).abs().mean();
    if (a.size(2) < 4 || a.size(3) < 4) break;
    a = F::avg_pool2d(a, F::AvgPool2dFuncOptions(2));
    b = F::avg_pool2d(b, F::AvgPool2dFuncOptions(2));
  }
  return total;
}

LossTerm rgb_loss(const torch::Tensor& rendered, const torch::Tensor& target, const torch::Tensor& mask_in,
                  double lpips_weight, const PerceptualProxy& proxy) {
  check_same(rendered, target, "rgb_loss");
  const auto mask = mask_in.to(torch::kBool);
  if (!mask.any().item<bool>()) return {graph_zero(rendered), true};
  const auto m = mask.unsqueeze(1).to(rendered.scalar_type());
  const auto l1 = ((rendered - target).abs() * m).sum() / (3.0 * m.sum());
  torch::Tensor loss = l1;
  if (lpips_weight > 0.0 && proxy) loss = loss + lpips_weight * proxy(rendered * m, target * m);
  return {loss, false};
}

LossTerm gradient_consistency_loss(const torch::Tensor& rendered_depth, const torch::Tensor& depth, const torch::Tensor& mask_in) {
  check_same(rendered_depth, depth, "gradient_consistency_loss");
  const auto mask = mask_in.to(torch::kBool);
  const auto a = as_nchw(rendered_depth), b = as_nchw(depth);
  torch::Tensor loss = graph_zero(rendered_depth);
  bool any = false;
  for (int dim : {3, 2}) {
    if (a.size(dim) < 2) continue;
    const AxisDiff d = forward_diff(a, b, torch::Tensor(), mask, dim);
    if (!d.mask.any().item<bool>()) continue;
    any = true;
    loss = loss + masked_mean((d.pred - d.target).abs().squeeze(1), d.mask);
  }
  return {loss, !any};
}

torch::Tensor confidence_top_mask(const torch::Tensor& conf, const torch::Tensor& valid_in, double fraction) {
  const auto valid = valid_in.to(torch::kBool);
  const auto c = conf.detach();
  auto out = torch::zeros_like(valid);
  for (std::int64_t i = 0; i < c.size(0); ++i) {
    const auto vals = c[i].masked_select(valid[i]);
    if (vals.numel() == 0) continue;
    const auto k = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(fraction * vals.numel())));
    const auto thr = std::get<0>(vals.topk(k)).min();
    out[i] = c[i].ge(thr).logical_and(valid[i]);
  }
  return out;
}

const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"points", "depth", "camera", "normal", "rgb", "gs_depth", "consis", "3dgs", "total"};
  return names;
}

LossBreakdown total_loss(const LossInputs& in, const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  std::vector<std::pair<std::string, torch::Tensor>> raw;
  auto record = [&](const std::string& name, const LossTerm& t) {
    if (t.empty) out.empty_terms.push_back(name);
    raw.emplace_back(name, t.value);
    return t.value;
  };

  torch::Tensor total;
  auto add = [&](double weight, const torch::Tensor& v) {
    const auto term = weight * v;
    total = total.defined() ? total + term : term;
  };

  if (in.pointmap.defined()) {
    add(w.points, record("points", point_loss(in.pointmap, in.point_target, in.point_conf, in.valid, w.alpha)));
  }
  if (in.depth.defined()) {
    add(w.depth, record("depth", depth_loss(in.depth, in.depth_target, in.depth_conf, in.valid, w.alpha)));
  }
  if (in.camera.defined()) add(w.cam, record("camera", {camera_loss(in.camera, in.camera_target, w.huber_delta)}));
  if (in.normals.defined()) {
    add(w.normal, record("normal", normal_loss(in.normals, in.normal_target, in.valid, w.alpha_l)));
  }
  if (in.rendered.defined()) {
    torch::Tensor gs = record("rgb", rgb_loss(in.rendered, in.render_target, in.render_mask, w.lpips));
    if (in.gs_depth.defined()) {
      gs = gs + w.gsdepth * record("gs_depth", gs_depth_loss(in.gs_depth, in.gs_depth_target, in.gs_conf, in.gs_valid, w.alpha));
    }
    if (in.rendered_depth.defined()) {
      gs = gs + w.consis * record("consis", gradient_consistency_loss(in.rendered_depth, in.consis_depth, in.consis_mask));
    }
    raw.emplace_back("3dgs", gs);
    add(w.gs, gs);
  }
  if (!total.defined()) throw ConfigError("total_loss: no active loss term");
  raw.emplace_back("total", total);

  for (const auto& [name, v] : raw) {
    const double x = v.item<double>();
    if (!std::isfinite(x)) throw TrainingFault(name, "loss term '" + name + "' is not finite");
    out.terms[name] = x;
  }
  out.total = total;
  return out;
}

}  // namespace promptrecon
