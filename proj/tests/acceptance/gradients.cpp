#include <chrono>
#include <cstdio>

#include "../common/oracles.hpp"
#include "acceptance.hpp"
#include "promptrecon/gsplat.hpp"
#include "promptrecon/losses.hpp"

namespace promptrecon::acceptance {

namespace {

using Inputs = std::vector<torch::Tensor>;
const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);

}  // namespace

/// Every element of every input is perturbed; instances are 2 views at 16x16
/// for the losses and a 32x32 view for the renderer.
std::vector<std::pair<std::string, GradCheck>> gradient_suite() {
  torch::manual_seed(5);
  const int N = 2, H = 16, W = 16;
  const auto valid = torch::rand({N, H, W}, f64) > 0.2;
  std::vector<std::pair<std::string, GradCheck>> out;

  {
    const auto target = torch::randn({N, 3, H, W}, f64);
    out.emplace_back("points", finite_difference_check(
                                   [&](const Inputs& x) {
                                     return point_loss(x[0], target, x[1], valid, 0.2).value;
                                   },
                                   {torch::randn({N, 3, H, W}, f64), torch::rand({N, H, W}, f64) + 1.0},
                                   {"pred", "conf"}));
  }
  {
    const auto target = torch::rand({N, H, W}, f64) + 0.5;
    out.emplace_back("depth", finite_difference_check(
                                  [&](const Inputs& x) {
                                    return depth_loss(x[0], target, x[1], valid, 0.2).value;
                                  },
                                  {torch::rand({N, H, W}, f64) + 0.5, torch::rand({N, H, W}, f64) + 1.0},
                                  {"pred", "conf"}));
  }
  {
    const auto target = torch::randn({N, 9}, f64) * 0.1;
    out.emplace_back("camera", finite_difference_check(
                                   [&](const Inputs& x) { return camera_loss(x[0], target, 0.1); },
                                   {target + torch::randn({N, 9}, f64) * 0.2}, {"pred"}));
  }
  {
    auto unit = [](torch::Tensor t) { return t / t.norm(2, 1, true); };
    const auto target = unit(torch::randn({N, 3, H, W}, f64));
    out.emplace_back("normal", finite_difference_check(
                                   [&](const Inputs& x) { return normal_loss(x[0], target, valid, 1.0).value; },
                                   {unit(torch::randn({N, 3, H, W}, f64))}, {"pred"}));
  }
  {
    const auto target = torch::rand({N, 3, H, W}, f64);
    const auto mask = torch::rand({N, H, W}, f64) > 0.3;
    out.emplace_back("rgb", finite_difference_check(
                                [&](const Inputs& x) { return rgb_loss(x[0], target, mask, 0.05).value; },
                                {torch::rand({N, 3, H, W}, f64)}, {"rendered"}));
  }
  {
    const auto mask = torch::rand({N, H, W}, f64) > 0.3;
    out.emplace_back("consis", finite_difference_check(
                                   [&](const Inputs& x) { return gradient_consistency_loss(x[0], x[1], mask).value; },
                                   {torch::rand({N, H, W}, f64) + 1.0, torch::rand({N, H, W}, f64) + 1.0},
                                   {"rendered_depth", "depth"}));
  }
  {
    // Weighted sum of every term through the composite objective.
    LossWeights w;
    const auto pt = torch::randn({N, 3, H, W}, f64), dt = torch::rand({N, H, W}, f64) + 0.5;
    const auto nt = torch::randn({N, 3, H, W}, f64), ct = torch::randn({N, 9}, f64) * 0.1;
    const auto rt = torch::rand({N, 3, H, W}, f64), rm = torch::rand({N, H, W}, f64) > 0.3;
    out.emplace_back("total", finite_difference_check(
                                  [&](const Inputs& x) {
                                    LossInputs in;
                                    in.valid = valid;
                                    in.pointmap = x[0];
                                    in.point_conf = x[1];
                                    in.point_target = pt;
                                    in.depth = x[2];
                                    in.depth_conf = x[1];
                                    in.depth_target = dt;
                                    in.normals = x[3] / x[3].norm(2, 1, true);
                                    in.normal_target = nt / nt.norm(2, 1, true);
                                    in.camera = x[4];
                                    in.camera_target = ct;
                                    in.rendered = x[5];
                                    in.render_target = rt;
                                    in.render_mask = rm;
                                    in.gs_depth = x[2];
                                    in.gs_conf = x[1];
                                    in.gs_depth_target = dt;
                                    in.gs_valid = valid;
                                    in.rendered_depth = x[2] * 1.1;
                                    in.consis_depth = dt;
                                    in.consis_mask = rm;
                                    return total_loss(in, w).total;
                                  },
                                  {torch::randn({N, 3, H, W}, f64), torch::rand({N, H, W}, f64) + 1.0,
                                   torch::rand({N, H, W}, f64) + 0.5, torch::randn({N, 3, H, W}, f64),
                                   ct + torch::randn({N, 9}, f64) * 0.2, torch::rand({N, 3, H, W}, f64)},
                                  {"pointmap", "conf", "depth", "normals", "camera", "rendered"}));
  }
  {
    // Renderer: every cloud attribute through projection and compositing.
    const int R = 32, G = 6;
    Intrinsics k;
    k.width = k.height = R;
    k.fx = k.fy = 30.0;
    k.cx = k.cy = 16.0;
    const Pose pose = Pose::identity();
    auto means = torch::cat({torch::rand({G, 2}, f64) * 1.0 - 0.5, torch::rand({G, 1}, f64) + 2.0}, 1);
    auto quats = torch::randn({G, 4}, f64);
    auto scales = torch::rand({G, 3}, f64) * 0.15 + 0.08;
    auto opacity = torch::rand({G}, f64) * 0.6 + 0.2;
    auto colors = torch::rand({G, 3}, f64);
    const auto wi = torch::randn({3, R, R}, f64), wd = torch::randn({R, R}, f64), wa = torch::randn({R, R}, f64);
    RenderOptions opts;
    opts.radius_sigma = 0.0;
    opts.min_alpha = 0.0;
    out.emplace_back("renderer", finite_difference_check(
                                     [&](const Inputs& x) {
                                       GaussianCloud c;
                                       c.means = x[0];
                                       c.quats = x[1];
                                       c.scales = x[2];
                                       c.opacity = x[3];
                                       c.colors = x[4];
                                       c.source_view = torch::zeros({G}, torch::kInt64);
                                       const RenderOutput r = render(c, pose, k, {0.2, 0.3, 0.4}, opts);
                                       return (r.image * wi).sum() + (r.depth * wd).sum() + (r.alpha * wa).sum();
                                     },
                                     {means, quats, scales, opacity, colors},
                                     {"means", "quats", "scales", "opacity", "colors"}));
  }
  return out;
}

Result criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = gradient_suite();
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = sec < 120.0;
  std::string detail;
  for (const auto& [name, c] : checks) {
    const double tol = name == "renderer" ? 1e-3 : 1e-4;
    ok = ok && c.max_rel < tol;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s%s=%.1e", detail.empty() ? "" : " ", name.c_str(), c.max_rel);
    detail += buf;
  }
  return {ok, detail};
}

}  // namespace promptrecon::acceptance
