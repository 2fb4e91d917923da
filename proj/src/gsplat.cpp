#include "promptrecon/gsplat.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "promptrecon/errors.hpp"

namespace promptrecon {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

GaussianCloud GaussianCloud::empty(const torch::TensorOptions& opts) {
  GaussianCloud c;
  c.means = torch::zeros({0, 3}, opts);
  c.quats = torch::zeros({0, 4}, opts);
  c.scales = torch::zeros({0, 3}, opts);
  c.opacity = torch::zeros({0}, opts);
  c.colors = torch::zeros({0, 3}, opts);
  c.source_view = torch::zeros({0}, torch::kInt64);
  return c;
}

GaussianCloud GaussianCloud::index_select(const torch::Tensor& ids) const {
  GaussianCloud c;
  c.means = means.index_select(0, ids);
  c.quats = quats.index_select(0, ids);
  c.scales = scales.index_select(0, ids);
  c.opacity = opacity.index_select(0, ids);
  c.colors = colors.index_select(0, ids);
  c.source_view = source_view.index_select(0, ids);
  return c;
}

GaussianCloud GaussianCloud::detached() const {
  return {means.detach(), quats.detach(), scales.detach(), opacity.detach(), colors.detach(), source_view};
}

torch::Tensor quat_to_rotmat(const torch::Tensor& q_in) {
  const auto q = q_in / q_in.norm(2, -1, true).clamp_min(1e-24);
  const auto w = q.select(-1, 0), x = q.select(-1, 1), y = q.select(-1, 2), z = q.select(-1, 3);
  const auto r0 = torch::stack({1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)}, -1);
  const auto r1 = torch::stack({2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)}, -1);
  const auto r2 = torch::stack({2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}, -1);
  return torch::stack({r0, r1, r2}, -2);
}

torch::Tensor quat_multiply(const torch::Tensor& a, const torch::Tensor& b) {
  const auto aw = a.select(-1, 0), ax = a.select(-1, 1), ay = a.select(-1, 2), az = a.select(-1, 3);
  const auto bw = b.select(-1, 0), bx = b.select(-1, 1), by = b.select(-1, 2), bz = b.select(-1, 3);
  return torch::stack({aw * bw - ax * bx - ay * by - az * bz, aw * bx + ax * bw + ay * bz - az * by,
                       aw * by - ax * bz + ay * bw + az * bx, aw * bz + ax * by - ay * bx + az * bw},
                      -1);
}

namespace {

torch::Tensor mat_tensor(const Mat3& m, const torch::TensorOptions& opts) {
  std::vector<double> v(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) v[3 * i + j] = m(i, j);
  return torch::from_blob(v.data(), {3, 3}, torch::kFloat64).clone().to(opts);
}

torch::Tensor vec_tensor(const Eigen::VectorXd& x, const torch::TensorOptions& opts) {
  std::vector<double> v(x.data(), x.data() + x.size());
  return torch::from_blob(v.data(), {static_cast<std::int64_t>(v.size())}, torch::kFloat64).clone().to(opts);
}

}  // namespace

GaussianCloud build_cloud(const torch::Tensor& gs_depth, const GaussianAttributes& attrs, const CameraSet& cams,
                          const std::vector<int>& view_ids, const torch::Tensor& valid) {
  if (gs_depth.dim() != 3 || gs_depth.size(0) != static_cast<std::int64_t>(view_ids.size())) {
    throw ShapeError("build_cloud: gs_depth must be [V, H, W] with one map per view id");
  }
  const auto opts = gs_depth.options();
  const int H = static_cast<int>(gs_depth.size(1)), W = static_cast<int>(gs_depth.size(2));
  std::vector<GaussianCloud> parts;
  for (std::size_t v = 0; v < view_ids.size(); ++v) {
    const int view = view_ids[v];
    const Pose& pose = cams.poses.at(view);
    const Intrinsics& k = cams.intrinsics.at(view);
    if (k.height != H || k.width != W) throw ShapeError("build_cloud: intrinsics do not match the depth map size");

    const auto jj = (torch::arange(W, opts) + 0.5 - k.cx) / k.fx;
    const auto ii = (torch::arange(H, opts) + 0.5 - k.cy) / k.fy;
    const auto rays = torch::stack({jj.view({1, W}).expand({H, W}), ii.view({H, 1}).expand({H, W}), torch::ones({H, W}, opts)}, -1)
                          .reshape({H * W, 3});
    const auto d = gs_depth[v].reshape({H * W});
    auto keep = d.detach().gt(0).logical_and(d.detach().isfinite());
    if (valid.defined()) keep = keep.logical_and(valid[v].reshape({H * W}).to(torch::kBool));
    const auto ids = keep.nonzero().squeeze(1);

    const auto R = mat_tensor(pose.rotation(), opts);
    const auto t = vec_tensor(pose.translation, opts);
    const auto pc = d.index_select(0, ids).unsqueeze(1) * rays.index_select(0, ids);
    const auto world = torch::matmul(pc - t, R);  // R^T (x - t) for row vectors

    const Quat qc = pose.quat;
    const auto q_wc = vec_tensor(Eigen::Vector4d(qc[0], -qc[1], -qc[2], -qc[3]), opts).expand({ids.size(0), 4});
    GaussianCloud part;
    part.means = world;
    part.quats = quat_multiply(q_wc, attrs.rotation[v].reshape({4, H * W}).t().index_select(0, ids));
    part.scales = attrs.scale[v].reshape({3, H * W}).t().index_select(0, ids);
    part.opacity = attrs.opacity[v].reshape({H * W}).index_select(0, ids);
    part.colors = attrs.color[v].reshape({3, H * W}).t().index_select(0, ids);
    part.source_view = torch::full({ids.size(0)}, view, torch::kInt64);
    parts.push_back(part);
  }
  if (parts.empty()) return GaussianCloud::empty(opts);
  auto cat = [&](auto member) {
    std::vector<torch::Tensor> ts;
    for (const auto& p : parts) ts.push_back(p.*member);
    return torch::cat(ts, 0);
  };
  return {cat(&GaussianCloud::means), cat(&GaussianCloud::quats), cat(&GaussianCloud::scales),
          cat(&GaussianCloud::opacity), cat(&GaussianCloud::colors), cat(&GaussianCloud::source_view)};
}

const CameraSet& cloud_cameras(const CameraSet& ground_truth, const CameraSet& predicted, bool use_predicted_cameras) {
  return use_predicted_cameras ? predicted : ground_truth;
}

GaussianCloud voxel_prune(const GaussianCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) throw ConfigError("voxel size must be positive");
  if (cloud.size() == 0) return cloud;
  const auto keys = torch::floor(cloud.means.detach().to(torch::kFloat64) / voxel).to(torch::kInt64);
  const auto [uniq, inverse, counts] = at::unique_dim(keys, 0, /*sorted=*/true, /*return_inverse=*/true);
  const auto m = uniq.size(0);
  const auto opts = cloud.means.options();

  const auto w = cloud.opacity;
  const auto wsum = torch::zeros({m}, opts).index_add(0, inverse, w).clamp_min(1e-12).unsqueeze(1);
  auto wmean = [&](const torch::Tensor& x) {
    return torch::zeros({m, x.size(1)}, opts).index_add(0, inverse, w.unsqueeze(1) * x) / wsum;
  };

  const auto op = cloud.opacity.detach().to(torch::kFloat64).contiguous();
  const auto inv = inverse.contiguous();
  const double* o = op.data_ptr<double>();
  const std::int64_t* g = inv.data_ptr<std::int64_t>();
  std::vector<std::int64_t> best(m, -1);
  for (std::int64_t i = 0; i < cloud.size(); ++i) {
    auto& b = best[g[i]];
    if (b < 0 || o[i] > o[b]) b = i;
  }
  const auto best_ids = torch::tensor(best, torch::kInt64);

  GaussianCloud out;
  out.means = wmean(cloud.means);
  out.scales = wmean(cloud.scales);
  out.colors = wmean(cloud.colors);
  out.quats = cloud.quats.index_select(0, best_ids);
  out.opacity = cloud.opacity.index_select(0, best_ids);
  out.source_view = cloud.source_view.index_select(0, best_ids);
  return out;
}

Projected project_gaussians(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& intr, double near) {
  const auto opts = cloud.means.options();
  const auto R = mat_tensor(pose.rotation(), opts);
  const auto t = vec_tensor(pose.translation, opts);
  const auto pc_all = torch::matmul(cloud.means, R.t()) + t;
  Projected p;
  auto ids = pc_all.select(1, 2).detach().gt(near).nonzero().squeeze(1);
  auto pc = pc_all.index_select(0, ids);
  const auto x = pc.select(1, 0), y = pc.select(1, 1), z = pc.select(1, 2);
  const double fx = intr.fx, fy = intr.fy;

  const auto zero = torch::zeros_like(z);
  const auto J = torch::stack({torch::stack({fx / z, zero, -fx * x / (z * z)}, -1),
                               torch::stack({zero, fy / z, -fy * y / (z * z)}, -1)},
                              -2);  // [K, 2, 3]
  const auto Rg = quat_to_rotmat(cloud.quats.index_select(0, ids));
  const auto M = Rg * cloud.scales.index_select(0, ids).unsqueeze(1);
  const auto sigma = torch::matmul(M, M.transpose(1, 2));
  const auto T = torch::matmul(J, R);
  const auto cov = torch::matmul(torch::matmul(T, sigma), T.transpose(1, 2));
  const auto a = cov.select(1, 0).select(1, 0), b = cov.select(1, 0).select(1, 1), c = cov.select(1, 1).select(1, 1);
  const auto det = a * c - b * b;

  const auto ok = det.detach().gt(1e-30).nonzero().squeeze(1);
  p.ids = ids.index_select(0, ok);
  p.means2d = torch::stack({fx * x / z + intr.cx, fy * y / z + intr.cy}, -1).index_select(0, ok);
  p.cov2d = torch::stack({a, b, c}, -1).index_select(0, ok);
  const auto d = det.index_select(0, ok);
  p.conics = torch::stack({c.index_select(0, ok) / d, -b.index_select(0, ok) / d, a.index_select(0, ok) / d}, -1);
  p.depths = z.index_select(0, ok);
  return p;
}

namespace {

struct RasterInputs {
  const double* mean;
  const double* conic;
  const double* opacity;
  const double* color;
  const double* depth;
};

struct RasterParams {
  int height;
  int width;
  double bg[3];
  double min_alpha;
  double radius_sigma;
  double max_alpha;
};

// Gaussian weight and alpha of Gaussian g at pixel (i, j).
struct Contribution {
  double dx, dy, gauss, alpha;
  bool clamped;
};

inline Contribution evaluate(const RasterInputs& in, const RasterParams& p, std::int64_t g, int i, int j) {
  Contribution c;
  c.dx = (j + 0.5) - in.mean[2 * g];
  c.dy = (i + 0.5) - in.mean[2 * g + 1];
  const double* q = in.conic + 3 * g;
  const double power = q[0] * c.dx * c.dx + 2.0 * q[1] * c.dx * c.dy + q[2] * c.dy * c.dy;
  c.gauss = std::exp(-0.5 * power);
  const double a = in.opacity[g] * c.gauss;
  c.clamped = a > p.max_alpha;
  c.alpha = c.clamped ? p.max_alpha : a;
  return c;
}

// Per-pixel lists of contributing Gaussians in compositing order (CSR).
void build_lists(const RasterInputs& in, const RasterParams& p, std::int64_t G, std::vector<std::int64_t>& offsets,
                 std::vector<std::int64_t>& ids) {
  std::vector<std::int64_t> order(G);
  std::iota(order.begin(), order.end(), 0);
  // Canonical order independent of storage: depth, then screen position,
  // opacity and color.
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    const double ka[] = {in.depth[a], in.mean[2 * a], in.mean[2 * a + 1], in.opacity[a], in.color[3 * a], in.color[3 * a + 1], in.color[3 * a + 2]};
    const double kb[] = {in.depth[b], in.mean[2 * b], in.mean[2 * b + 1], in.opacity[b], in.color[3 * b], in.color[3 * b + 1], in.color[3 * b + 2]};
    return std::lexicographical_compare(std::begin(ka), std::end(ka), std::begin(kb), std::end(kb));
  });

  const int H = p.height, W = p.width;
  std::vector<std::vector<std::int64_t>> lists(static_cast<std::size_t>(H) * W);
  for (std::int64_t g : order) {
    int i0 = 0, i1 = H - 1, j0 = 0, j1 = W - 1;
    if (p.radius_sigma > 0.0) {
      const double* q = in.conic + 3 * g;
      const double det = q[0] * q[2] - q[1] * q[1];
      if (!(det > 0.0)) continue;
      // Covariance is the inverse of the conic.
      const double ca = q[2] / det, cb = -q[1] / det, cc = q[0] / det;
      const double mid = 0.5 * (ca + cc);
      const double lambda = mid + std::sqrt(std::max(0.0, mid * mid - (ca * cc - cb * cb)));
      double extent = p.radius_sigma;
      if (p.min_alpha > 0.0) {
        const double ratio = in.opacity[g] / p.min_alpha;
        if (ratio <= 1.0) continue;
        extent = std::min(extent, std::sqrt(2.0 * std::log(ratio)));
      }
      const double r = extent * std::sqrt(lambda);
      const double u = in.mean[2 * g], v = in.mean[2 * g + 1];
      if (!std::isfinite(r) || !std::isfinite(u) || !std::isfinite(v)) continue;
      j0 = std::max(0, static_cast<int>(std::floor(u - r - 0.5)));
      j1 = std::min(W - 1, static_cast<int>(std::ceil(u + r - 0.5)));
      i0 = std::max(0, static_cast<int>(std::floor(v - r - 0.5)));
      i1 = std::min(H - 1, static_cast<int>(std::ceil(v + r - 0.5)));
    }
    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        const Contribution c = evaluate(in, p, g, i, j);
        if (c.alpha < p.min_alpha || c.alpha <= 0.0) continue;
        lists[static_cast<std::size_t>(i) * W + j].push_back(g);
      }
    }
  }
  offsets.assign(lists.size() + 1, 0);
  for (std::size_t k = 0; k < lists.size(); ++k) offsets[k + 1] = offsets[k] + static_cast<std::int64_t>(lists[k].size());
  ids.clear();
  ids.reserve(offsets.back());
  for (const auto& l : lists) ids.insert(ids.end(), l.begin(), l.end());
}

constexpr double kAlphaFloor = 1e-10;

class RasterizeFunction : public torch::autograd::Function<RasterizeFunction> {
 public:
  static variable_list forward(AutogradContext* ctx, torch::Tensor means2d, torch::Tensor conics, torch::Tensor opacity,
                               torch::Tensor colors, torch::Tensor depths, std::int64_t height, std::int64_t width,
                               std::vector<double> params) {
    const auto out_opts = means2d.options();
    const auto m = means2d.detach().to(torch::kFloat64).contiguous();
    const auto q = conics.detach().to(torch::kFloat64).contiguous();
    const auto o = opacity.detach().to(torch::kFloat64).contiguous();
    const auto c = colors.detach().to(torch::kFloat64).contiguous();
    const auto d = depths.detach().to(torch::kFloat64).contiguous();
    const RasterInputs in{m.data_ptr<double>(), q.data_ptr<double>(), o.data_ptr<double>(), c.data_ptr<double>(),
                          d.data_ptr<double>()};
    const RasterParams p{static_cast<int>(height), static_cast<int>(width), {params[0], params[1], params[2]},
                         params[3], params[4], params[5]};
    std::vector<std::int64_t> offsets, ids;
    build_lists(in, p, m.size(0), offsets, ids);

    const int H = p.height, W = p.width;
    auto image = torch::zeros({3, H, W}, torch::kFloat64);
    auto depth = torch::zeros({H, W}, torch::kFloat64);
    auto alpha = torch::zeros({H, W}, torch::kFloat64);
    double* img = image.data_ptr<double>();
    double* dep = depth.data_ptr<double>();
    double* alp = alpha.data_ptr<double>();
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const std::size_t px = static_cast<std::size_t>(i) * W + j;
        double T = 1.0, logT = 0.0, rgb[3] = {0.0, 0.0, 0.0}, zsum = 0.0;
        for (std::int64_t k = offsets[px]; k < offsets[px + 1]; ++k) {
          const std::int64_t g = ids[k];
          const Contribution ct = evaluate(in, p, g, i, j);
          const double w = ct.alpha * T;
          for (int ch = 0; ch < 3; ++ch) rgb[ch] += w * in.color[3 * g + ch];
          zsum += w * in.depth[g];
          T *= 1.0 - ct.alpha;
          logT += std::log1p(-ct.alpha);
        }
        // 1 - T cancels where only far tails reach the pixel.
        const double A = -std::expm1(logT);
        for (int ch = 0; ch < 3; ++ch) img[ch * plane + px] = rgb[ch] + T * p.bg[ch];
        alp[px] = A;
        dep[px] = A > kAlphaFloor ? zsum / A : 0.0;
      }
    }
    ctx->save_for_backward({means2d, conics, opacity, colors, depths, torch::tensor(offsets), torch::tensor(ids)});
    ctx->saved_data["height"] = height;
    ctx->saved_data["width"] = width;
    ctx->saved_data["params"] = params;
    return {image.to(out_opts), depth.to(out_opts), alpha.to(out_opts)};
  }

  static variable_list backward(AutogradContext* ctx, variable_list grads) {
    const auto saved = ctx->get_saved_variables();
    const auto m = saved[0].detach().to(torch::kFloat64).contiguous();
    const auto q = saved[1].detach().to(torch::kFloat64).contiguous();
    const auto o = saved[2].detach().to(torch::kFloat64).contiguous();
    const auto c = saved[3].detach().to(torch::kFloat64).contiguous();
    const auto d = saved[4].detach().to(torch::kFloat64).contiguous();
    const auto off_t = saved[5].contiguous();
    const auto ids_t = saved[6].contiguous();
    const std::int64_t* offsets = off_t.data_ptr<std::int64_t>();
    const std::int64_t* ids = ids_t.data_ptr<std::int64_t>();
    const auto params = ctx->saved_data["params"].toDoubleVector();
    const RasterParams p{static_cast<int>(ctx->saved_data["height"].toInt()),
                         static_cast<int>(ctx->saved_data["width"].toInt()),
                         {params[0], params[1], params[2]},
                         params[3], params[4], params[5]};
    const RasterInputs in{m.data_ptr<double>(), q.data_ptr<double>(), o.data_ptr<double>(), c.data_ptr<double>(),
                          d.data_ptr<double>()};
    const int H = p.height, W = p.width;
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    auto as_double = [&](const torch::Tensor& g, std::vector<std::int64_t> shape) {
      return g.defined() ? g.detach().to(torch::kFloat64).contiguous() : torch::zeros(shape, torch::kFloat64);
    };
    const auto g_img_t = as_double(grads[0], {3, H, W});
    const auto g_dep_t = as_double(grads[1], {H, W});
    const auto g_alp_t = as_double(grads[2], {H, W});
    const double* g_img = g_img_t.data_ptr<double>();
    const double* g_dep = g_dep_t.data_ptr<double>();
    const double* g_alp = g_alp_t.data_ptr<double>();

    const std::int64_t G = m.size(0);
    auto gm = torch::zeros({G, 2}, torch::kFloat64), gq = torch::zeros({G, 3}, torch::kFloat64);
    auto go = torch::zeros({G}, torch::kFloat64), gc = torch::zeros({G, 3}, torch::kFloat64);
    auto gd = torch::zeros({G}, torch::kFloat64);
    double* gmp = gm.data_ptr<double>();
    double* gqp = gq.data_ptr<double>();
    double* gop = go.data_ptr<double>();
    double* gcp = gc.data_ptr<double>();
    double* gdp = gd.data_ptr<double>();

    std::vector<Contribution> cts;
    std::vector<double> Ts;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const std::size_t px = static_cast<std::size_t>(i) * W + j;
        const std::int64_t b = offsets[px], e = offsets[px + 1];
        if (b == e) continue;
        cts.clear();
        Ts.clear();
        double T = 1.0, logT = 0.0, zsum = 0.0;
        for (std::int64_t k = b; k < e; ++k) {
          const Contribution ct = evaluate(in, p, ids[k], i, j);
          cts.push_back(ct);
          Ts.push_back(T);
          zsum += ct.alpha * T * in.depth[ids[k]];
          T *= 1.0 - ct.alpha;
          logT += std::log1p(-ct.alpha);
        }
        const double TN = T, A = -std::expm1(logT);
        const bool has_depth = A > kAlphaFloor;
        const double gC[3] = {g_img[px], g_img[plane + px], g_img[2 * plane + px]};
        const double gD = g_dep[px], gA = g_alp[px];

        double suffix_c[3] = {TN * p.bg[0], TN * p.bg[1], TN * p.bg[2]};
        double suffix_z = 0.0;
        for (std::int64_t k = e - 1; k >= b; --k) {
          const std::int64_t g = ids[k];
          const Contribution& ct = cts[k - b];
          const double Ti = Ts[k - b], a = ct.alpha, w = a * Ti;
          const double* col = in.color + 3 * g;
          const double z = in.depth[g];

          for (int ch = 0; ch < 3; ++ch) gcp[3 * g + ch] += gC[ch] * w;
          if (has_depth) gdp[g] += gD * w / A;

          const double inv = 1.0 / (1.0 - a);
          double g_alpha = 0.0;
          for (int ch = 0; ch < 3; ++ch) g_alpha += gC[ch] * (Ti * col[ch] - suffix_c[ch] * inv);
          const double dA = TN * inv;
          g_alpha += gA * dA;
          if (has_depth) {
            const double dS = Ti * z - suffix_z * inv;
            g_alpha += gD * (dS / A - zsum / (A * A) * dA);
          }
          for (int ch = 0; ch < 3; ++ch) suffix_c[ch] += w * col[ch];
          suffix_z += w * z;

          if (ct.clamped) continue;
          gop[g] += g_alpha * ct.gauss;
          const double g_power = -0.5 * a * g_alpha;
          const double* cq = in.conic + 3 * g;
          gqp[3 * g] += g_power * ct.dx * ct.dx;
          gqp[3 * g + 1] += g_power * 2.0 * ct.dx * ct.dy;
          gqp[3 * g + 2] += g_power * ct.dy * ct.dy;
          gmp[2 * g] += g_power * -2.0 * (cq[0] * ct.dx + cq[1] * ct.dy);
          gmp[2 * g + 1] += g_power * -2.0 * (cq[1] * ct.dx + cq[2] * ct.dy);
        }
      }
    }
    auto like = [](const torch::Tensor& g, const torch::Tensor& ref) { return g.to(ref.options()); };
    return {like(gm, saved[0]), like(gq, saved[1]), like(go, saved[2]), like(gc, saved[3]), like(gd, saved[4]),
            torch::Tensor(), torch::Tensor(), torch::Tensor()};
  }
};

}  // namespace

RenderOutput rasterize(const torch::Tensor& means2d, const torch::Tensor& conics, const torch::Tensor& opacity,
                       const torch::Tensor& colors, const torch::Tensor& depths, int height, int width,
                       const std::array<double, 3>& background, const RenderOptions& opts) {
  const auto G = means2d.size(0);
  if (conics.size(0) != G || opacity.size(0) != G || colors.size(0) != G || depths.size(0) != G) {
    throw ShapeError("rasterize: per-Gaussian inputs disagree in count");
  }
  std::vector<double> params{background[0], background[1], background[2], opts.min_alpha, opts.radius_sigma, opts.max_alpha};
  const auto out = RasterizeFunction::apply(means2d, conics, opacity, colors, depths, height, width, params);
  return {out[0], out[1], out[2]};
}

RenderOutput render(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& intr,
                    const std::array<double, 3>& background, const RenderOptions& opts) {
  intr.validate();
  const int H = intr.height, W = intr.width;
  if (cloud.size() == 0) {
    const auto o = cloud.means.defined() ? cloud.means.options() : torch::TensorOptions().dtype(torch::kFloat32);
    RenderOutput r;
    r.image = torch::tensor({background[0], background[1], background[2]}, torch::kFloat64).to(o).view({3, 1, 1}).expand({3, H, W}).clone();
    r.depth = torch::zeros({H, W}, o);
    r.alpha = torch::zeros({H, W}, o);
    return r;
  }
  const Projected p = project_gaussians(cloud, pose, intr, opts.near);
  return rasterize(p.means2d, p.conics, cloud.opacity.index_select(0, p.ids), cloud.colors.index_select(0, p.ids), p.depths,
                   H, W, background, opts);
}

namespace {

// Visible-pixel test shared by split scoring and the novel-view mask.
template <typename Accept>
Mask reprojection_mask(const Grid<float>& depth, const Pose& pose, const Intrinsics& intr,
                       const std::vector<const Grid<float>*>& ctx_depths, const std::vector<Pose>& ctx_poses,
                       const std::vector<Intrinsics>& ctx_intr, Accept accept) {
  Mask out(depth.height, depth.width, 1, 0);
  for (int i = 0; i < depth.height; ++i) {
    for (int j = 0; j < depth.width; ++j) {
      const float z = depth.at(i, j);
      if (!(std::isfinite(z) && z > 0.0f)) continue;
      const Vec3 X = unproject(j + 0.5, i + 0.5, z, intr, pose);
      for (std::size_t c = 0; c < ctx_depths.size(); ++c) {
        const Projection pr = project(X, ctx_intr[c], ctx_poses[c]);
        if (!(pr.depth > 0.0)) continue;
        const int cj = static_cast<int>(std::floor(pr.u)), ci = static_cast<int>(std::floor(pr.v));
        if (ci < 0 || cj < 0 || ci >= ctx_depths[c]->height || cj >= ctx_depths[c]->width) continue;
        const float cd = ctx_depths[c]->at(ci, cj);
        if (!(std::isfinite(cd) && cd > 0.0f)) continue;
        if (accept(pr.depth, static_cast<double>(cd))) {
          out.at(i, j) = 1;
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace

double split_overlap(const std::vector<Grid<float>>& depths, const CameraSet& cams, const std::vector<int>& context,
                     const std::vector<int>& target) {
  if (target.empty()) return 0.0;
  std::vector<const Grid<float>*> cd;
  std::vector<Pose> cp;
  std::vector<Intrinsics> ck;
  for (int c : context) {
    cd.push_back(&depths.at(c));
    cp.push_back(cams.poses.at(c));
    ck.push_back(cams.intrinsics.at(c));
  }
  double sum = 0.0;
  for (int t : target) {
    const Grid<float>& d = depths.at(t);
    const Mask m = reprojection_mask(d, cams.poses[t], cams.intrinsics[t], cd, cp, ck, [](double, double) { return true; });
    std::size_t valid = 0, hit = 0;
    for (std::size_t k = 0; k < d.data.size(); ++k) {
      if (std::isfinite(d.data[k]) && d.data[k] > 0.0f) {
        ++valid;
        hit += m.data[k];
      }
    }
    sum += valid ? static_cast<double>(hit) / valid : 0.0;
  }
  return sum / static_cast<double>(target.size());
}

ViewSplit select_split(const std::vector<Grid<float>>& depths, const CameraSet& cams, int K, std::mt19937_64& rng,
                       int context_count) {
  const int n = static_cast<int>(cams.size());
  if (n < 2) throw ConfigError("view split needs at least two views");
  if (K < 1) throw ConfigError("split candidate count must be >= 1");
  if (static_cast<int>(depths.size()) != n) throw ShapeError("select_split: depth / camera count mismatch");
  int c = context_count > 0 ? context_count : (n + 1) / 2;
  c = std::clamp(c, 1, n - 1);
  ViewSplit best;
  best.overlap_score = -1.0;
  for (int k = 0; k < K; ++k) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    ViewSplit s;
    s.context_ids.assign(order.begin(), order.begin() + c);
    s.target_ids.assign(order.begin() + c, order.end());
    std::sort(s.context_ids.begin(), s.context_ids.end());
    std::sort(s.target_ids.begin(), s.target_ids.end());
    s.overlap_score = split_overlap(depths, cams, s.context_ids, s.target_ids);
    if (s.overlap_score > best.overlap_score) best = s;
  }
  return best;
}

VisibilityMask novel_view_mask(const std::optional<Grid<float>>& target_depth, const Pose& target_pose,
                               const Intrinsics& target_intr, const std::vector<Grid<float>>& context_depths,
                               const std::vector<Pose>& context_poses, const std::vector<Intrinsics>& context_intr,
                               double rel_tol) {
  VisibilityMask v;
  if (!target_depth) {
    v.mask = Mask(target_intr.height, target_intr.width, 1, 1);
    v.missing_depth = true;
    return v;
  }
  if (context_depths.size() != context_poses.size() || context_depths.size() != context_intr.size()) {
    throw ShapeError("novel_view_mask: context inputs disagree in length");
  }
  std::vector<const Grid<float>*> cd;
  for (const auto& d : context_depths) cd.push_back(&d);
  v.mask = reprojection_mask(*target_depth, target_pose, target_intr, cd, context_poses, context_intr,
                             [rel_tol](double z, double ref) { return std::abs(z - ref) <= rel_tol * ref; });
  return v;
}

void write_cloud(const GaussianCloud& cloud, const std::string& path, const nlohmann::json& sidecar) {
  const auto n = cloud.size();
  std::vector<float> rec(static_cast<std::size_t>(n) * 17, 0.0f);
  if (n > 0) {
    const auto packed = torch::cat({cloud.means, cloud.quats, cloud.scales, cloud.opacity.unsqueeze(1), cloud.colors}, 1)
                            .detach()
                            .to(torch::kCPU, torch::kFloat32)
                            .contiguous();
    const float* src = packed.data_ptr<float>();
    for (std::int64_t g = 0; g < n; ++g) std::memcpy(&rec[g * 17], src + g * 14, 14 * sizeof(float));
  }
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  const std::uint32_t header[2] = {kCloudMagic, static_cast<std::uint32_t>(n)};
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size() * sizeof(float)));
  if (!f) throw DataError("short write to " + path);

  nlohmann::json meta = sidecar.is_object() ? sidecar : nlohmann::json::object();
  meta["count"] = n;
  std::ofstream j(path + ".json");
  j << meta.dump(1) << "\n";
}

GaussianCloud read_cloud(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing cloud file " + path);
  std::uint32_t header[2];
  if (!f.read(reinterpret_cast<char*>(header), sizeof(header))) throw DataError("cloud header truncated in " + path);
  if (header[0] != kCloudMagic) throw DataError("bad cloud magic in " + path);
  const std::int64_t n = header[1];
  std::vector<float> rec(static_cast<std::size_t>(n) * 17);
  if (!f.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size() * sizeof(float)))) {
    throw DataError("cloud payload truncated in " + path);
  }
  const auto t = torch::from_blob(rec.data(), {n, 17}, torch::kFloat32).clone();
  GaussianCloud c;
  c.means = t.narrow(1, 0, 3).contiguous();
  c.quats = t.narrow(1, 3, 4).contiguous();
  c.scales = t.narrow(1, 7, 3).contiguous();
  c.opacity = t.select(1, 10).contiguous();
  c.colors = t.narrow(1, 11, 3).contiguous();
  c.source_view = torch::zeros({n}, torch::kInt64);
  return c;
}

}  // namespace promptrecon
