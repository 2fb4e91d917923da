#include <cmath>
#include <cstdio>
#include <set>
#include <tuple>
#include <unordered_set>

#include "../common/oracles.hpp"
#include "acceptance.hpp"
#include "promptrecon/gsplat.hpp"
#include "promptrecon/model.hpp"
#include "promptrecon/synthdata.hpp"
#include "promptrecon/trainer.hpp"

namespace promptrecon::acceptance {

namespace {

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

bool outputs_equal(const Predictions& a, const Predictions& b) {
  auto eq = [](const torch::Tensor& x, const torch::Tensor& y) {
    return x.defined() == y.defined() && (!x.defined() || torch::equal(x, y));
  };
  return eq(a.pointmap, b.pointmap) && eq(a.point_conf, b.point_conf) && eq(a.depth, b.depth) &&
         eq(a.depth_conf, b.depth_conf) && eq(a.normals, b.normals) && eq(a.camera, b.camera) &&
         eq(a.gs_depth, b.gs_depth) && eq(a.gs_conf, b.gs_conf) && eq(a.gs_features, b.gs_features) &&
         eq(a.gs.opacity, b.gs.opacity) && eq(a.gs.rotation, b.gs.rotation) && eq(a.gs.scale, b.gs.scale) &&
         eq(a.gs.color, b.gs.color);
}

}  // namespace

Result criterion_zero_tokens() {
  torch::NoGradGuard no_grad;
  SceneSpec spec;
  spec.views = 3;
  spec.height = 32;
  spec.width = 48;
  const SceneSample s = generate_scene(3, spec);
  const auto images = grids_to_tensor(s.images);
  const PriorBundle full = PriorBundle::full(s.cams, s.depths);
  std::mt19937_64 rng(1);
  const PriorMask dropped = sample_prior_mask(1.0, rng, s.views(), true);

  int checked = 0;
  bool ok = true, prompts_matter = true;
  for (auto emb : {PriorEmbedding::kSingleToken, PriorEmbedding::kDense}) {
    torch::manual_seed(9);
    ModelConfig cfg;
    cfg.prior_embedding = emb;
    ReconModel model(cfg);
    model->eval();
    const Predictions none = model->forward(images, PriorBundle::none(s.views()));
    const Predictions drop = model->forward(images, full.masked(dropped));
    const Predictions all_false = model->forward(images, full.masked(PriorMask::all(s.views(), false)));
    const Predictions with = model->forward(images, full);
    ok = ok && outputs_equal(none, drop) && outputs_equal(none, all_false);
    prompts_matter = prompts_matter && !torch::equal(none.depth, with.depth);
    checked += 2;
  }
  return {ok && prompts_matter, std::to_string(checked) + " forward pairs bit-identical, both prior embeddings" +
                                    (prompts_matter ? "" : "; supplied priors had no effect")};
}

Result criterion_curriculum(const std::string& workdir) {
  std::string detail;
  bool ok = true;

  // Cosine endpoints.
  const double lo = 1e-5, hi = 2e-4;
  const bool cos_ok = cosine_lr(0, 37, hi, lo) == hi && cosine_lr(37, 37, hi, lo) == lo &&
                      cosine_lr(18, 37, hi, lo) < hi && cosine_lr(18, 37, hi, lo) > lo;
  ok = ok && cos_ok;
  detail += cos_ok ? "cosine endpoints exact" : "cosine endpoints off";

  // Parameter groups partition the model with the configured rates.
  RunConfig cfg;
  for (const char* s : {"data.fixed_height=32", "data.fixed_width=32", "train.steps_per_epoch=1",
                        "train.checkpoint_every=0", "curriculum.stages.0.epochs=1", "curriculum.stages.1.epochs=1",
                        "curriculum.stages.2.epochs=2"})
    cfg.set(s);
  torch::manual_seed(0);
  ReconModel model(cfg.model());
  const auto groups = build_param_groups(model, cfg.optim());
  std::set<std::string> seen;
  std::size_t count = 0;
  for (const auto& g : groups)
    for (const auto& n : g.names) {
      seen.insert(n);
      ++count;
    }
  const auto named = model->named_parameters();
  bool partition = count == named.size() && seen.size() == named.size();
  for (const auto& item : named) partition = partition && seen.count(item.key());
  const bool rates = groups.size() == 3 && groups[0].base_lr == 2e-5 && groups[1].base_lr == 1e-4 &&
                     groups[2].base_lr == 2e-4;
  ok = ok && partition && rates;
  detail += partition ? ", groups partition " + std::to_string(count) + " params" : ", groups do not partition";
  detail += rates ? " at (2e-5, 1e-4, 2e-4)" : " with wrong rates";

  // Stage 3 leaves every non-Gaussian parameter untouched.
  SceneSpec spec;
  spec.views = 4;
  spec.height = 32;
  spec.width = 32;
  Trainer trainer(cfg, {{21, spec}}, workdir + "/curriculum");
  trainer.run(2);  // stage 1 and stage 2, paused at the start of stage 3
  std::map<std::string, torch::Tensor> before;
  for (const auto& item : trainer.model()->named_parameters()) before[item.key()] = item.value().detach().clone();
  trainer.run();
  bool frozen_same = true, gs_changed = false;
  for (const auto& item : trainer.model()->named_parameters()) {
    const std::string m = param_module_of(item.key());
    const bool same = torch::equal(before[item.key()], item.value());
    if (m == "gs_head" || m == "gs_attr") gs_changed = gs_changed || !same;
    else frozen_same = frozen_same && same;
  }
  ok = ok && frozen_same && gs_changed;
  detail += frozen_same ? ", stage-3 frozen params bit-identical" : ", stage-3 changed frozen params";
  if (!gs_changed) detail += ", Gaussian heads did not train";
  return {ok, detail};
}

Result criterion_geometry() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double q_err = 0.0, n_err = 0.0, p_err = 0.0, u_err = 0.0;

  for (int i = 0; i < 1000; ++i) {
    Quat q(N(rng), N(rng), N(rng), N(rng));
    q.normalize();
    const Quat back = quat_from_matrix(matrix_from_quat(q));
    q_err = std::max(q_err, (back - canonical_quat(q)).norm());
  }

  for (int i = 0; i < 100; ++i) {
    CameraSet cams = random_cameras(rng, 2 + i % 6);
    for (auto& p : cams.poses) p.translation += Vec3(N(rng), N(rng), N(rng));
    const CameraSet twice = denormalize_camera_set(normalize_camera_set(normalize_camera_set(cams)));
    const CameraSet back = denormalize_camera_set(normalize_camera_set(cams));
    for (std::size_t v = 0; v < cams.size(); ++v) {
      n_err = std::max(n_err, (back.poses[v].center() - cams.poses[v].center()).norm());
      n_err = std::max(n_err, (back.poses[v].rotation() - cams.poses[v].rotation()).norm());
      n_err = std::max(n_err, (twice.poses[v].center() - cams.poses[v].center()).norm());
    }
    for (int k = 0; k < 20; ++k) {
      const auto& intr = cams.intrinsics[0];
      const double u = U(rng) * intr.width, v = U(rng) * intr.height, d = 0.1 + 5.0 * U(rng);
      const Projection pr = project(unproject(u, v, d, intr, cams.poses[0]), intr, cams.poses[0]);
      p_err = std::max({p_err, std::abs(pr.u - u), std::abs(pr.v - v), std::abs(pr.depth - d)});
    }
    std::vector<Vec3> src, dst;
    const Mat3 R = random_rotation(rng, 180.0);
    const double s = 0.2 + 3.0 * U(rng);
    const Vec3 t(N(rng), N(rng), N(rng));
    for (int k = 0; k < 10; ++k) {
      src.emplace_back(N(rng), N(rng), N(rng));
      dst.push_back(s * (R * src.back()) + t);
    }
    const Similarity sim = umeyama_align(src, dst, true);
    u_err = std::max({u_err, std::abs(sim.scale - s), (sim.rotation - R).norm(), (sim.translation - t).norm()});
  }
  const bool ok = q_err < 1e-9 && n_err < 1e-9 && p_err < 1e-6 && u_err < 1e-9;
  return {ok, fmt("quat %.1e, normalization %.1e, projection %.1e, umeyama %.1e", q_err, n_err, p_err, u_err)};
}

Result criterion_renderer() {
  // Footprint of one Gaussian against the closed-form projected density.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  double fp_err = 0.0;
  RenderOptions opts;
  opts.radius_sigma = 0.0;
  opts.min_alpha = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    CameraSet cams = random_cameras(rng, 1, 32, 40);
    const Pose& pose = cams.poses[0];
    const Intrinsics& k = cams.intrinsics[0];
    const Vec3 mean = 0.3 * Vec3(U(rng), U(rng), U(rng));
    const Mat3 Rg = random_rotation(rng, 180.0);
    const Vec3 sc(0.05 + 0.1 * (U(rng) + 1.0), 0.05 + 0.1 * (U(rng) + 1.0), 0.05 + 0.1 * (U(rng) + 1.0));
    const double opacity = 0.5 + 0.4 * U(rng);
    const Quat q = quat_from_matrix(Rg);

    GaussianCloud c;
    c.means = torch::tensor({mean[0], mean[1], mean[2]}, f64).view({1, 3});
    c.quats = torch::tensor({q[0], q[1], q[2], q[3]}, f64).view({1, 4});
    c.scales = torch::tensor({sc[0], sc[1], sc[2]}, f64).view({1, 3});
    c.opacity = torch::tensor({opacity}, f64);
    c.colors = torch::tensor({0.9, 0.5, 0.1}, f64).view({1, 3});
    c.source_view = torch::zeros({1}, torch::kInt64);
    const RenderOutput r = render(c, pose, k, {0.0, 0.0, 0.0}, opts);

    // Oracle: first-order perspective projection of the 3D covariance.
    const Vec3 xc = pose.to_camera(mean);
    const Mat3 Rw = pose.rotation();
    const Mat3 cov3 = Rg * sc.cwiseAbs2().asDiagonal() * Rg.transpose();
    Eigen::Matrix<double, 2, 3> J;
    J << k.fx / xc.z(), 0.0, -k.fx * xc.x() / (xc.z() * xc.z()), 0.0, k.fy / xc.z(), -k.fy * xc.y() / (xc.z() * xc.z());
    const Eigen::Matrix2d cov2 = J * Rw * cov3 * Rw.transpose() * J.transpose();
    const Eigen::Matrix2d inv = cov2.inverse();
    const double mu = k.fx * xc.x() / xc.z() + k.cx, mv = k.fy * xc.y() / xc.z() + k.cy;
    const auto alpha = r.alpha.to(torch::kFloat64).contiguous();
    const auto acc = alpha.accessor<double, 2>();
    for (int i = 0; i < k.height; ++i)
      for (int j = 0; j < k.width; ++j) {
        const Eigen::Vector2d d(j + 0.5 - mu, i + 0.5 - mv);
        const double expect = std::min(0.99, opacity * std::exp(-0.5 * d.dot(inv * d)));
        fp_err = std::max(fp_err, std::abs(acc[i][j] - expect));
      }
  }

  // Voxel pruning count against a hash-set of voxel keys.
  bool counts_ok = true;
  std::size_t total = 0;
  for (double voxel : {0.5, 0.2, 0.05, 0.013}) {
    const int G = 2000;
    auto means = torch::rand({G, 3}, f64) * 2.0 - 1.0;
    GaussianCloud c;
    c.means = means;
    c.quats = torch::randn({G, 4}, f64);
    c.scales = torch::rand({G, 3}, f64) * 0.1;
    c.opacity = torch::rand({G}, f64);
    c.colors = torch::rand({G, 3}, f64);
    c.source_view = torch::zeros({G}, torch::kInt64);
    struct KeyHash {
      std::size_t operator()(const std::tuple<long, long, long>& t) const {
        return std::hash<long>()(std::get<0>(t)) * 73856093u ^ std::hash<long>()(std::get<1>(t)) * 19349663u ^
               std::hash<long>()(std::get<2>(t)) * 83492791u;
      }
    };
    std::unordered_set<std::tuple<long, long, long>, KeyHash> keys;
    const auto m = means.accessor<double, 2>();
    for (int g = 0; g < G; ++g)
      keys.emplace(static_cast<long>(std::floor(m[g][0] / voxel)), static_cast<long>(std::floor(m[g][1] / voxel)),
                   static_cast<long>(std::floor(m[g][2] / voxel)));
    const auto pruned = voxel_prune(c, voxel);
    counts_ok = counts_ok && static_cast<std::size_t>(pruned.size()) == keys.size();
    total += keys.size();
  }
  const bool ok = fp_err < 1e-4 && counts_ok;
  return {ok, fmt("footprint max err %.1e", fp_err) + (counts_ok ? ", voxel counts exact (" : ", voxel counts differ (") +
                  std::to_string(total) + " voxels)"};
}

}  // namespace promptrecon::acceptance
