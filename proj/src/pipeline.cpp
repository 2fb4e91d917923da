#include "promptrecon/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "promptrecon/errors.hpp"
#include "promptrecon/gridio.hpp"

namespace promptrecon {

namespace fs = std::filesystem;

CameraSet frame_cameras(const CameraSet& cams, std::size_t ref, double scale) {
  CameraSet out = rebase_to_view(cams, ref);
  out.normalization.reset();
  for (auto& p : out.poses) p.translation /= scale;
  return out;
}

namespace {

CameraSet select_cameras(const CameraSet& cams, const std::vector<int>& views) {
  CameraSet out;
  for (int v : views) {
    out.poses.push_back(cams.poses.at(v));
    out.intrinsics.push_back(cams.intrinsics.at(v));
  }
  return out;
}

// World points of every pixel for cameras in `cams`, [N, 3, H, W].
torch::Tensor backproject_tensor(const torch::Tensor& depth, const CameraSet& cams) {
  const auto N = depth.size(0), H = depth.size(1), W = depth.size(2);
  auto opts = depth.options();
  auto u = torch::arange(W, opts).add(0.5).view({1, W}).expand({H, W});
  auto v = torch::arange(H, opts).add(0.5).view({H, 1}).expand({H, W});
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < N; ++i) {
    const auto& k = cams.intrinsics[i];
    const Mat3 Rt = cams.poses[i].rotation().transpose();
    const Vec3 c = cams.poses[i].center();
    auto d = depth[i];
    auto x = (u - k.cx) / k.fx * d;
    auto y = (v - k.cy) / k.fy * d;
    std::vector<torch::Tensor> comps;
    for (int r = 0; r < 3; ++r)
      comps.push_back(x * Rt(r, 0) + y * Rt(r, 1) + d * Rt(r, 2) + c[r]);
    out.push_back(torch::stack(comps));
  }
  return torch::stack(out);
}

std::vector<Mask> select_masks(const std::vector<Mask>& m, const std::vector<int>& views) {
  std::vector<Mask> out;
  for (int v : views) out.push_back(m.at(v));
  return out;
}

std::vector<Grid<float>> select_grids(const std::vector<Grid<float>>& g, const std::vector<int>& views) {
  std::vector<Grid<float>> out;
  for (int v : views) out.push_back(g.at(v));
  return out;
}

}  // namespace

SceneTargets make_targets(const SceneSample& scene, std::vector<int> views, std::optional<double> scale) {
  if (views.empty()) {
    views.resize(scene.views());
    std::iota(views.begin(), views.end(), 0);
  }
  SceneTargets t;
  t.views = views;
  const CameraSet sel = select_cameras(scene.cams, views);
  t.scale = scale ? *scale : model_frame_scale(sel);
  t.cams = frame_cameras(sel, 0, t.scale);
  t.images = grids_to_tensor(select_grids(scene.images, views));
  t.valid = masks_to_tensor(select_masks(scene.valid, views));
  t.depth = grids_to_tensor(select_grids(scene.depths, views)).squeeze(1) / t.scale;
  t.depth = t.depth * t.valid;
  t.pointmap = backproject_tensor(t.depth, t.cams) * t.valid.unsqueeze(1);
  t.normals = grids_to_tensor(select_grids(scene.normals, views));
  t.camera = camera_targets(sel, torch::TensorOptions().dtype(torch::kFloat32));
  return t;
}

PriorBundle scene_priors(const SceneSample& scene, const PriorMask& mask) {
  return PriorBundle::full(scene.cams, scene.depths).masked(mask);
}

torch::Tensor orient_normals_to_camera(const torch::Tensor& normals, const std::vector<Intrinsics>& intrinsics) {
  if (normals.dim() != 4 || normals.size(1) != 3 || normals.size(0) != static_cast<std::int64_t>(intrinsics.size()))
    throw ShapeError("orient_normals_to_camera: expected [N, 3, H, W] with one intrinsics per view");
  const auto H = normals.size(2), W = normals.size(3);
  const auto opts = normals.options();
  const auto u = (torch::arange(W, opts) + 0.5).view({1, W});
  const auto v = (torch::arange(H, opts) + 0.5).view({H, 1});
  std::vector<torch::Tensor> out;
  for (std::int64_t n = 0; n < normals.size(0); ++n) {
    const Intrinsics& k = intrinsics[n];
    const auto dot = normals[n][0] * ((u - k.cx) / k.fx) + normals[n][1] * ((v - k.cy) / k.fy) + normals[n][2];
    out.push_back(normals[n] * torch::where(dot > 0, -1.0, 1.0).to(opts.dtype()).unsqueeze(0));
  }
  return torch::stack(out);
}

Inference run_inference(ReconModel& model, const std::vector<Grid<float>>& images, const PriorBundle& priors,
                        const GsConfig& gs, const std::optional<CameraSet>& cloud_cams) {
  if (images.empty()) throw DataError("inference needs at least one image");
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  const auto x = grids_to_tensor(images);
  const int H = images.front().height, W = images.front().width;

  Inference inf;
  inf.pred = model->forward(x, priors, HeadSelection{});
  inf.cameras = cameras_from_prediction(inf.pred.camera, H, W, 1.0);
  inf.pred.normals = orient_normals_to_camera(inf.pred.normals, inf.cameras.intrinsics);
  if (cloud_cams && cloud_cams->size() != images.size())
    throw ShapeError("cloud cameras must have one entry per view");
  inf.cloud_cams = cloud_cams ? *cloud_cams : inf.cameras;

  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto ii = static_cast<std::int64_t>(i);
    inf.depth.push_back(tensor_to_grid(inf.pred.depth[ii]));
    inf.gs_depth.push_back(tensor_to_grid(inf.pred.gs_depth[ii]));
    inf.normals.push_back(tensor_to_grid(inf.pred.normals[ii]));
    inf.pointmap.push_back(tensor_to_grid(inf.pred.pointmap[ii]));
  }
  std::vector<int> ids(images.size());
  std::iota(ids.begin(), ids.end(), 0);
  inf.cloud = voxel_prune(build_cloud(inf.pred.gs_depth, inf.pred.gs, inf.cloud_cams, ids), gs.voxel);
  if (was_training) model->train();
  return inf;
}

std::vector<Grid<float>> render_views(const GaussianCloud& cloud, const CameraSet& cams, const GsConfig& gs,
                                      std::vector<Grid<float>>* depths) {
  torch::NoGradGuard no_grad;
  std::vector<Grid<float>> out;
  if (depths) depths->clear();
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto r = render(cloud, cams.poses[i], cams.intrinsics[i], gs.background);
    out.push_back(tensor_to_grid(r.image.clamp(0.0, 1.0)));
    if (depths) depths->push_back(tensor_to_grid(r.depth));
  }
  return out;
}

void write_inference(const Inference& inf, const std::vector<Grid<float>>& rendered, const std::string& dir,
                     const nlohmann::json& sidecar) {
  fs::create_directories(dir);
  for (std::size_t v = 0; v < inf.depth.size(); ++v) {
    const std::string i = std::to_string(v);
    write_float_grid(inf.depth[v], dir + "/depth_" + i + ".bin");
    write_float_grid(inf.gs_depth[v], dir + "/gs_depth_" + i + ".bin");
    write_float_grid(inf.normals[v], dir + "/normal_" + i + ".bin");
    write_float_grid(inf.pointmap[v], dir + "/pointmap_" + i + ".bin");
    if (v < rendered.size()) write_png(rendered[v], dir + "/view_" + i + ".png");
  }
  write_cameras(inf.cameras, dir + "/cameras.json");
  write_cameras(inf.cloud_cams, dir + "/cloud_cameras.json");
  write_cloud(inf.cloud, dir + "/cloud.bin", sidecar);
  std::ofstream f(dir + "/inference.json");
  if (!f) throw DataError("cannot write " + dir + "/inference.json");
  f << sidecar.dump(2) << "\n";
}

namespace {

constexpr std::size_t kMaxChamferPoints = 20000;

void collect_points(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                    const std::vector<Mask>& valid, std::vector<Vec3>& p, std::vector<Vec3>& g) {
  std::size_t total = 0;
  for (const auto& m : valid)
    for (auto b : m.data) total += b ? 1 : 0;
  const std::size_t stride = std::max<std::size_t>(1, (total + kMaxChamferPoints - 1) / kMaxChamferPoints);
  std::size_t k = 0;
  for (std::size_t v = 0; v < gt.size(); ++v) {
    for (int i = 0; i < gt[v].height; ++i)
      for (int j = 0; j < gt[v].width; ++j) {
        if (!valid[v].at(i, j)) continue;
        if (k++ % stride) continue;
        Vec3 a(pred[v].at(i, j, 0), pred[v].at(i, j, 1), pred[v].at(i, j, 2));
        Vec3 b(gt[v].at(i, j, 0), gt[v].at(i, j, 1), gt[v].at(i, j, 2));
        if (!a.allFinite()) continue;
        p.push_back(a);
        g.push_back(b);
      }
  }
}

void check_extent(const std::vector<Grid<float>>& pred, const SceneSample& gt, const std::string& what) {
  if (pred.size() != gt.views()) throw DataError(what + ": view count differs from ground truth");
  for (const auto& g : pred)
    if (!g.same_extent(gt.height(), gt.width())) throw DataError(what + ": resolution differs from ground truth");
}

}  // namespace

void evaluate_scene(MetricReport& report, const std::string& name, const SceneSample& gt,
                    const std::vector<Grid<float>>* depth, const std::vector<Grid<float>>* pointmap,
                    const std::vector<Grid<float>>* normals, const CameraSet* cams,
                    const std::vector<Grid<float>>* rendered, DepthScaling depth_mode) {
  if (depth) {
    check_extent(*depth, gt, "depth");
    const auto e = depth_metrics(*depth, gt.depths, gt.valid, depth_mode);
    report.set_scene(name, "depth_abs_rel", e.abs_rel, "ratio");
    report.set_scene(name, "depth_delta_1.25", 100.0 * e.delta_125, "%");
    report.set_scene(name, "depth_inlier_1.03", 100.0 * e.inlier_103, "%");
  }
  if (pointmap) {
    check_extent(*pointmap, gt, "pointmap");
    report.set_scene(name, "point_inlier_1.03", 100.0 * point_inlier_ratio(*pointmap, gt.pointmaps, gt.valid), "%");
    std::vector<Vec3> p, g;
    collect_points(*pointmap, gt.pointmaps, gt.valid, p, g);
    std::optional<double> acc, comp;
    try {
      const auto ac = chamfer_acc_comp(p, g, true);
      acc = ac.acc_mean;
      comp = ac.comp_mean;
    } catch (const GeometryError&) {
    } catch (const ProtocolError&) {
    }
    report.set_scene(name, "point_acc", acc, "scene units");
    report.set_scene(name, "point_comp", comp, "scene units");
  }
  if (normals) {
    check_extent(*normals, gt, "normals");
    const auto e = normal_metrics(*normals, gt.normals, gt.valid);
    report.set_scene(name, "normal_mean_deg", e.mean_deg, "deg");
    report.set_scene(name, "normal_median_deg", e.median_deg, "deg");
    report.set_scene(name, "normal_11.25", e.within_11_25, "%");
  }
  if (cams) {
    if (cams->size() != gt.cams.size()) throw DataError("cameras: view count differs from ground truth");
    if (cams->size() >= 2) {
      for (int tau : {5, 30}) {
        const auto a = pose_pair_metrics(*cams, gt.cams, tau);
        const std::string s = std::to_string(tau);
        report.set_scene(name, "rra_" + s, a.rra, "%");
        report.set_scene(name, "rta_" + s, a.rta, "%");
        report.set_scene(name, "auc_" + s, a.auc, "%");
      }
      const auto t = trajectory_metrics(*cams, gt.cams);
      report.set_scene(name, "ate", t.ate, "scene units");
      report.set_scene(name, "rpe_trans", t.rpe_trans, "scene units");
      report.set_scene(name, "rpe_rot", t.rpe_rot_deg, "deg");
    }
    report.set_scene(name, "focal_error", focal_error(cams->intrinsics, gt.cams.intrinsics), "px");
  }
  if (rendered) {
    check_extent(*rendered, gt, "rendered views");
    double ps = 0.0, ss = 0.0;
    for (std::size_t v = 0; v < gt.views(); ++v) {
      ps += psnr((*rendered)[v], gt.images[v]);
      ss += ssim((*rendered)[v], gt.images[v]);
    }
    report.set_scene(name, "psnr", ps / gt.views(), "dB");
    report.set_scene(name, "ssim", ss / gt.views(), "ratio");
  }
}

MetricReport evaluate_dirs(const std::string& pred_root, const std::string& gt_root,
                           const std::vector<std::string>& tasks, DepthScaling depth_mode) {
  for (const auto& t : tasks)
    if (std::find(eval_tasks().begin(), eval_tasks().end(), t) == eval_tasks().end())
      throw ConfigError("unknown eval task '" + t + "'");
  auto want = [&](const char* t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };

  const auto scenes = list_scenes(gt_root);
  if (scenes.empty()) throw DataError("no scenes below " + gt_root);
  MetricReport report;
  report.protocol = {{"tasks", tasks},
                     {"depth_scaling", depth_mode == DepthScaling::kNone   ? "none"
                                       : depth_mode == DepthScaling::kMono ? "mono"
                                                                           : "video"},
                     {"pose_thresholds_deg", {5, 30}},
                     {"point_inlier_tol", 0.03},
                     {"scenes", scenes.size()}};

  std::vector<std::string> missing;
  auto grids = [&](const std::string& dir, const std::string& stem, std::size_t n, bool png) {
    std::vector<Grid<float>> out;
    for (std::size_t v = 0; v < n; ++v) {
      const std::string path = dir + "/" + stem + std::to_string(v) + (png ? ".png" : ".bin");
      if (!fs::exists(path)) {
        missing.push_back(path);
        continue;
      }
      out.push_back(png ? read_png(path) : read_float_grid(path));
    }
    return out;
  };

  for (const auto& gdir : scenes) {
    const std::string name = fs::path(gdir).filename().string();
    const SceneSample gt = read_scene(gdir);
    const std::string pdir = pred_root + "/" + name;
    const std::size_t n = gt.views();
    const std::size_t before = missing.size();
    std::optional<std::vector<Grid<float>>> depth, points, normals, rendered;
    std::optional<CameraSet> cams;
    if (want("depth")) depth = grids(pdir, "depth_", n, false);
    if (want("points")) points = grids(pdir, "pointmap_", n, false);
    if (want("normals")) normals = grids(pdir, "normal_", n, false);
    if (want("nvs")) rendered = grids(pdir, "view_", n, true);
    if (want("cameras")) {
      if (fs::exists(pdir + "/cameras.json")) cams = read_cameras(pdir + "/cameras.json");
      else missing.push_back(pdir + "/cameras.json");
    }
    if (missing.size() != before) continue;
    evaluate_scene(report, name, gt, depth ? &*depth : nullptr, points ? &*points : nullptr,
                   normals ? &*normals : nullptr, cams ? &*cams : nullptr, rendered ? &*rendered : nullptr,
                   depth_mode);
  }
  if (!missing.empty()) {
    std::string msg = "missing prediction files:";
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) msg += " " + missing[i];
    if (missing.size() > 10) msg += " (+" + std::to_string(missing.size() - 10) + " more)";
    throw DataError(msg);
  }
  report.summarize();
  return report;
}

}  // namespace promptrecon
