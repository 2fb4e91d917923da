#include <cstdio>

#include "acceptance.hpp"
#include "promptrecon/evalsuite.hpp"
#include "promptrecon/pipeline.hpp"
#include "promptrecon/trainer.hpp"

namespace promptrecon::acceptance {

RunConfig prior_benefit_config() {
  RunConfig cfg;
  for (const char* s : {"seed=31", "priors.dropout_p=0.5", "optim.lr_scale=5", "train.steps_per_epoch=100",
                        "train.checkpoint_every=0", "curriculum.stages.0.epochs=40", "curriculum.stages.1.epochs=2",
                        "curriculum.stages.2.epochs=1"})
    cfg.set(s);
  return cfg;
}

PriorScores score_priors(ReconModel& model, const GsConfig& gs, const std::vector<SceneSource>& scenes,
                         bool pose, bool intr, bool depth) {
  PriorScores out;
  SceneCache cache;
  for (const auto& src : scenes) {
    const SceneSample& s = cache.get(src, src.spec.height, src.spec.width);
    PriorMask mask = PriorMask::all(s.views(), false);
    for (auto& k : mask.keep) k = {pose, intr, depth};
    const Inference inf = run_inference(model, s.images, scene_priors(s, mask), gs);
    const double n = static_cast<double>(scenes.size());
    out.depth_inlier += depth_metrics(inf.depth, s.depths, s.valid, DepthScaling::kVideo).inlier_103 / n;
    out.point_inlier += point_inlier_ratio(inf.pointmap, s.pointmaps, s.valid, 0.03) / n;
    out.auc5 += pose_pair_metrics(inf.cameras, s.cams, 5).auc / 100.0 / n;
  }
  out.averaged = (out.depth_inlier + out.point_inlier + out.auc5) / 3.0;
  return out;
}

std::vector<SceneSource> seeded_scenes(std::uint64_t first, int count) {
  SceneSpec spec;
  spec.views = 4;
  spec.height = 64;
  spec.width = 64;
  std::vector<SceneSource> out;
  for (int i = 0; i < count; ++i) out.push_back({first + static_cast<std::uint64_t>(i), spec});
  return out;
}

Result criterion_prior_benefit(const std::string& workdir) {
  const RunConfig cfg = prior_benefit_config();
  Trainer trainer(cfg, seeded_scenes(1000, 64), workdir + "/priors");
  trainer.run();
  const auto held_out = seeded_scenes(5000, 20);
  const GsConfig gs = cfg.gs();
  ReconModel& m = trainer.model();
  const PriorScores none = score_priors(m, gs, held_out, false, false, false);
  const PriorScores pose = score_priors(m, gs, held_out, true, false, false);
  const PriorScores intr = score_priors(m, gs, held_out, false, true, false);
  const PriorScores depth = score_priors(m, gs, held_out, false, false, true);
  const PriorScores all = score_priors(m, gs, held_out, true, true, true);

  const bool depth_ok = depth.depth_inlier >= none.depth_inlier && depth.point_inlier >= none.point_inlier;
  const bool pose_ok = pose.auc5 >= none.auc5;
  const bool all_ok = all.averaged >= pose.averaged && all.averaged >= intr.averaged && all.averaged >= depth.averaged;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "depth inlier %.3f->%.3f, point inlier %.3f->%.3f with depth prior; AUC@5 %.3f->%.3f with pose; "
                "averaged none %.3f pose %.3f intr %.3f depth %.3f all %.3f",
                none.depth_inlier, depth.depth_inlier, none.point_inlier, depth.point_inlier, none.auc5, pose.auc5,
                none.averaged, pose.averaged, intr.averaged, depth.averaged, all.averaged);
  return {depth_ok && pose_ok && all_ok, buf};
}

}  // namespace promptrecon::acceptance
