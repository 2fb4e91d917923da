#pragma once

#include <string>
#include <vector>

#include "../common/oracles.hpp"
#include "promptrecon/config.hpp"
#include "promptrecon/model.hpp"
#include "promptrecon/trainer.hpp"

namespace promptrecon::acceptance {

struct Result {
  bool pass = false;
  std::string detail;
};

Result criterion_gradients();
Result criterion_zero_tokens();
Result criterion_overfit(const std::string& workdir);
Result criterion_prior_benefit(const std::string& workdir);
Result criterion_metric_oracles();
Result criterion_curriculum(const std::string& workdir);
Result criterion_geometry();
Result criterion_renderer();

struct OverfitMetrics {
  double abs_rel = 0.0;
  double rra = 0.0;
  double rta = 0.0;
  double normal_deg = 0.0;
  double psnr = 0.0;
};

RunConfig overfit_config();
std::vector<SceneSource> overfit_scenes();
OverfitMetrics evaluate_training_scenes(ReconModel& model, const RunConfig& cfg, const std::vector<SceneSource>& scenes);

struct PriorScores {
  double depth_inlier = 0.0;  // fractions in [0, 1]
  double point_inlier = 0.0;
  double auc5 = 0.0;
  double averaged = 0.0;
};

RunConfig prior_benefit_config();
std::vector<SceneSource> seeded_scenes(std::uint64_t first, int count);
PriorScores score_priors(ReconModel& model, const GsConfig& gs, const std::vector<SceneSource>& scenes, bool pose,
                         bool intr, bool depth);

std::vector<std::pair<std::string, GradCheck>> gradient_suite();

}  // namespace promptrecon::acceptance
