#pragma once

// Layered run configuration: built-in defaults, then an optional JSON file,
// then "key=value" overrides with dotted keys (array elements by index, e.g.
// curriculum.stages.0.epochs=5). Every key must exist in the defaults and
// keep its type. The schema is documented in docs/config.md.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptrecon/losses.hpp"
#include "promptrecon/model.hpp"
#include "promptrecon/synthdata.hpp"

namespace promptrecon {

struct OptimConfig {
  double lr_patch = 2e-5;
  double lr_core = 1e-4;
  double lr_new = 2e-4;
  double lr_scale = 1.0;      // multiplies all three base rates
  double lr_min_ratio = 0.1;  // cosine floor as a fraction of each base rate
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;
};

struct StageSpec {
  std::string name;
  int epochs = 1;
  HeadSelection heads;
  std::string data_mix = "synthetic";
  double resolution_multiplier = 1.0;
  std::vector<std::string> frozen;  // top-level module names
};

struct PriorConfig {
  double dropout_p = 0.5;
  bool per_view = false;
};

struct DataConfig {
  ResolutionPolicy policy;
  int fixed_height = 0;  // > 0 pins the training resolution
  int fixed_width = 0;
};

struct GsConfig {
  double voxel = 0.01;
  int split_candidates = 4;
  int context_views = 0;  // 0 = ceil(N / 2)
  double visibility_tol = 0.03;
  bool use_predicted_cameras = false;
  bool warm_start = true;  // copy the depth head into the Gaussian head when it starts training
  std::array<double, 3> background{0.0, 0.0, 0.0};
};

struct TrainSettings {
  std::uint64_t seed = 0;
  int steps_per_epoch = 0;  // 0 = one step per scene
  int log_every = 10;
  int checkpoint_every = 100;
  std::vector<StageSpec> stages;
};

class RunConfig {
 public:
  RunConfig();

  /// Merges a JSON document; `source` is used in error messages.
  void merge(const nlohmann::json& doc, const std::string& source);
  void merge_file(const std::string& path);
  /// Applies one "key=value" override. The value is parsed as JSON when
  /// possible and as a bare string otherwise.
  void set(const std::string& assignment);

  const nlohmann::json& tree() const { return tree_; }
  void save(const std::string& path) const;

  ModelConfig model() const;
  LossWeights loss() const;
  OptimConfig optim() const;
  PriorConfig priors() const;
  DataConfig data() const;
  GsConfig gs() const;
  TrainSettings train() const;

  /// Builds every section once; throws ConfigError on the first bad value.
  void validate() const;

 private:
  nlohmann::json tree_;
};

/// "point,depth,camera" style head list.
HeadSelection parse_heads(const std::vector<std::string>& names);
std::vector<std::string> head_names(const HeadSelection& h);

}  // namespace promptrecon
