#pragma once

// Staged training: parameter groups with their own learning rates, cosine
// decay, prior dropout, multi-resolution batches, the novel-view Gaussian
// stage, CSV logs and resumable checkpoints.
//
// Output layout below the run directory:
//   config.json             resolved configuration
//   <stage>.log.csv         one row per step
//   <stage>_last.{bin,json} rolling checkpoint inside a stage
//   <stage>.{bin,json}      checkpoint at the end of a stage
//   final.{bin,json}        model after the last stage

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "promptrecon/config.hpp"
#include "promptrecon/losses.hpp"
#include "promptrecon/model.hpp"
#include "promptrecon/pipeline.hpp"
#include "promptrecon/synthdata.hpp"

namespace promptrecon {

/// "patch", "core" or "new" for a parameter name such as
/// "backbone.blocks.0.attn.qkv.weight". Throws ConfigError when unassigned.
std::string param_group_of(const std::string& param_name);

/// Module name (first path component) of a parameter.
std::string param_module_of(const std::string& param_name);

struct ParamGroup {
  std::string name;
  double base_lr = 0.0;
  std::vector<std::string> names;
  std::vector<torch::Tensor> params;
};

/// Trainable parameters in registration order, split into the three groups.
/// Parameters of modules listed in `frozen` are left out.
std::vector<ParamGroup> build_param_groups(ReconModel& model, const OptimConfig& cfg,
                                           const std::vector<std::string>& frozen = {});

/// Half-cosine from lr_max at step 0 to lr_min at step `total`.
double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min);

/// Deterministic generator for (seed, stage, step, stream).
std::mt19937_64 step_rng(std::uint64_t seed, std::size_t stage, std::int64_t step, std::uint64_t stream = 0);

/// Scenes are identified by (seed, spec) and regenerated at the requested
/// resolution with 8-bit images.
struct SceneSource {
  std::uint64_t seed = 0;
  SceneSpec spec;
};

/// Reads every manifest below `root`.
std::vector<SceneSource> load_dataset(const std::string& root);

class SceneCache {
 public:
  explicit SceneCache(std::size_t capacity = 256) : capacity_(capacity) {}
  const SceneSample& get(const SceneSource& src, int height, int width);
  std::size_t size() const { return cache_.size(); }

 private:
  std::size_t capacity_;
  std::map<std::tuple<std::uint64_t, int, int, int>, SceneSample> cache_;
};

/// Loss of one scene for one stage. `rng` drives the view split of the
/// Gaussian stage.
LossBreakdown scene_loss(ReconModel& model, const SceneSample& scene, const PriorBundle& priors,
                         const StageSpec& stage, const LossWeights& weights, const GsConfig& gs,
                         std::mt19937_64& rng);

struct StepLog {
  std::string stage;
  std::int64_t step = 0;
  double lr_factor = 1.0;  // current lr / base lr
  int height = 0;
  int width = 0;
  std::uint64_t scene = 0;
  std::map<std::string, double> terms;
};

struct StageReport {
  std::string stage;
  std::int64_t steps_run = 0;
  std::int64_t next_step = 0;
  bool finished = false;
  std::vector<StepLog> logs;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<SceneSource> data, std::string out_dir);

  ReconModel& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  std::int64_t stage_steps(std::size_t stage) const;

  /// Restores model, optimizer moments and position from a checkpoint
  /// written by this class.
  void resume(const std::string& prefix);

  /// Runs from the current position to the end of the curriculum, or stops
  /// after `max_steps` optimizer steps (leaving a rolling checkpoint).
  std::vector<StageReport> run(std::optional<std::int64_t> max_steps = std::nullopt);

  std::function<void(const StepLog&)> on_step;

 private:
  void begin_stage(std::size_t stage);
  void save_checkpoint(const std::string& prefix, std::size_t stage, std::int64_t next_step);
  void append_log(const StepLog& log);
  StepLog train_step(std::size_t stage, std::int64_t step);

  RunConfig cfg_;
  TrainSettings settings_;
  OptimConfig optim_;
  LossWeights weights_;
  PriorConfig priors_;
  DataConfig data_;
  GsConfig gs_;
  std::vector<SceneSource> data_sources_;
  std::string out_;
  ReconModel model_{nullptr};
  SceneCache cache_;

  std::size_t stage_ = 0;
  std::int64_t step_ = 0;
  std::vector<ParamGroup> groups_;
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::optional<TensorArchive> pending_state_;
};

}  // namespace promptrecon
