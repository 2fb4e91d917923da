#include "promptrecon/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "promptrecon/errors.hpp"
#include "promptrecon/gridio.hpp"
#include "promptrecon/gsplat.hpp"

namespace promptrecon {

namespace fs = std::filesystem;

std::string param_module_of(const std::string& param_name) {
  return param_name.substr(0, param_name.find('.'));
}

std::string param_group_of(const std::string& param_name) {
  const std::string m = param_module_of(param_name);
  if (m == "patch_embed") return "patch";
  if (m == "backbone" || m == "point_head" || m == "depth_head" || m == "camera_head") return "core";
  if (m == "prior_encoder" || m == "normal_head" || m == "gs_head" || m == "gs_attr") return "new";
  throw ConfigError("parameter '" + param_name + "' belongs to no learning-rate group");
}

std::vector<ParamGroup> build_param_groups(ReconModel& model, const OptimConfig& cfg,
                                           const std::vector<std::string>& frozen) {
  std::vector<ParamGroup> groups{{"patch", cfg.lr_patch * cfg.lr_scale, {}, {}},
                                 {"core", cfg.lr_core * cfg.lr_scale, {}, {}},
                                 {"new", cfg.lr_new * cfg.lr_scale, {}, {}}};
  for (const auto& item : model->named_parameters()) {
    const std::string g = param_group_of(item.key());
    if (std::find(frozen.begin(), frozen.end(), param_module_of(item.key())) != frozen.end()) continue;
    auto& dst = g == "patch" ? groups[0] : g == "core" ? groups[1] : groups[2];
    dst.names.push_back(item.key());
    dst.params.push_back(item.value());
  }
  return groups;
}

double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min) {
  if (total <= 0 || step <= 0) return lr_max;
  if (step >= total) return lr_min;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t));
}

std::mt19937_64 step_rng(std::uint64_t seed, std::size_t stage, std::int64_t step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(step),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

std::vector<SceneSource> load_dataset(const std::string& root) {
  std::vector<SceneSource> out;
  for (const auto& dir : list_scenes(root)) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw DataError("missing manifest.json in " + dir);
    nlohmann::json m;
    try {
      f >> m;
    } catch (const nlohmann::json::exception&) {
      throw DataError("manifest in " + dir + " is not valid JSON");
    }
    if (!m.contains("seed") || !m["seed"].is_number_unsigned()) throw DataError("manifest: bad 'seed' in " + dir);
    if (!m.contains("spec")) throw DataError("manifest: missing field 'spec' in " + dir);
    out.push_back({m["seed"].get<std::uint64_t>(), SceneSpec::from_json(m["spec"])});
  }
  if (out.empty()) throw DataError("no scenes below " + root);
  return out;
}

const SceneSample& SceneCache::get(const SceneSource& src, int height, int width) {
  const auto key = std::make_tuple(src.seed, src.spec.views, height, width);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  if (cache_.size() >= capacity_) cache_.clear();
  SceneSpec spec = src.spec;
  spec.height = height;
  spec.width = width;
  SceneSample s = generate_scene(src.seed, spec);
  for (auto& img : s.images) img = quantize_8bit(img);
  return cache_.emplace(key, std::move(s)).first->second;
}

namespace {

bool encoder_trainable(ReconModel& model) {
  for (const auto& item : model->named_parameters()) {
    const std::string m = param_module_of(item.key());
    if ((m == "patch_embed" || m == "prior_encoder" || m == "backbone") && item.value().requires_grad()) return true;
  }
  return false;
}

void fill_dense(LossInputs& in, const Predictions& pred, const SceneTargets& t, const HeadSelection& heads) {
  in.valid = t.valid;
  if (heads.point) {
    in.pointmap = pred.pointmap;
    in.point_conf = pred.point_conf;
    in.point_target = t.pointmap;
  }
  if (heads.depth) {
    in.depth = pred.depth;
    in.depth_conf = pred.depth_conf;
    in.depth_target = t.depth;
  }
  if (heads.normal) {
    in.normals = pred.normals;
    in.normal_target = t.normals;
  }
  if (heads.camera) {
    in.camera = pred.camera;
    in.camera_target = t.camera;
  }
}

LossBreakdown gaussian_stage_loss(ReconModel& model, const SceneSample& scene, const PriorBundle& priors,
                                  const StageSpec& stage, const LossWeights& w, const GsConfig& gs,
                                  std::mt19937_64& rng) {
  const ViewSplit split = select_split(scene.depths, scene.cams, gs.split_candidates, rng, gs.context_views);
  const auto& ctx = split.context_ids;
  // Whole-scene units, shared with the depth head.
  const SceneTargets t = make_targets(scene, ctx, model_frame_scale(scene.cams));
  const PriorBundle ctx_priors = priors.select(ctx);
  const int H = scene.height(), W = scene.width();

  BackboneOutput tokens;
  if (encoder_trainable(model)) {
    tokens = model->encode(t.images, ctx_priors);
  } else {
    torch::NoGradGuard no_grad;
    tokens = model->encode(t.images, ctx_priors);
  }
  HeadSelection heads = stage.heads;
  Predictions pred = model->decode(tokens, t.images, heads);

  torch::Tensor depth_ref, depth_conf;
  CameraSet pred_cams;
  {
    torch::NoGradGuard no_grad;
    HeadSelection extra = HeadSelection::none();
    extra.depth = !heads.depth;
    extra.camera = gs.use_predicted_cameras && !heads.camera;
    Predictions aux = (extra.depth || extra.camera) ? model->decode(tokens, t.images, extra) : Predictions{};
    depth_ref = (heads.depth ? pred.depth : aux.depth).detach();
    depth_conf = (heads.depth ? pred.depth_conf : aux.depth_conf).detach();
    if (gs.use_predicted_cameras) pred_cams = cameras_from_prediction(heads.camera ? pred.camera : aux.camera, H, W);
  }

  // Every view in the frame of the first context view, scaled by the
  // context-set alpha.
  CameraSet frame = frame_cameras(scene.cams, static_cast<std::size_t>(ctx.front()), t.scale);
  if (gs.use_predicted_cameras) {
    for (std::size_t k = 0; k < ctx.size(); ++k) {
      frame.poses[ctx[k]] = pred_cams.poses[k];
      frame.intrinsics[ctx[k]] = pred_cams.intrinsics[k];
    }
  }
  const GaussianCloud cloud = voxel_prune(build_cloud(pred.gs_depth, pred.gs, frame, ctx), gs.voxel);

  std::vector<Grid<float>> ctx_depths;
  std::vector<Pose> ctx_poses;
  std::vector<Intrinsics> ctx_intr;
  for (int c : ctx) {
    ctx_depths.push_back(scene.depths[c]);
    ctx_poses.push_back(scene.cams.poses[c]);
    ctx_intr.push_back(scene.cams.intrinsics[c]);
  }

  std::vector<int> views = ctx;
  views.insert(views.end(), split.target_ids.begin(), split.target_ids.end());
  std::vector<torch::Tensor> images, targets, masks, ctx_rendered_depth;
  for (std::size_t k = 0; k < views.size(); ++k) {
    const int v = views[k];
    const RenderOutput r = render(cloud, frame.poses[v], frame.intrinsics[v], gs.background);
    images.push_back(r.image);
    targets.push_back(grids_to_tensor({scene.images[v]})[0]);
    if (k < ctx.size()) {
      masks.push_back(torch::ones({H, W}, torch::kBool));
      ctx_rendered_depth.push_back(r.depth);
    } else {
      const VisibilityMask vis = novel_view_mask(scene.depths[v], scene.cams.poses[v], scene.cams.intrinsics[v],
                                                 ctx_depths, ctx_poses, ctx_intr, gs.visibility_tol);
      masks.push_back(masks_to_tensor({vis.mask})[0]);
    }
  }

  LossInputs in;
  fill_dense(in, pred, t, heads);
  in.valid = t.valid;
  in.rendered = torch::stack(images);
  in.render_target = torch::stack(targets);
  in.render_mask = torch::stack(masks);
  in.gs_depth = pred.gs_depth;
  in.gs_conf = pred.gs_conf;
  in.gs_depth_target = t.depth;
  in.gs_valid = t.valid;
  in.rendered_depth = torch::stack(ctx_rendered_depth);
  in.consis_depth = depth_ref;
  in.consis_mask = confidence_top_mask(depth_conf, t.valid, w.consis_quantile);
  return total_loss(in, w);
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string csv_header() {
  std::string h = "stage,step,lr_factor,height,width,scene";
  for (const auto& n : loss_term_names()) h += "," + n;
  return h;
}

}  // namespace

LossBreakdown scene_loss(ReconModel& model, const SceneSample& scene, const PriorBundle& priors,
                         const StageSpec& stage, const LossWeights& weights, const GsConfig& gs,
                         std::mt19937_64& rng) {
  if (stage.heads.gs) return gaussian_stage_loss(model, scene, priors, stage, weights, gs, rng);
  const SceneTargets t = make_targets(scene);
  const Predictions pred = model->forward(t.images, priors, stage.heads);
  LossInputs in;
  fill_dense(in, pred, t, stage.heads);
  return total_loss(in, weights);
}

Trainer::Trainer(RunConfig cfg, std::vector<SceneSource> data, std::string out_dir)
    : cfg_(std::move(cfg)), data_sources_(std::move(data)), out_(std::move(out_dir)) {
  cfg_.validate();
  settings_ = cfg_.train();
  optim_ = cfg_.optim();
  weights_ = cfg_.loss();
  priors_ = cfg_.priors();
  data_ = cfg_.data();
  gs_ = cfg_.gs();
  if (data_sources_.empty()) throw DataError("training needs at least one scene");
  if (settings_.stages.empty()) throw ConfigError("curriculum has no stages");
  torch::manual_seed(settings_.seed);
  model_ = ReconModel(cfg_.model());
  model_->train();
  fs::create_directories(out_);
  cfg_.save(out_ + "/config.json");
}

std::int64_t Trainer::stage_steps(std::size_t stage) const {
  const std::int64_t per_epoch =
      settings_.steps_per_epoch > 0 ? settings_.steps_per_epoch : static_cast<std::int64_t>(data_sources_.size());
  return per_epoch * settings_.stages.at(stage).epochs;
}

void Trainer::begin_stage(std::size_t stage) {
  const StageSpec& st = settings_.stages.at(stage);
  for (auto& item : model_->named_parameters()) {
    const bool frozen =
        std::find(st.frozen.begin(), st.frozen.end(), param_module_of(item.key())) != st.frozen.end();
    item.value().set_requires_grad(!frozen);
  }
  // The Gaussian head starts from the depth head the first time it trains.
  const bool gs_trained_before = std::any_of(settings_.stages.begin(), settings_.stages.begin() + stage,
                                             [](const StageSpec& s) { return s.heads.gs; });
  const bool gs_frozen = std::find(st.frozen.begin(), st.frozen.end(), "gs_head") != st.frozen.end();
  if (gs_.warm_start && st.heads.gs && !gs_frozen && !gs_trained_before && step_ == 0) model_->warm_start_gs_head();

  auto all = build_param_groups(model_, optim_, st.frozen);
  groups_.clear();
  std::vector<torch::optim::OptimizerParamGroup> pg;
  for (auto& g : all) {
    if (g.params.empty()) continue;
    auto o = std::make_unique<torch::optim::AdamWOptions>(g.base_lr);
    o->betas({optim_.beta1, optim_.beta2}).eps(optim_.eps).weight_decay(optim_.weight_decay);
    pg.emplace_back(g.params, std::move(o));
    groups_.push_back(std::move(g));
  }
  if (groups_.empty()) throw ConfigError("stage '" + st.name + "' has no trainable parameters");
  opt_ = std::make_unique<torch::optim::AdamW>(std::move(pg), torch::optim::AdamWOptions(optim_.lr_core));

  if (pending_state_) {
    const auto& meta = pending_state_->meta;
    const auto& steps = meta.at("optimizer_steps");
    for (const auto& g : groups_) {
      for (std::size_t i = 0; i < g.names.size(); ++i) {
        const auto* m1 = pending_state_->find("opt." + g.names[i] + ".exp_avg");
        const auto* m2 = pending_state_->find("opt." + g.names[i] + ".exp_avg_sq");
        if (!m1 || !m2 || !steps.contains(g.names[i])) continue;
        auto s = std::make_unique<torch::optim::AdamWParamState>();
        s->step(steps.at(g.names[i]).get<std::int64_t>());
        s->exp_avg(m1->clone());
        s->exp_avg_sq(m2->clone());
        opt_->state()[g.params[i].unsafeGetTensorImpl()] = std::move(s);
      }
    }
    pending_state_.reset();
  }
}

void Trainer::save_checkpoint(const std::string& prefix, std::size_t stage, std::int64_t next_step) {
  TensorArchive a;
  add_model_to_archive(model_, a);
  nlohmann::json steps = nlohmann::json::object();
  if (opt_) {
    auto& state = opt_->state();
    for (const auto& g : groups_) {
      for (std::size_t i = 0; i < g.names.size(); ++i) {
        auto it = state.find(g.params[i].unsafeGetTensorImpl());
        if (it == state.end()) continue;
        auto& s = static_cast<torch::optim::AdamWParamState&>(*it->second);
        a.tensors.emplace_back("opt." + g.names[i] + ".exp_avg", s.exp_avg());
        a.tensors.emplace_back("opt." + g.names[i] + ".exp_avg_sq", s.exp_avg_sq());
        steps[g.names[i]] = s.step();
      }
    }
  }
  a.meta["kind"] = "train_state";
  a.meta["stage_index"] = stage;
  a.meta["stage"] = settings_.stages.at(stage).name;
  a.meta["next_step"] = next_step;
  a.meta["optimizer_steps"] = steps;
  a.meta["config"] = cfg_.tree();
  save_archive(a, prefix);
}

void Trainer::resume(const std::string& prefix) {
  TensorArchive a = load_archive(prefix);
  if (a.meta.value("kind", "") != "train_state") throw DataError(prefix + " is not a training checkpoint");
  if (a.meta.contains("config") && a.meta["config"].contains("model") &&
      a.meta["config"]["model"] != cfg_.tree().at("model"))
    throw ConfigError("checkpoint model configuration differs from the run configuration");
  load_model_from_archive(model_, a);
  stage_ = a.meta.at("stage_index").get<std::size_t>();
  step_ = a.meta.at("next_step").get<std::int64_t>();
  if (stage_ >= settings_.stages.size()) throw DataError("checkpoint stage index is outside the curriculum");
  pending_state_ = std::move(a);
}

void Trainer::append_log(const StepLog& log) {
  std::ofstream f(out_ + "/" + log.stage + ".log.csv", std::ios::app);
  if (!f) throw DataError("cannot write training log in " + out_);
  f << log.stage << "," << log.step << "," << format_value(log.lr_factor) << "," << log.height << ","
    << log.width << "," << log.scene;
  for (const auto& n : loss_term_names()) {
    f << ",";
    auto it = log.terms.find(n);
    if (it != log.terms.end()) f << format_value(it->second);
  }
  f << "\n";
}

StepLog Trainer::train_step(std::size_t stage, std::int64_t step) {
  const StageSpec& st = settings_.stages.at(stage);
  const std::int64_t total = stage_steps(stage);
  const auto D = static_cast<std::int64_t>(data_sources_.size());
  const std::int64_t per_epoch = total / std::max(1, st.epochs);
  const std::int64_t epoch = step / std::max<std::int64_t>(1, per_epoch);

  std::vector<std::size_t> order(data_sources_.size());
  std::iota(order.begin(), order.end(), 0);
  auto erng = step_rng(settings_.seed, stage, epoch, 1);
  std::shuffle(order.begin(), order.end(), erng);
  const SceneSource& src = data_sources_[order[(step % std::max<std::int64_t>(1, per_epoch)) % D]];

  auto rng = step_rng(settings_.seed, stage, step);
  int H = data_.fixed_height, W = data_.fixed_width;
  if (H <= 0 || W <= 0) {
    ResolutionPolicy p = data_.policy;
    p.stage_multiplier *= st.resolution_multiplier;
    std::tie(H, W) = sample_resolution(p, rng);
  }
  const SceneSample& scene = cache_.get(src, H, W);
  const PriorMask mask = sample_prior_mask(priors_.dropout_p, rng, scene.views(), priors_.per_view);
  const PriorBundle priors = scene_priors(scene, mask);

  const double factor = cosine_lr(step, total, 1.0, optim_.lr_min_ratio);
  auto& pgs = opt_->param_groups();
  for (std::size_t i = 0; i < groups_.size(); ++i) pgs[i].options().set_lr(groups_[i].base_lr * factor);

  opt_->zero_grad();
  LossBreakdown loss = scene_loss(model_, scene, priors, st, weights_, gs_, rng);
  loss.total.backward();
  std::vector<torch::Tensor> params;
  for (const auto& g : groups_) params.insert(params.end(), g.params.begin(), g.params.end());
  const double norm = torch::nn::utils::clip_grad_norm_(params, optim_.grad_clip);
  if (!std::isfinite(norm))
    throw TrainingFault("grad_norm", "non-finite gradient norm at stage '" + st.name + "' step " + std::to_string(step));
  opt_->step();

  StepLog log;
  log.stage = st.name;
  log.step = step;
  log.lr_factor = factor;
  log.height = H;
  log.width = W;
  log.scene = src.seed;
  log.terms = loss.terms;
  return log;
}

std::vector<StageReport> Trainer::run(std::optional<std::int64_t> max_steps) {
  std::vector<StageReport> reports;
  std::int64_t done = 0;
  for (; stage_ < settings_.stages.size(); ++stage_, step_ = 0) {
    const StageSpec& st = settings_.stages[stage_];
    const std::int64_t total = stage_steps(stage_);
    begin_stage(stage_);

    // Keep only log rows that precede the current position.
    const std::string log_path = out_ + "/" + st.name + ".log.csv";
    std::vector<std::string> rows;
    if (step_ > 0) {
      std::ifstream in(log_path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string name, s;
        std::getline(ls, name, ',');
        std::getline(ls, s, ',');
        if (!s.empty() && std::stoll(s) < step_) rows.push_back(line);
      }
    }
    {
      std::ofstream out(log_path, std::ios::trunc);
      if (!out) throw DataError("cannot write " + log_path);
      out << csv_header() << "\n";
      for (const auto& r : rows) out << r << "\n";
    }

    StageReport rep;
    rep.stage = st.name;
    while (step_ < total) {
      if (max_steps && done >= *max_steps) {
        save_checkpoint(out_ + "/" + st.name + "_last", stage_, step_);
        rep.next_step = step_;
        reports.push_back(std::move(rep));
        return reports;
      }
      StepLog log = train_step(stage_, step_);
      ++step_;
      ++done;
      ++rep.steps_run;
      append_log(log);
      if (on_step) on_step(log);
      rep.logs.push_back(std::move(log));
      if (settings_.checkpoint_every > 0 && step_ % settings_.checkpoint_every == 0 && step_ < total)
        save_checkpoint(out_ + "/" + st.name + "_last", stage_, step_);
    }
    save_checkpoint(out_ + "/" + st.name, stage_, total);
    rep.next_step = total;
    rep.finished = true;
    reports.push_back(std::move(rep));
  }
  for (auto& p : model_->parameters()) p.set_requires_grad(true);
  TensorArchive final_archive;
  add_model_to_archive(model_, final_archive);
  final_archive.meta["kind"] = "model";
  final_archive.meta["config"] = cfg_.tree();
  save_archive(final_archive, out_ + "/final");
  return reports;
}

}  // namespace promptrecon
