// promptrecon: dataset generation, training, inference, evaluation and
// rendering. Exit codes: 0 success, 1 usage or configuration, 2 data,
// 3 numerical fault.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "promptrecon/config.hpp"
#include "promptrecon/errors.hpp"
#include "promptrecon/evalsuite.hpp"
#include "promptrecon/gridio.hpp"
#include "promptrecon/gsplat.hpp"
#include "promptrecon/model.hpp"
#include "promptrecon/pipeline.hpp"
#include "promptrecon/synthdata.hpp"
#include "promptrecon/trainer.hpp"

namespace fs = std::filesystem;
using namespace promptrecon;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << j.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---- gen-data ----------------------------------------------------------------

struct GenArgs {
  std::string out;
  int scenes = 10;
  int views = 4;
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  std::string policy;  // "min_pixels:max_pixels[:aspect_min:aspect_max]"
  int patch = 16;
};

int cmd_gen_data(const GenArgs& a) {
  if (a.scenes < 1) throw ConfigError("--scenes must be positive");
  SceneSpec spec;
  spec.views = a.views;
  spec.height = a.height;
  spec.width = a.width;
  std::optional<ResolutionPolicy> policy;
  if (!a.policy.empty()) {
    std::vector<double> v;
    std::stringstream ss(a.policy);
    std::string item;
    while (std::getline(ss, item, ':')) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError("--resolution-policy: '" + item + "' is not a number");
      }
    }
    if (v.size() != 2 && v.size() != 4) throw ConfigError("--resolution-policy expects min:max or min:max:aspect_min:aspect_max");
    ResolutionPolicy p;
    p.min_pixels = v[0];
    p.max_pixels = v[1];
    if (v.size() == 4) {
      p.aspect_min = v[2];
      p.aspect_max = v[3];
    }
    p.patch = a.patch;
    p.validate();
    if (p.admissible().empty()) throw ConfigError("resolution policy admits no patch-aligned resolution");
    policy = p;
  }
  spec.validate();
  fs::create_directories(a.out);
  std::mt19937_64 rng(a.seed);
  for (int i = 0; i < a.scenes; ++i) {
    SceneSpec s = spec;
    if (policy) std::tie(s.height, s.width) = sample_resolution(*policy, rng);
    const std::uint64_t seed = a.seed + static_cast<std::uint64_t>(i);
    write_scene(generate_scene(seed, s), a.out + "/" + scene_dir_name(seed));
  }
  write_json({{"command", "gen-data"},
              {"scenes", a.scenes},
              {"seed", a.seed},
              {"spec", spec.to_json()},
              {"resolution_policy", a.policy}},
             a.out + "/dataset.json");
  std::cout << "wrote " << a.scenes << " scenes to " << a.out << "\n";
  return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> sets;
  std::int64_t max_steps = -1;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.resume.empty() && a.config.empty()) {
    const TensorArchive ck = load_archive(a.resume);
    if (!ck.meta.contains("config")) throw DataError(a.resume + " carries no configuration");
    cfg.merge(ck.meta["config"], a.resume);
  }
  if (!a.config.empty()) cfg.merge_file(a.config);
  for (const auto& s : a.sets) cfg.set(s);
  cfg.validate();

  Trainer trainer(cfg, load_dataset(a.data), a.out);
  if (!a.resume.empty()) trainer.resume(a.resume);
  const int every = std::max(1, cfg.train().log_every);
  trainer.on_step = [&](const StepLog& log) {
    if ((log.step + 1) % every) return;
    std::printf("[%s] step %lld  %dx%d  lr x%.3f  total %.5f\n", log.stage.c_str(),
                static_cast<long long>(log.step + 1), log.height, log.width, log.lr_factor, log.terms.at("total"));
    std::fflush(stdout);
  };
  const auto reports = trainer.run(a.max_steps >= 0 ? std::optional<std::int64_t>(a.max_steps) : std::nullopt);
  for (const auto& r : reports)
    std::cout << r.stage << ": " << r.steps_run << " steps" << (r.finished ? " (finished)" : " (paused)") << "\n";
  return 0;
}

// ---- infer -------------------------------------------------------------------

struct InferArgs {
  std::string ckpt, images, pose_prior, intr_prior, depth_prior, out;
  std::vector<std::string> sets;
};

std::vector<Grid<float>> read_image_dir(const std::string& dir) {
  std::vector<Grid<float>> out;
  for (int i = 0;; ++i) {
    const std::string p = dir + "/view_" + std::to_string(i) + ".png";
    if (!fs::exists(p)) break;
    out.push_back(read_png(p));
  }
  if (out.empty()) throw DataError("no view_<i>.png images in " + dir);
  for (const auto& g : out)
    if (!g.same_extent(out.front().height, out.front().width)) throw DataError("images in " + dir + " differ in size");
  return out;
}

int cmd_infer(const InferArgs& a) {
  const TensorArchive ck = load_archive(a.ckpt);
  ReconModel model = model_from_archive(ck);
  RunConfig cfg;
  if (ck.meta.contains("config")) cfg.merge(ck.meta["config"], a.ckpt);
  for (const auto& s : a.sets) cfg.set(s);
  cfg.validate();

  const auto images = read_image_dir(a.images);
  const std::size_t n = images.size();
  PriorBundle priors = PriorBundle::none(n);
  if (!a.pose_prior.empty()) {
    const CameraSet c = read_cameras(a.pose_prior);
    if (c.size() != n) throw DataError("pose prior has " + std::to_string(c.size()) + " views, images have " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) priors.poses[i] = c.poses[i];
  }
  if (!a.intr_prior.empty()) {
    const CameraSet c = read_cameras(a.intr_prior);
    if (c.size() != n)
      throw DataError("intrinsics prior has " + std::to_string(c.size()) + " views, images have " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) priors.intrinsics[i] = c.intrinsics[i];
  }
  if (!a.depth_prior.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string p = a.depth_prior + "/depth_" + std::to_string(i) + ".bin";
      if (!fs::exists(p)) throw DataError("depth prior missing " + p);
      priors.depths[i] = read_float_grid(p);
    }
    if (fs::exists(a.depth_prior + "/depth_" + std::to_string(n) + ".bin"))
      throw DataError("depth prior has more views than the images");
  }
  priors.validate(images.front().height, images.front().width);

  const GsConfig gs = cfg.gs();
  const Inference inf = run_inference(model, images, priors, gs);
  const auto rendered = render_views(inf.cloud, inf.cloud_cams, gs);
  nlohmann::json sidecar = {{"command", "infer"},
                            {"checkpoint", a.ckpt},
                            {"images", a.images},
                            {"priors", {{"pose", !a.pose_prior.empty()},
                                        {"intrinsics", !a.intr_prior.empty()},
                                        {"depth", !a.depth_prior.empty()}}},
                            {"voxel_size", gs.voxel},
                            {"config", cfg.tree()}};
  write_inference(inf, rendered, a.out, sidecar);
  cfg.save(a.out + "/config.json");
  std::cout << "wrote predictions for " << n << " views to " << a.out << "\n";
  return 0;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, tasks = "depth,points,normals,cameras,nvs", depth_scaling = "video", out;
};

int cmd_eval(const EvalArgs& a) {
  const auto tasks = split_list(a.tasks);
  if (tasks.empty()) throw ConfigError("--tasks is empty");
  const MetricReport r = evaluate_dirs(a.pred, a.gt, tasks, parse_depth_scaling(a.depth_scaling));
  const std::string prefix = a.out.empty() ? a.pred + "/report" : a.out;
  if (fs::path(prefix).has_parent_path()) fs::create_directories(fs::path(prefix).parent_path());
  write_json(r.to_json(), prefix + ".json");
  std::ofstream csv(prefix + ".csv");
  if (!csv) throw DataError("cannot write " + prefix + ".csv");
  csv << r.to_csv();
  for (const auto& [name, m] : r.metrics) {
    std::cout << name << " = ";
    if (m.value) std::cout << *m.value;
    else std::cout << "undefined";
    std::cout << " " << m.unit << "\n";
  }
  return 0;
}

// ---- render ------------------------------------------------------------------

struct RenderArgs {
  std::string cloud, camera, out;
  int view = 0;
  std::vector<double> background{0.0, 0.0, 0.0};
};

int cmd_render(const RenderArgs& a) {
  const GaussianCloud cloud = read_cloud(a.cloud);
  const CameraSet cams = read_cameras(a.camera);
  if (a.view < 0 || static_cast<std::size_t>(a.view) >= cams.size())
    throw DataError("--view " + std::to_string(a.view) + " is outside the camera file");
  if (a.background.size() != 3) throw ConfigError("--background expects three values");
  const std::array<double, 3> bg{a.background[0], a.background[1], a.background[2]};
  RenderOutput r;
  {
    torch::NoGradGuard no_grad;
    r = render(cloud, cams.poses[a.view], cams.intrinsics[a.view], bg);
  }
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  write_png(tensor_to_grid(r.image.clamp(0.0, 1.0)), a.out);
  write_float_grid(tensor_to_grid(r.depth), a.out + ".depth.bin");
  write_float_grid(tensor_to_grid(r.alpha), a.out + ".alpha.bin");
  write_json({{"command", "render"},
              {"cloud", a.cloud},
              {"camera", a.camera},
              {"view", a.view},
              {"background", a.background},
              {"gaussians", cloud.size()},
              {"mean_alpha", r.alpha.mean().item<double>()}},
             a.out + ".json");
  std::cout << "rendered " << cloud.size() << " gaussians to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptrecon: prompted multi-view reconstruction"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate synthetic scenes");
  g->add_option("--out", gen.out, "Dataset directory")->required();
  g->add_option("--scenes", gen.scenes, "Number of scenes")->capture_default_str();
  g->add_option("--views", gen.views, "Views per scene")->capture_default_str();
  g->add_option("--seed", gen.seed, "Seed of the first scene; scene i uses seed + i")->capture_default_str();
  g->add_option("--height", gen.height, "Image height without a policy")->capture_default_str();
  g->add_option("--width", gen.width, "Image width without a policy")->capture_default_str();
  g->add_option("--resolution-policy", gen.policy, "min_pixels:max_pixels[:aspect_min:aspect_max], one draw per scene");
  g->add_option("--patch", gen.patch, "Patch size the policy aligns to")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Run the training curriculum");
  t->add_option("--config", tr.config, "JSON config merged over the defaults");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--resume", tr.resume, "Checkpoint prefix to continue from");
  t->add_option("--set", tr.sets, "key=value override (repeatable)");
  t->add_option("--max-steps", tr.max_steps, "Pause after this many optimizer steps");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Predict geometry, cameras and Gaussians");
  i->add_option("--ckpt", inf.ckpt, "Checkpoint prefix")->required();
  i->add_option("--images", inf.images, "Directory with view_<i>.png")->required();
  i->add_option("--pose-prior", inf.pose_prior, "cameras.json whose poses are used as priors");
  i->add_option("--intr-prior", inf.intr_prior, "cameras.json whose intrinsics are used as priors");
  i->add_option("--depth-prior", inf.depth_prior, "Directory with depth_<i>.bin priors");
  i->add_option("--out", inf.out, "Output directory")->required();
  i->add_option("--set", inf.sets, "key=value override (repeatable)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predictions against ground truth");
  e->add_option("--pred", ev.pred, "Prediction tree (scene_<seed>/...)")->required();
  e->add_option("--gt", ev.gt, "Dataset tree")->required();
  e->add_option("--tasks", ev.tasks, "Comma list of depth,points,normals,cameras,nvs")->capture_default_str();
  e->add_option("--depth-scaling", ev.depth_scaling, "none, mono or video")->capture_default_str();
  e->add_option("--out", ev.out, "Report prefix (default <pred>/report)");

  RenderArgs rd;
  auto* r = app.add_subcommand("render", "Render a Gaussian cloud");
  r->add_option("--cloud", rd.cloud, "cloud.bin")->required();
  r->add_option("--camera", rd.camera, "cameras.json")->required();
  r->add_option("--view", rd.view, "Camera index")->capture_default_str();
  r->add_option("--background", rd.background, "Three background values in [0, 1]")->expected(3);
  r->add_option("--out", rd.out, "Output PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*i) return cmd_infer(inf);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_render(rd);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const TrainingFault& err) {
    std::cerr << "numerical fault: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
