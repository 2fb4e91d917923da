#include "promptrecon/config.hpp"

#include <fstream>
#include <sstream>

#include "promptrecon/errors.hpp"

namespace promptrecon {

namespace {

using json = nlohmann::json;

json default_tree() {
  const ModelConfig m;
  const LossWeights l;
  const OptimConfig o;
  const ResolutionPolicy r;
  const GsConfig g;
  auto stage = [](const std::string& name, int epochs, std::vector<std::string> heads, std::vector<std::string> frozen) {
    return json{{"name", name},
                {"epochs", epochs},
                {"heads", heads},
                {"data_mix", "synthetic"},
                {"resolution_multiplier", 1.0},
                {"frozen", frozen}};
  };
  return {
      {"seed", 0},
      {"model",
       {{"token_dim", m.backbone.token_dim},
        {"depth", m.backbone.depth},
        {"heads", m.backbone.heads},
        {"patch_size", m.backbone.patch},
        {"mlp_ratio", m.backbone.mlp_ratio},
        {"max_grid", m.backbone.max_grid},
        {"dpt_features", m.dpt.features},
        {"dpt_channels", m.dpt.channels},
        {"head_channels", m.dpt.head_channels},
        {"gs_feature_dim", m.dpt.gs_feature_dim},
        {"camera_head_depth", m.camera_head_depth},
        {"gs_max_scale", m.gs_max_scale},
        {"prior_embedding", to_string(m.prior_embedding)}}},
      {"priors", {{"dropout_p", 0.5}, {"per_view", false}}},
      {"loss", l.to_json()},
      {"optim",
       {{"lr_patch", o.lr_patch},
        {"lr_core", o.lr_core},
        {"lr_new", o.lr_new},
        {"lr_scale", o.lr_scale},
        {"lr_min_ratio", o.lr_min_ratio},
        {"weight_decay", o.weight_decay},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"eps", o.eps},
        {"grad_clip", o.grad_clip}}},
      {"data",
       {{"min_pixels", r.min_pixels},
        {"max_pixels", r.max_pixels},
        {"aspect_min", r.aspect_min},
        {"aspect_max", r.aspect_max},
        {"stage_multiplier", 0.02},
        {"fixed_height", 0},
        {"fixed_width", 0}}},
      {"gs",
       {{"voxel", g.voxel},
        {"split_candidates", g.split_candidates},
        {"context_views", g.context_views},
        {"visibility_tol", g.visibility_tol},
        {"use_predicted_cameras", g.use_predicted_cameras},
        {"warm_start", g.warm_start},
        {"background", g.background}}},
      {"train",
       {{"steps_per_epoch", 0},
        {"log_every", 10},
        {"checkpoint_every", 100}}},
      {"curriculum",
       {{"stages",
         json::array({stage("stage1", 20, {"point", "depth", "camera"}, {}),
                      stage("stage2", 10, {"point", "depth", "camera", "normal"}, {}),
                      stage("stage3", 10, {"gs"},
                            {"patch_embed", "prior_encoder", "backbone", "point_head", "depth_head", "normal_head",
                             "camera_head"})})}}},
  };
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers must stay integers; floats accept any number.
    return a.is_number_float() || !b.is_number_float();
  }
  return a.type() == b.type();
}

void merge_into(json& dst, const json& src, const std::string& path, const std::string& source) {
  if (dst.is_object()) {
    if (!src.is_object()) throw ConfigError(source + ": '" + path + "' must be an object");
    for (const auto& [k, v] : src.items()) {
      const std::string key = path.empty() ? k : path + "." + k;
      if (!dst.contains(k)) throw ConfigError(source + ": unknown config key '" + key + "'");
      merge_into(dst[k], v, key, source);
    }
    return;
  }
  if (dst.is_array() && !dst.empty() && dst.front().is_object()) {
    // Arrays of objects (stages) are replaced wholesale, element by element
    // validated against the first default entry.
    if (!src.is_array()) throw ConfigError(source + ": '" + path + "' must be an array");
    json proto = dst.front();
    json out = json::array();
    for (std::size_t i = 0; i < src.size(); ++i) {
      json e = i < dst.size() ? dst[i] : proto;
      merge_into(e, src[i], path + "." + std::to_string(i), source);
      out.push_back(e);
    }
    dst = out;
    return;
  }
  if (!same_kind(dst, src)) {
    throw ConfigError(source + ": '" + path + "' expects " + std::string(dst.type_name()) + ", got " + src.type_name());
  }
  dst = src;
}

template <typename T>
T get(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() : tree_(default_tree()) {}

void RunConfig::merge(const json& doc, const std::string& source) { merge_into(tree_, doc, "", source); }

void RunConfig::merge_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  merge(doc, path);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &tree_;
  std::stringstream ss(key);
  std::string part, walked;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    walked += (walked.empty() ? "" : ".") + parts[i];
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(parts[i]);
      } catch (const std::exception&) {
        throw ConfigError("override '" + key + "': '" + parts[i] + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override '" + key + "': index out of range");
      node = &(*node)[idx];
    } else if (node->is_object() && node->contains(parts[i])) {
      node = &(*node)[parts[i]];
    } else {
      throw ConfigError("unknown config key '" + walked + "'");
    }
  }
  merge_into(*node, value, key, "--set");
}

void RunConfig::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << tree_.dump(2) << "\n";
}

ModelConfig RunConfig::model() const {
  const auto& j = tree_.at("model");
  ModelConfig m;
  m.backbone.token_dim = get<int>(j, "token_dim");
  m.backbone.depth = get<int>(j, "depth");
  m.backbone.heads = get<int>(j, "heads");
  m.backbone.patch = get<int>(j, "patch_size");
  m.backbone.mlp_ratio = get<double>(j, "mlp_ratio");
  m.backbone.max_grid = get<int>(j, "max_grid");
  m.dpt.features = get<int>(j, "dpt_features");
  m.dpt.channels = get<std::array<int, 4>>(j, "dpt_channels");
  m.dpt.head_channels = get<int>(j, "head_channels");
  m.dpt.gs_feature_dim = get<int>(j, "gs_feature_dim");
  m.camera_head_depth = get<int>(j, "camera_head_depth");
  m.gs_max_scale = get<double>(j, "gs_max_scale");
  m.prior_embedding = parse_prior_embedding(get<std::string>(j, "prior_embedding"));
  m.validate();
  return m;
}

LossWeights RunConfig::loss() const {
  const auto& j = tree_.at("loss");
  LossWeights w;
  w.points = get<double>(j, "points");
  w.depth = get<double>(j, "depth");
  w.cam = get<double>(j, "cam");
  w.normal = get<double>(j, "normal");
  w.gs = get<double>(j, "gs");
  w.lpips = get<double>(j, "lpips");
  w.gsdepth = get<double>(j, "gsdepth");
  w.consis = get<double>(j, "consis");
  w.alpha = get<double>(j, "alpha");
  w.alpha_l = get<double>(j, "alpha_l");
  w.huber_delta = get<double>(j, "huber_delta");
  w.consis_quantile = get<double>(j, "consis_quantile");
  w.validate();
  return w;
}

OptimConfig RunConfig::optim() const {
  const auto& j = tree_.at("optim");
  OptimConfig o;
  o.lr_patch = get<double>(j, "lr_patch");
  o.lr_core = get<double>(j, "lr_core");
  o.lr_new = get<double>(j, "lr_new");
  o.lr_scale = get<double>(j, "lr_scale");
  o.lr_min_ratio = get<double>(j, "lr_min_ratio");
  o.weight_decay = get<double>(j, "weight_decay");
  o.beta1 = get<double>(j, "beta1");
  o.beta2 = get<double>(j, "beta2");
  o.eps = get<double>(j, "eps");
  o.grad_clip = get<double>(j, "grad_clip");
  for (double lr : {o.lr_patch, o.lr_core, o.lr_new, o.lr_scale}) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  if (!(o.lr_min_ratio >= 0.0 && o.lr_min_ratio <= 1.0)) throw ConfigError("optim.lr_min_ratio must lie in [0, 1]");
  if (!(o.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0)) throw ConfigError("optim betas must lie in [0, 1)");
  if (!(o.grad_clip >= 0.0)) throw ConfigError("optim.grad_clip must be >= 0 (0 disables clipping)");
  return o;
}

PriorConfig RunConfig::priors() const {
  const auto& j = tree_.at("priors");
  PriorConfig p;
  p.dropout_p = get<double>(j, "dropout_p");
  p.per_view = get<bool>(j, "per_view");
  if (!(p.dropout_p >= 0.0 && p.dropout_p <= 1.0)) throw ConfigError("priors.dropout_p must lie in [0, 1]");
  return p;
}

DataConfig RunConfig::data() const {
  const auto& j = tree_.at("data");
  DataConfig d;
  d.policy.min_pixels = get<double>(j, "min_pixels");
  d.policy.max_pixels = get<double>(j, "max_pixels");
  d.policy.aspect_min = get<double>(j, "aspect_min");
  d.policy.aspect_max = get<double>(j, "aspect_max");
  d.policy.stage_multiplier = get<double>(j, "stage_multiplier");
  d.policy.patch = model().backbone.patch;
  d.fixed_height = get<int>(j, "fixed_height");
  d.fixed_width = get<int>(j, "fixed_width");
  d.policy.validate();
  if ((d.fixed_height > 0) != (d.fixed_width > 0)) throw ConfigError("data.fixed_height and data.fixed_width go together");
  if (d.fixed_height > 0 && (d.fixed_height % d.policy.patch || d.fixed_width % d.policy.patch)) {
    throw ConfigError("fixed training resolution must be a multiple of the patch size");
  }
  return d;
}

GsConfig RunConfig::gs() const {
  const auto& j = tree_.at("gs");
  GsConfig g;
  g.voxel = get<double>(j, "voxel");
  g.split_candidates = get<int>(j, "split_candidates");
  g.context_views = get<int>(j, "context_views");
  g.visibility_tol = get<double>(j, "visibility_tol");
  g.use_predicted_cameras = get<bool>(j, "use_predicted_cameras");
  g.warm_start = get<bool>(j, "warm_start");
  g.background = get<std::array<double, 3>>(j, "background");
  if (!(g.voxel > 0.0)) throw ConfigError("gs.voxel must be positive");
  if (g.split_candidates < 1) throw ConfigError("gs.split_candidates must be >= 1");
  if (!(g.visibility_tol > 0.0)) throw ConfigError("gs.visibility_tol must be positive");
  return g;
}

HeadSelection parse_heads(const std::vector<std::string>& names) {
  HeadSelection h = HeadSelection::none();
  for (const auto& n : names) {
    if (n == "point") h.point = true;
    else if (n == "depth") h.depth = true;
    else if (n == "normal") h.normal = true;
    else if (n == "camera") h.camera = true;
    else if (n == "gs") h.gs = true;
    else throw ConfigError("unknown head '" + n + "' (expected point, depth, normal, camera or gs)");
  }
  return h;
}

std::vector<std::string> head_names(const HeadSelection& h) {
  std::vector<std::string> out;
  if (h.point) out.push_back("point");
  if (h.depth) out.push_back("depth");
  if (h.normal) out.push_back("normal");
  if (h.camera) out.push_back("camera");
  if (h.gs) out.push_back("gs");
  return out;
}

TrainSettings RunConfig::train() const {
  TrainSettings t;
  t.seed = get<std::uint64_t>(tree_, "seed");
  const auto& j = tree_.at("train");
  t.steps_per_epoch = get<int>(j, "steps_per_epoch");
  t.log_every = get<int>(j, "log_every");
  t.checkpoint_every = get<int>(j, "checkpoint_every");
  if (t.steps_per_epoch < 0 || t.log_every < 1 || t.checkpoint_every < 0) {
    throw ConfigError("train.steps_per_epoch >= 0, train.log_every >= 1, train.checkpoint_every >= 0 required");
  }
  static const std::vector<std::string> modules{"patch_embed", "prior_encoder", "backbone", "point_head", "depth_head",
                                                "normal_head", "gs_head", "camera_head", "gs_attr"};
  for (const auto& s : tree_.at("curriculum").at("stages")) {
    StageSpec st;
    st.name = get<std::string>(s, "name");
    st.epochs = get<int>(s, "epochs");
    st.heads = parse_heads(get<std::vector<std::string>>(s, "heads"));
    st.data_mix = get<std::string>(s, "data_mix");
    st.resolution_multiplier = get<double>(s, "resolution_multiplier");
    st.frozen = get<std::vector<std::string>>(s, "frozen");
    if (st.epochs < 1) throw ConfigError("stage '" + st.name + "': epochs must be > 0");
    if (st.data_mix != "synthetic") throw ConfigError("stage '" + st.name + "': only the 'synthetic' data mix is available");
    if (!(st.resolution_multiplier > 0.0)) throw ConfigError("stage '" + st.name + "': resolution_multiplier must be positive");
    for (const auto& f : st.frozen) {
      if (std::find(modules.begin(), modules.end(), f) == modules.end()) {
        throw ConfigError("stage '" + st.name + "': unknown module '" + f + "' in frozen list");
      }
    }
    if (head_names(st.heads).empty()) throw ConfigError("stage '" + st.name + "' has no active head");
    t.stages.push_back(st);
  }
  if (t.stages.empty()) throw ConfigError("curriculum.stages is empty");
  return t;
}

void RunConfig::validate() const {
  model();
  loss();
  optim();
  priors();
  data();
  gs();
  train();
}

}  // namespace promptrecon
