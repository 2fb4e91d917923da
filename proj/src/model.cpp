#include "promptrecon/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "promptrecon/errors.hpp"

namespace fs = std::filesystem;

namespace promptrecon {

void ModelConfig::validate() const {
  backbone.validate();
  if (dpt.features < 2 || dpt.head_channels < 1 || dpt.gs_feature_dim < 0) throw ConfigError("invalid dense head widths");
  for (int c : dpt.channels)
    if (c < 1) throw ConfigError("dense head channels must be positive");
  if (camera_head_depth < 0) throw ConfigError("camera_head_depth must be >= 0");
  if (!(gs_max_scale > 0.0)) throw ConfigError("gs_max_scale must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"backbone", backbone.to_json()},
          {"dpt",
           {{"features", dpt.features},
            {"channels", dpt.channels},
            {"head_channels", dpt.head_channels},
            {"gs_feature_dim", dpt.gs_feature_dim}}},
          {"prior_embedding", to_string(prior_embedding)},
          {"camera_head_depth", camera_head_depth},
          {"gs_max_scale", gs_max_scale}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    const auto& b = j.at("backbone");
    c.backbone.depth = b.at("depth").get<int>();
    c.backbone.token_dim = b.at("token_dim").get<int>();
    c.backbone.heads = b.at("heads").get<int>();
    c.backbone.patch = b.at("patch_size").get<int>();
    c.backbone.mlp_ratio = b.at("mlp_ratio").get<double>();
    c.backbone.max_grid = b.at("max_grid").get<int>();
    const auto& d = j.at("dpt");
    c.dpt.features = d.at("features").get<int>();
    c.dpt.channels = d.at("channels").get<std::array<int, 4>>();
    c.dpt.head_channels = d.at("head_channels").get<int>();
    c.dpt.gs_feature_dim = d.at("gs_feature_dim").get<int>();
    c.prior_embedding = parse_prior_embedding(j.at("prior_embedding").get<std::string>());
    c.camera_head_depth = j.at("camera_head_depth").get<int>();
    c.gs_max_scale = j.at("gs_max_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ReconModelImpl::ReconModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& b = cfg.backbone;
  patch_embed = register_module("patch_embed", PatchEmbed(b.token_dim, b.patch, b.max_grid));
  prior_encoder = register_module("prior_encoder", PriorEncoder(b.token_dim, b.patch, cfg.prior_embedding));
  backbone = register_module("backbone", Backbone(b));
  const int cg = cfg.dpt.gs_feature_dim;
  point_head = register_module("point_head", DPTHead(b.token_dim, b.patch, cfg.dpt, dense_out_channels(DenseKind::kPoint, cg)));
  depth_head = register_module("depth_head", DPTHead(b.token_dim, b.patch, cfg.dpt, dense_out_channels(DenseKind::kDepth, cg)));
  normal_head = register_module("normal_head", DPTHead(b.token_dim, b.patch, cfg.dpt, dense_out_channels(DenseKind::kNormal, cg)));
  gs_head = register_module("gs_head", DPTHead(b.token_dim, b.patch, cfg.dpt, dense_out_channels(DenseKind::kGaussian, cg)));
  camera_head = register_module("camera_head", CameraHead(b.token_dim, b.heads, cfg.camera_head_depth, b.mlp_ratio));
  gs_attr = register_module("gs_attr", GaussianAttrHead(cg, cfg.gs_max_scale));
}

std::vector<int> ReconModelImpl::dense_layer_ids() const {
  const int depth = cfg_.backbone.depth;
  std::vector<int> ids;
  for (int k = 0; k < 4; ++k) {
    const int id = static_cast<int>(std::lround((k + 1) * depth / 4.0)) - 1;
    ids.push_back(std::clamp(id, 0, depth - 1));
  }
  return ids;
}

BackboneOutput ReconModelImpl::encode(const torch::Tensor& images, const PriorBundle& priors) {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("images must be [N, 3, H, W]");
  if (priors.views() != static_cast<std::size_t>(images.size(0))) {
    throw ShapeError("prior bundle has " + std::to_string(priors.views()) + " views, images have " +
                     std::to_string(images.size(0)));
  }
  const int H = static_cast<int>(images.size(2)), W = static_cast<int>(images.size(3));
  const int P = cfg_.backbone.patch;
  const torch::Tensor img_tokens = patch_embed->forward(images);
  const PromptTokens prompt = prior_encoder->forward(priors, H, W, images);
  return backbone->forward(assemble_prompt(img_tokens, prompt, H / P, W / P));
}

Predictions ReconModelImpl::decode(const BackboneOutput& tokens, const torch::Tensor& images, const HeadSelection& heads) {
  const int H = static_cast<int>(images.size(2)), W = static_cast<int>(images.size(3));
  std::vector<torch::Tensor> layers;
  for (int id : dense_layer_ids()) layers.push_back(tokens.patch_tokens(id));

  Predictions p;
  if (heads.point) {
    const auto raw = point_head->forward(layers, tokens.hp, tokens.wp, H, W);
    p.pointmap = raw.narrow(1, 0, 3);
    p.point_conf = confidence_activation(raw.select(1, 3));
  }
  if (heads.depth) {
    const auto raw = depth_head->forward(layers, tokens.hp, tokens.wp, H, W);
    p.depth = torch::nn::functional::softplus(raw.select(1, 0));
    p.depth_conf = confidence_activation(raw.select(1, 1));
  }
  if (heads.normal) p.normals = normalize_normals(normal_head->forward(layers, tokens.hp, tokens.wp, H, W));
  if (heads.camera) p.camera = camera_head->forward(tokens.camera_tokens());
  if (heads.gs) {
    const auto raw = gs_head->forward(layers, tokens.hp, tokens.wp, H, W);
    p.gs_depth = torch::nn::functional::softplus(raw.select(1, 0));
    p.gs_conf = confidence_activation(raw.select(1, 1));
    p.gs_features = raw.narrow(1, 2, cfg_.dpt.gs_feature_dim);
    p.gs = gs_attr->forward(p.gs_features, images);
  }
  return p;
}

void ReconModelImpl::warm_start_gs_head() {
  torch::NoGradGuard no_grad;
  const auto src = depth_head->named_parameters();
  for (auto& item : gs_head->named_parameters()) {
    const torch::Tensor* from = src.find(item.key());
    if (!from) continue;
    auto& dst = item.value();
    if (dst.sizes() == from->sizes()) {
      dst.copy_(*from);
    } else if (dst.dim() == from->dim() && dst.size(0) > from->size(0)) {
      dst.narrow(0, 0, from->size(0)).copy_(*from);
    }
  }
}

Predictions ReconModelImpl::forward(const torch::Tensor& images, const PriorBundle& priors, const HeadSelection& heads) {
  return decode(encode(images, priors), images, heads);
}

double model_frame_scale(const CameraSet& cams, double eps) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : cams.poses) c += p.center();
  c /= static_cast<double>(cams.size());
  double alpha = 0.0;
  for (const auto& p : cams.poses) alpha = std::max(alpha, (p.center() - c).norm());
  return std::max(alpha, eps);
}

CameraSet to_model_frame(const CameraSet& cams) {
  CameraSet rel = rebase_to_view(cams, 0);
  const double alpha = model_frame_scale(cams);
  for (auto& p : rel.poses) p.translation /= alpha;
  return rel;
}

torch::Tensor camera_targets(const CameraSet& cams, const torch::TensorOptions& opts) {
  const CameraSet rel = rebase_to_view(cams, 0);
  const double alpha = model_frame_scale(cams);
  std::vector<double> rows;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    const Quat q = canonical_quat(rel.poses[i].quat);
    const Vec3 t = rel.poses[i].translation / alpha;
    const auto& k = rel.intrinsics[i];
    rows.insert(rows.end(), {q[0], q[1], q[2], q[3], t[0], t[1], t[2], k.fx / k.width, k.fy / k.height});
  }
  return torch::from_blob(rows.data(), {static_cast<std::int64_t>(rel.size()), 9}, torch::kFloat64).clone().to(opts);
}

CameraSet cameras_from_prediction(const torch::Tensor& camera, int height, int width, double scale) {
  if (camera.dim() != 2 || camera.size(1) != 9) throw ShapeError("camera predictions must be [N, 9]");
  const auto c = camera.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  const auto acc = c.accessor<double, 2>();
  CameraSet out;
  for (std::int64_t i = 0; i < c.size(0); ++i) {
    Pose p;
    p.quat = canonical_quat(Quat(acc[i][0], acc[i][1], acc[i][2], acc[i][3]));
    p.translation = Vec3(acc[i][4], acc[i][5], acc[i][6]) * scale;
    Intrinsics k;
    k.width = width;
    k.height = height;
    k.fx = std::max(acc[i][7], 1e-6) * width;
    k.fy = std::max(acc[i][8], 1e-6) * height;
    k.cx = 0.5 * width;
    k.cy = 0.5 * height;
    out.poses.push_back(p);
    out.intrinsics.push_back(k);
  }
  return out;
}

torch::Tensor grids_to_tensor(const std::vector<Grid<float>>& grids) {
  if (grids.empty()) throw ShapeError("grids_to_tensor: empty input");
  const auto& g0 = grids.front();
  std::vector<torch::Tensor> out;
  for (const auto& g : grids) {
    if (!g.same_extent(g0.height, g0.width) || g.channels != g0.channels) throw ShapeError("grids differ in shape");
    out.push_back(torch::from_blob(const_cast<float*>(g.data.data()), {g.height, g.width, g.channels}, torch::kFloat32)
                      .permute({2, 0, 1})
                      .clone());
  }
  return torch::stack(out);
}

torch::Tensor masks_to_tensor(const std::vector<Mask>& masks) {
  std::vector<torch::Tensor> out;
  for (const auto& m : masks) {
    out.push_back(torch::from_blob(const_cast<unsigned char*>(m.data.data()), {m.height, m.width}, torch::kUInt8)
                      .to(torch::kBool));
  }
  return torch::stack(out);
}

Grid<float> tensor_to_grid(const torch::Tensor& t) {
  torch::Tensor x = t.detach().to(torch::kCPU, torch::kFloat32);
  if (x.dim() == 2) x = x.unsqueeze(0);
  if (x.dim() != 3) throw ShapeError("tensor_to_grid expects [C, H, W] or [H, W]");
  x = x.permute({1, 2, 0}).contiguous();
  Grid<float> g(static_cast<int>(x.size(0)), static_cast<int>(x.size(1)), static_cast<int>(x.size(2)));
  std::memcpy(g.data.data(), x.data_ptr<float>(), g.data.size() * sizeof(float));
  return g;
}

const torch::Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

namespace {

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw DataError("unsupported tensor dtype in archive");
  }
}

torch::ScalarType dtype_from_name(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  throw DataError("unknown dtype '" + s + "' in archive manifest");
}

void write_atomic(const std::string& path, const char* data, std::size_t bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f.write(data, static_cast<std::streamsize>(bytes));
    if (!f) throw DataError("short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace

void save_archive(const TensorArchive& archive, const std::string& prefix) {
  std::vector<char> blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : archive.tensors) {
    const auto c = t.detach().to(torch::kCPU).contiguous();
    const std::size_t bytes = c.numel() * c.element_size();
    entries.push_back({{"name", name},
                       {"shape", c.sizes().vec()},
                       {"dtype", dtype_name(c.scalar_type())},
                       {"offset", blob.size()},
                       {"bytes", bytes}});
    const char* p = static_cast<const char*>(c.data_ptr());
    blob.insert(blob.end(), p, p + bytes);
  }
  nlohmann::json manifest = {{"format_version", kArchiveFormatVersion}, {"tensors", entries}, {"meta", archive.meta}};
  const auto parent = fs::path(prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_atomic(prefix + ".bin", blob.data(), blob.size());
  const std::string text = manifest.dump(1);
  write_atomic(prefix + ".json", text.data(), text.size());
}

TensorArchive load_archive(const std::string& prefix) {
  std::ifstream jf(prefix + ".json");
  if (!jf) throw DataError("missing checkpoint manifest " + prefix + ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(jf);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint manifest " + prefix + ".json: " + e.what());
  }
  if (manifest.value("format_version", -1) != kArchiveFormatVersion) {
    throw DataError("checkpoint format_version mismatch in " + prefix + ".json");
  }
  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw DataError("missing checkpoint payload " + prefix + ".bin");
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  TensorArchive a;
  a.meta = manifest.value("meta", nlohmann::json::object());
  try {
    for (const auto& e : manifest.at("tensors")) {
      const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto dtype = dtype_from_name(e.at("dtype").get<std::string>());
      const auto offset = e.at("offset").get<std::size_t>();
      const auto bytes = e.at("bytes").get<std::size_t>();
      if (offset + bytes > blob.size()) throw DataError("checkpoint payload truncated at '" + e.at("name").get<std::string>() + "'");
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (static_cast<std::size_t>(t.numel() * t.element_size()) != bytes) {
        throw DataError("checkpoint entry '" + e.at("name").get<std::string>() + "' has inconsistent size");
      }
      std::memcpy(t.data_ptr(), blob.data() + offset, bytes);
      a.tensors.emplace_back(e.at("name").get<std::string>(), t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
  return a;
}

void add_model_to_archive(ReconModel& model, TensorArchive& archive) {
  for (const auto& p : model->named_parameters()) archive.tensors.emplace_back("model." + p.key(), p.value());
  archive.meta["model"] = model->config().to_json();
}

void load_model_from_archive(ReconModel& model, const TensorArchive& archive) {
  std::set<std::string> seen;
  torch::NoGradGuard guard;
  for (auto& p : model->named_parameters()) {
    const std::string key = "model." + p.key();
    const torch::Tensor* t = archive.find(key);
    if (!t) throw DataError("checkpoint is missing parameter '" + p.key() + "'");
    if (t->sizes() != p.value().sizes()) {
      throw DataError("checkpoint parameter '" + p.key() + "' has shape " + c10::str(t->sizes()) + ", model expects " +
                      c10::str(p.value().sizes()));
    }
    p.value().copy_(*t);
    seen.insert(key);
  }
  for (const auto& [name, t] : archive.tensors) {
    if (name.rfind("model.", 0) == 0 && !seen.count(name)) {
      throw DataError("checkpoint has unexpected parameter '" + name.substr(6) + "'");
    }
  }
}

ReconModel model_from_archive(const TensorArchive& archive) {
  if (!archive.meta.contains("model")) throw DataError("checkpoint carries no model config");
  ReconModel model(ModelConfig::from_json(archive.meta["model"]));
  load_model_from_archive(model, archive);
  return model;
}

}  // namespace promptrecon
