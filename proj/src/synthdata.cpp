#include "promptrecon/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>

#include "promptrecon/errors.hpp"
#include "promptrecon/gridio.hpp"

namespace fs = std::filesystem;

namespace promptrecon {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Vec3 random_color(std::mt19937_64& rng) {
  return Vec3(uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95));
}

// Procedural albedo as a function of a 2D surface parameterization.
struct Texture {
  enum class Kind { kChecker, kStripes, kGradient } kind = Kind::kChecker;
  Vec3 a = Vec3::Constant(0.8);
  Vec3 b = Vec3::Constant(0.2);
  double cell = 0.4;
  double angle = 0.0;

  Vec3 eval(double s, double t) const {
    const double c = std::cos(angle), sn = std::sin(angle);
    const double rs = c * s - sn * t;
    const double rt = sn * s + c * t;
    switch (kind) {
      case Kind::kChecker: {
        const long ix = static_cast<long>(std::floor(rs / cell));
        const long iy = static_cast<long>(std::floor(rt / cell));
        return ((ix + iy) & 1) ? a : b;
      }
      case Kind::kStripes: {
        const long ix = static_cast<long>(std::floor(rs / cell));
        return (ix & 1) ? a : b;
      }
      case Kind::kGradient: {
        const double w = 0.5 + 0.5 * std::sin(rs / cell * M_PI);
        return w * a + (1.0 - w) * b;
      }
    }
    return a;
  }

  static Texture random(std::mt19937_64& rng, double cell_lo, double cell_hi) {
    Texture tx;
    const int k = uniform_int(rng, 0, 2);
    tx.kind = k == 0 ? Kind::kChecker : (k == 1 ? Kind::kStripes : Kind::kGradient);
    tx.a = random_color(rng);
    tx.b = random_color(rng);
    tx.cell = uniform(rng, cell_lo, cell_hi);
    tx.angle = uniform(rng, 0.0, M_PI);
    return tx;
  }
};

struct Hit {
  double t = kInf;
  Vec3 normal = Vec3::Zero();  // world frame, unit
  Vec3 albedo = Vec3::Zero();
};

struct Sphere {
  Vec3 center;
  double radius;
  Texture tex;

  void intersect(const Vec3& o, const Vec3& d, Hit& hit) const {
    const Vec3 oc = o - center;
    const double a = d.squaredNorm();
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - a * c;
    if (disc < 0.0) return;
    const double sq = std::sqrt(disc);
    double t = (-b - sq) / a;
    if (t <= 1e-9) t = (-b + sq) / a;
    if (t <= 1e-9 || t >= hit.t) return;
    const Vec3 p = o + t * d;
    const Vec3 n = (p - center) / radius;
    hit.t = t;
    hit.normal = n;
    hit.albedo = tex.eval(std::atan2(n.z(), n.x()) * radius, p.y());
  }

  bool contains(const Vec3& p, double margin) const { return (p - center).norm() < radius + margin; }
};

// Box rotated about the world y axis.
struct Box {
  Vec3 center;
  Vec3 half;
  double yaw;
  Texture tex;

  Mat3 rot() const {
    Mat3 R;
    const double c = std::cos(yaw), s = std::sin(yaw);
    R << c, 0, s, 0, 1, 0, -s, 0, c;
    return R;
  }

  void intersect(const Vec3& o, const Vec3& d, Hit& hit) const {
    const Mat3 R = rot();
    const Vec3 lo = R.transpose() * (o - center);
    const Vec3 ld = R.transpose() * d;
    double tmin = -kInf, tmax = kInf;
    int axis_in = -1, axis_out = -1;
    for (int k = 0; k < 3; ++k) {
      if (std::abs(ld[k]) < 1e-15) {
        if (lo[k] < -half[k] || lo[k] > half[k]) return;
        continue;
      }
      double t1 = (-half[k] - lo[k]) / ld[k];
      double t2 = (half[k] - lo[k]) / ld[k];
      if (t1 > t2) std::swap(t1, t2);
      if (t1 > tmin) {
        tmin = t1;
        axis_in = k;
      }
      if (t2 < tmax) {
        tmax = t2;
        axis_out = k;
      }
    }
    if (tmin > tmax) return;
    double t = tmin;
    int axis = axis_in;
    if (t <= 1e-9) {
      t = tmax;
      axis = axis_out;
    }
    if (t <= 1e-9 || t >= hit.t || axis < 0) return;
    const Vec3 lp = lo + t * ld;
    Vec3 ln = Vec3::Zero();
    ln[axis] = lp[axis] > 0 ? 1.0 : -1.0;
    hit.t = t;
    hit.normal = R * ln;
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    hit.albedo = tex.eval(lp[u], lp[v]);
  }

  bool contains(const Vec3& p, double margin) const {
    const Vec3 lp = rot().transpose() * (p - center);
    for (int k = 0; k < 3; ++k)
      if (std::abs(lp[k]) > half[k] + margin) return false;
    return true;
  }
};

// Interior of an axis-aligned room; rays always leave through one face.
struct Room {
  Vec3 lo, hi;
  Texture faces[6];

  void intersect(const Vec3& o, const Vec3& d, Hit& hit) const {
    for (int k = 0; k < 3; ++k) {
      if (std::abs(d[k]) < 1e-15) continue;
      const double bound = d[k] > 0 ? hi[k] : lo[k];
      const double t = (bound - o[k]) / d[k];
      if (t <= 1e-9 || t >= hit.t) continue;
      const Vec3 p = o + t * d;
      const int u = (k + 1) % 3, v = (k + 2) % 3;
      if (p[u] < lo[u] - 1e-9 || p[u] > hi[u] + 1e-9 || p[v] < lo[v] - 1e-9 || p[v] > hi[v] + 1e-9) continue;
      Vec3 n = Vec3::Zero();
      n[k] = d[k] > 0 ? -1.0 : 1.0;
      hit.t = t;
      hit.normal = n;
      hit.albedo = faces[2 * k + (d[k] > 0 ? 1 : 0)].eval(p[u], p[v]);
    }
  }
};

struct Light {
  Vec3 position;
  double intensity;
};

struct World {
  Room room;
  std::vector<Sphere> spheres;
  std::vector<Box> boxes;
  Light lights[2];
  double ambient = 0.25;

  Hit trace(const Vec3& o, const Vec3& d) const {
    Hit hit;
    room.intersect(o, d, hit);
    for (const auto& s : spheres) s.intersect(o, d, hit);
    for (const auto& b : boxes) b.intersect(o, d, hit);
    return hit;
  }

  bool inside_object(const Vec3& p, double margin) const {
    for (const auto& s : spheres)
      if (s.contains(p, margin)) return true;
    for (const auto& b : boxes)
      if (b.contains(p, margin)) return true;
    return false;
  }

  Vec3 shade(const Vec3& p, const Vec3& n, const Vec3& albedo) const {
    double light = ambient;
    for (const auto& l : lights) {
      const Vec3 dir = (l.position - p).normalized();
      light += l.intensity * std::max(0.0, n.dot(dir));
    }
    Vec3 c = albedo * light;
    for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k], 0.0, 1.0);
    return c;
  }
};

World random_world(std::mt19937_64& rng, const SceneSpec& spec) {
  World w;
  const double hx = uniform(rng, 3.0, 4.0), hz = uniform(rng, 3.0, 4.0);
  w.room.lo = Vec3(-hx, -1.0, -hz);
  w.room.hi = Vec3(hx, uniform(rng, 1.8, 2.5), hz);
  for (auto& f : w.room.faces) f = Texture::random(rng, 0.35, 0.9);

  const int n_obj = uniform_int(rng, spec.min_objects, spec.max_objects);
  for (int i = 0; i < n_obj; ++i) {
    const double r = uniform(rng, 0.0, 1.0);
    const double ang = uniform(rng, 0.0, 2.0 * M_PI);
    const Vec3 base(r * std::cos(ang), -1.0, r * std::sin(ang));
    if (uniform_int(rng, 0, 1) == 0) {
      const double rad = uniform(rng, 0.25, 0.5);
      w.spheres.push_back({base + Vec3(0, rad + uniform(rng, 0.0, 0.6), 0), rad, Texture::random(rng, 0.08, 0.2)});
    } else {
      const Vec3 half(uniform(rng, 0.15, 0.45), uniform(rng, 0.2, 0.6), uniform(rng, 0.15, 0.45));
      w.boxes.push_back({base + Vec3(0, half.y(), 0), half, uniform(rng, 0.0, M_PI), Texture::random(rng, 0.08, 0.25)});
    }
  }
  for (auto& l : w.lights) {
    l.position = Vec3(uniform(rng, -2.0, 2.0), w.room.hi.y() - 0.2, uniform(rng, -2.0, 2.0));
    l.intensity = uniform(rng, 0.35, 0.55);
  }
  return w;
}

Pose look_at(const Vec3& eye, const Vec3& target, double roll) {
  const Vec3 fwd = (target - eye).normalized();
  const Vec3 world_up(0, 1, 0);
  Vec3 right = fwd.cross(world_up);
  if (right.norm() < 1e-9) right = Vec3(1, 0, 0);
  right.normalize();
  Vec3 down = fwd.cross(right);
  const double c = std::cos(roll), s = std::sin(roll);
  const Vec3 r2 = c * right + s * down;
  const Vec3 d2 = -s * right + c * down;
  Mat3 R;  // rows are camera axes expressed in world
  R.row(0) = r2.transpose();
  R.row(1) = d2.transpose();
  R.row(2) = fwd.transpose();
  return Pose::from_rt(R, -(R * eye));
}

}  // namespace

void SceneSpec::validate() const {
  if (views < 2) throw ConfigError("scene spec: at least two views required");
  if (height <= 0 || width <= 0) throw ConfigError("scene spec: resolution must be positive");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("scene spec: bad object counts");
  if (!(orbit_radius_min > 0) || orbit_radius_max < orbit_radius_min) throw ConfigError("scene spec: bad orbit radius");
  if (!(fov_deg_min > 0) || fov_deg_max < fov_deg_min || fov_deg_max >= 180) throw ConfigError("scene spec: bad fov");
}

nlohmann::json SceneSpec::to_json() const {
  return {{"views", views},
          {"height", height},
          {"width", width},
          {"min_objects", min_objects},
          {"max_objects", max_objects},
          {"orbit_radius_min", orbit_radius_min},
          {"orbit_radius_max", orbit_radius_max},
          {"arc_step_deg_min", arc_step_deg_min},
          {"arc_step_deg_max", arc_step_deg_max},
          {"fov_deg_min", fov_deg_min},
          {"fov_deg_max", fov_deg_max},
          {"max_retries", max_retries}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) throw DataError(std::string("manifest: missing field 'spec.") + key + "'");
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw DataError(std::string("manifest: field 'spec.") + key + "' has the wrong type");
    }
  };
  get("views", s.views);
  get("height", s.height);
  get("width", s.width);
  get("min_objects", s.min_objects);
  get("max_objects", s.max_objects);
  get("orbit_radius_min", s.orbit_radius_min);
  get("orbit_radius_max", s.orbit_radius_max);
  get("arc_step_deg_min", s.arc_step_deg_min);
  get("arc_step_deg_max", s.arc_step_deg_max);
  get("fov_deg_min", s.fov_deg_min);
  get("fov_deg_max", s.fov_deg_max);
  get("max_retries", s.max_retries);
  return s;
}

SceneSample generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const World world = random_world(rng, spec);

  const int H = spec.height, W = spec.width;
  const double fov = uniform(rng, spec.fov_deg_min, spec.fov_deg_max) * M_PI / 180.0;
  Intrinsics intr;
  intr.width = W;
  intr.height = H;
  intr.fx = intr.fy = 0.5 * W / std::tan(0.5 * fov);
  intr.cx = 0.5 * W;
  intr.cy = 0.5 * H;

  CameraSet cams;
  bool placed = false;
  for (int attempt = 0; attempt <= spec.max_retries && !placed; ++attempt) {
    cams.poses.clear();
    cams.intrinsics.clear();
    const double theta0 = uniform(rng, 0.0, 2.0 * M_PI);
    const double step = uniform(rng, spec.arc_step_deg_min, spec.arc_step_deg_max) * M_PI / 180.0;
    const Vec3 target(uniform(rng, -0.2, 0.2), uniform(rng, -0.6, -0.2), uniform(rng, -0.2, 0.2));
    placed = true;
    for (int v = 0; v < spec.views; ++v) {
      const double theta = theta0 + v * step + uniform(rng, -0.05, 0.05);
      const double radius = uniform(rng, spec.orbit_radius_min, spec.orbit_radius_max);
      const Vec3 eye(radius * std::cos(theta), uniform(rng, 0.1, 0.7), radius * std::sin(theta));
      const Vec3 aim = target + Vec3(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1));
      if (world.inside_object(eye, 0.15)) {
        placed = false;
        break;
      }
      cams.poses.push_back(look_at(eye, aim, uniform(rng, -0.05, 0.05)));
      cams.intrinsics.push_back(intr);
    }
  }
  if (!placed) throw ConfigError("scene spec unsatisfiable: camera placement kept intersecting geometry");

  SceneSample s;
  s.seed = seed;
  s.spec = spec;
  s.cams = cams;
  const Pose& ref = cams.poses.front();
  for (int v = 0; v < spec.views; ++v) {
    const Pose& pose = cams.poses[v];
    const Mat3 R = pose.rotation();
    const Vec3 eye = pose.center();
    Grid<float> img(H, W, 3), depth(H, W), normal(H, W, 3), points(H, W, 3);
    Mask valid(H, W);
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const Vec3 dc((j + 0.5 - intr.cx) / intr.fx, (i + 0.5 - intr.cy) / intr.fy, 1.0);
        const Vec3 dw = R.transpose() * dc;
        const Hit hit = world.trace(eye, dw);
        if (!std::isfinite(hit.t)) continue;
        // dc has unit z, so the ray parameter is the z-depth.
        const float zf = static_cast<float>(hit.t);
        const Vec3 p = eye + hit.t * dw;
        Vec3 nw = hit.normal;
        if (nw.dot(dw) > 0) nw = -nw;
        const Vec3 col = world.shade(p, nw, hit.albedo);
        const Vec3 nc = R * nw;
        const Vec3 pf = ref.to_camera(unproject(j + 0.5, i + 0.5, static_cast<double>(zf), intr, pose));
        depth.at(i, j) = zf;
        for (int k = 0; k < 3; ++k) {
          img.at(i, j, k) = static_cast<float>(col[k]);
          normal.at(i, j, k) = static_cast<float>(nc[k]);
          points.at(i, j, k) = static_cast<float>(pf[k]);
        }
        valid.at(i, j) = 1;
      }
    }
    s.images.push_back(std::move(img));
    s.depths.push_back(std::move(depth));
    s.normals.push_back(std::move(normal));
    s.pointmaps.push_back(std::move(points));
    s.valid.push_back(std::move(valid));
  }
  return s;
}

void ResolutionPolicy::validate() const {
  if (!(min_pixels > 0) || max_pixels < min_pixels) throw ConfigError("resolution policy: need 0 < min_pixels <= max_pixels");
  if (!(aspect_min > 0) || aspect_max < aspect_min) throw ConfigError("resolution policy: need 0 < aspect_min <= aspect_max");
  if (!(stage_multiplier > 0)) throw ConfigError("resolution policy: stage multiplier must be positive");
  if (patch < 1) throw ConfigError("resolution policy: patch size must be positive");
}

std::vector<std::pair<int, int>> ResolutionPolicy::admissible() const {
  validate();
  const double lo = min_pixels * stage_multiplier, hi = max_pixels * stage_multiplier;
  std::vector<std::pair<int, int>> out;
  const int max_side = static_cast<int>(std::ceil(hi / patch)) + patch;
  for (int h = patch; h <= max_side; h += patch) {
    for (int w = patch; w <= max_side; w += patch) {
      const double px = static_cast<double>(h) * w;
      const double aspect = static_cast<double>(h) / w;
      if (px >= lo && px <= hi && aspect >= aspect_min && aspect <= aspect_max) out.emplace_back(h, w);
    }
  }
  return out;
}

std::pair<int, int> sample_resolution(const ResolutionPolicy& policy, std::mt19937_64& rng) {
  const auto options = policy.admissible();
  if (options.empty()) throw ConfigError("resolution policy admits no patch-aligned resolution");
  const auto idx = std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng);
  return options[idx];
}

std::string scene_dir_name(std::uint64_t seed) { return "scene_" + std::to_string(seed); }

void write_scene(const SceneSample& s, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create scene directory " + dir + ": " + ec.message());
  for (std::size_t v = 0; v < s.views(); ++v) {
    const std::string i = std::to_string(v);
    write_png(s.images[v], dir + "/view_" + i + ".png");
    write_float_grid(s.depths[v], dir + "/depth_" + i + ".bin");
    write_float_grid(s.normals[v], dir + "/normal_" + i + ".bin");
    write_float_grid(s.pointmaps[v], dir + "/pointmap_" + i + ".bin");
  }
  write_cameras(s.cams, dir + "/cameras.json");
  nlohmann::json manifest = {{"format_version", 1},
                             {"seed", s.seed},
                             {"views", s.views()},
                             {"height", s.height()},
                             {"width", s.width()},
                             {"spec", s.spec.to_json()}};
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw DataError("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

SceneSample read_scene(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw DataError("missing manifest.json in " + dir);
  nlohmann::json m;
  try {
    f >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest in " + dir + " is not valid JSON");
  }
  auto need = [&](const char* key) -> const nlohmann::json& {
    if (!m.contains(key)) throw DataError(std::string("manifest: missing field '") + key + "' in " + dir);
    return m[key];
  };
  SceneSample s;
  if (!need("seed").is_number_unsigned()) throw DataError("manifest: field 'seed' must be an unsigned integer");
  s.seed = m["seed"].get<std::uint64_t>();
  if (!need("views").is_number_integer()) throw DataError("manifest: field 'views' must be an integer");
  const int views = m["views"].get<int>();
  if (views < 1) throw DataError("manifest: field 'views' must be positive");
  if (!need("height").is_number_integer() || !need("width").is_number_integer()) {
    throw DataError("manifest: fields 'height'/'width' must be integers");
  }
  const int H = m["height"].get<int>(), W = m["width"].get<int>();
  s.spec = SceneSpec::from_json(need("spec"));
  s.cams = read_cameras(dir + "/cameras.json");
  if (static_cast<int>(s.cams.size()) != views) throw DataError("cameras.json view count disagrees with manifest in " + dir);
  for (int v = 0; v < views; ++v) {
    const std::string i = std::to_string(v);
    s.images.push_back(read_png(dir + "/view_" + i + ".png"));
    s.depths.push_back(read_float_grid(dir + "/depth_" + i + ".bin"));
    s.normals.push_back(read_float_grid(dir + "/normal_" + i + ".bin"));
    s.pointmaps.push_back(read_float_grid(dir + "/pointmap_" + i + ".bin"));
    for (const Grid<float>* g : {&s.images.back(), &s.depths.back(), &s.normals.back(), &s.pointmaps.back()}) {
      if (!g->same_extent(H, W)) throw DataError("view " + i + " resolution disagrees with manifest in " + dir);
    }
    Mask valid(H, W);
    const auto& d = s.depths.back();
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) valid.at(r, c) = std::isfinite(d.at(r, c)) && d.at(r, c) > 0.0f;
    s.valid.push_back(std::move(valid));
  }
  return s;
}

std::vector<std::string> list_scenes(const std::string& root) {
  std::vector<std::string> out;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset root does not exist: " + root);
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0 &&
        fs::exists(e.path() / "manifest.json")) {
      out.push_back(e.path().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace promptrecon
