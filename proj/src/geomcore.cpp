#include "promptrecon/geomcore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "promptrecon/errors.hpp"

namespace promptrecon {

Quat canonical_quat(Quat q) {
  const double n = q.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw GeometryError("quaternion has zero or non-finite norm");
  q /= n;
  if (q[0] < 0.0) {
    q = -q;
  } else if (q[0] == 0.0) {
    for (int k = 1; k < 4; ++k) {
      if (q[k] != 0.0) {
        if (q[k] < 0.0) q = -q;
        break;
      }
    }
  }
  return q;
}

Mat3 matrix_from_quat(const Quat& q_in) {
  const Quat q = q_in / q_in.norm();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
      2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
      2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
  return R;
}

Quat quat_from_matrix(const Mat3& R) {
  if (!R.allFinite()) throw GeometryError("invalid rotation: non-finite entries");
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = R.determinant();
  if (ortho > 1e-6 || std::abs(det - 1.0) > 1e-6) {
    throw GeometryError("invalid rotation: not orthonormal with det +1 (orthogonality residual " +
                        std::to_string(ortho) + ", det " + std::to_string(det) + ")");
  }
  // Shepperd: pivot on the largest diagonal combination.
  Quat q;
  const double tr = R.trace();
  if (tr >= R(0, 0) && tr >= R(1, 1) && tr >= R(2, 2)) {
    const double s = std::sqrt(1.0 + tr) * 2.0;
    q << 0.25 * s, (R(2, 1) - R(1, 2)) / s, (R(0, 2) - R(2, 0)) / s, (R(1, 0) - R(0, 1)) / s;
  } else if (R(0, 0) >= R(1, 1) && R(0, 0) >= R(2, 2)) {
    const double s = std::sqrt(1.0 + R(0, 0) - R(1, 1) - R(2, 2)) * 2.0;
    q << (R(2, 1) - R(1, 2)) / s, 0.25 * s, (R(0, 1) + R(1, 0)) / s, (R(0, 2) + R(2, 0)) / s;
  } else if (R(1, 1) >= R(2, 2)) {
    const double s = std::sqrt(1.0 + R(1, 1) - R(0, 0) - R(2, 2)) * 2.0;
    q << (R(0, 2) - R(2, 0)) / s, (R(0, 1) + R(1, 0)) / s, 0.25 * s, (R(1, 2) + R(2, 1)) / s;
  } else {
    const double s = std::sqrt(1.0 + R(2, 2) - R(0, 0) - R(1, 1)) * 2.0;
    q << (R(1, 0) - R(0, 1)) / s, (R(0, 2) + R(2, 0)) / s, (R(1, 2) + R(2, 1)) / s, 0.25 * s;
  }
  return canonical_quat(q);
}

double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  const Mat3 rel = a * b.transpose();
  const double c = std::clamp((rel.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

Pose Pose::from_rt(const Mat3& R, const Vec3& t) {
  Pose p;
  p.quat = quat_from_matrix(R);
  p.translation = t;
  return p;
}

Pose Pose::inverse() const {
  const Mat3 Rt = rotation().transpose();
  Pose p;
  p.quat = quat_from_matrix(Rt);
  p.translation = -(Rt * translation);
  return p;
}

Pose Pose::compose(const Pose& other) const {
  const Mat3 R = rotation() * other.rotation();
  Pose p;
  p.quat = quat_from_matrix(R);
  p.translation = rotation() * other.translation + translation;
  return p;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw GeometryError("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw GeometryError("intrinsics: image size must be positive");
  if (!std::isfinite(cx) || !std::isfinite(cy)) throw GeometryError("intrinsics: non-finite principal point");
}

Intrinsics Intrinsics::scaled(double factor) const {
  Intrinsics k = *this;
  k.fx *= factor;
  k.fy *= factor;
  k.cx *= factor;
  k.cy *= factor;
  k.width = static_cast<int>(std::lround(width * factor));
  k.height = static_cast<int>(std::lround(height * factor));
  return k;
}

void CameraSet::validate() const {
  if (poses.empty()) throw GeometryError("camera set is empty");
  if (poses.size() != intrinsics.size()) throw GeometryError("camera set: pose/intrinsics count mismatch");
  for (const auto& k : intrinsics) k.validate();
}

CameraSet normalize_camera_set(const CameraSet& cams, double eps) {
  cams.validate();
  const std::size_t n = cams.size();
  std::vector<Vec3> centers(n);
  Vec3 c = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    centers[i] = cams.poses[i].center();
    c += centers[i];
  }
  c /= static_cast<double>(n);
  double alpha = 0.0;
  for (const auto& ci : centers) alpha = std::max(alpha, (ci - c).norm());
  alpha = std::max(alpha, eps);

  CameraSet out = cams;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 nc = (centers[i] - c) / alpha;
    out.poses[i].translation = -(cams.poses[i].rotation() * nc);
  }
  Normalization rec;
  if (cams.normalization) {
    rec.centroid = cams.normalization->centroid + cams.normalization->scale * c;
    rec.scale = cams.normalization->scale * alpha;
  } else {
    rec.centroid = c;
    rec.scale = alpha;
  }
  out.normalization = rec;
  return out;
}

CameraSet denormalize_camera_set(const CameraSet& cams) {
  if (!cams.normalization) return cams;
  CameraSet out = cams;
  const auto& rec = *cams.normalization;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Vec3 c = cams.poses[i].center() * rec.scale + rec.centroid;
    out.poses[i].translation = -(cams.poses[i].rotation() * c);
  }
  out.normalization.reset();
  return out;
}

CameraSet rebase_to_view(const CameraSet& cams, std::size_t ref) {
  cams.validate();
  if (ref >= cams.size()) throw GeometryError("rebase_to_view: reference index out of range");
  const Pose ref_inv = cams.poses[ref].inverse();
  CameraSet out = cams;
  for (std::size_t i = 0; i < cams.size(); ++i) out.poses[i] = cams.poses[i].compose(ref_inv);
  out.poses[ref] = Pose::identity();
  out.normalization.reset();
  return out;
}

Projection project(const Vec3& world, const Intrinsics& intr, const Pose& pose) {
  const Vec3 xc = pose.to_camera(world);
  Projection p;
  p.depth = xc.z();
  p.u = intr.fx * xc.x() / xc.z() + intr.cx;
  p.v = intr.fy * xc.y() / xc.z() + intr.cy;
  return p;
}

Vec3 unproject(double u, double v, double depth, const Intrinsics& intr, const Pose& pose) {
  const Vec3 xc((u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth);
  return pose.to_world(xc);
}

PointMap backproject(const Grid<float>& depth, const Intrinsics& intr, const Pose& pose) {
  intr.validate();
  if (depth.channels != 1) throw ShapeError("backproject: depth must be single-channel");
  PointMap pm{Grid<double>(depth.height, depth.width, 3), Mask(depth.height, depth.width)};
  const Mat3 Rt = pose.rotation().transpose();
  for (int i = 0; i < depth.height; ++i) {
    for (int j = 0; j < depth.width; ++j) {
      const double d = depth.at(i, j);
      if (!std::isfinite(d) || d <= 0.0) continue;
      const Vec3 xc((j + 0.5 - intr.cx) / intr.fx * d, (i + 0.5 - intr.cy) / intr.fy * d, d);
      const Vec3 xw = Rt * (xc - pose.translation);
      for (int k = 0; k < 3; ++k) pm.points.at(i, j, k) = xw[k];
      pm.valid.at(i, j) = 1;
    }
  }
  return pm;
}

NormalMap pseudo_normals_from_depth(const Grid<float>& depth, const Intrinsics& intr, int window) {
  intr.validate();
  if (window < 2) throw GeometryError("pseudo_normals_from_depth: window must be >= 2");
  const PointMap cam = backproject(depth, intr, Pose::identity());
  NormalMap out{Grid<double>(depth.height, depth.width, 3), Mask(depth.height, depth.width)};
  const int lo = window / 2;
  const int hi = window - 1 - lo;
  for (int i = 0; i < depth.height; ++i) {
    for (int j = 0; j < depth.width; ++j) {
      if (!cam.valid.at(i, j)) continue;
      Vec3 mean = Vec3::Zero();
      int count = 0;
      for (int a = std::max(0, i - lo); a <= std::min(depth.height - 1, i + hi); ++a) {
        for (int b = std::max(0, j - lo); b <= std::min(depth.width - 1, j + hi); ++b) {
          if (!cam.valid.at(a, b)) continue;
          mean += Vec3(cam.points.at(a, b, 0), cam.points.at(a, b, 1), cam.points.at(a, b, 2));
          ++count;
        }
      }
      if (count < 3) continue;
      mean /= count;
      Mat3 cov = Mat3::Zero();
      for (int a = std::max(0, i - lo); a <= std::min(depth.height - 1, i + hi); ++a) {
        for (int b = std::max(0, j - lo); b <= std::min(depth.width - 1, j + hi); ++b) {
          if (!cam.valid.at(a, b)) continue;
          const Vec3 d = Vec3(cam.points.at(a, b, 0), cam.points.at(a, b, 1), cam.points.at(a, b, 2)) - mean;
          cov += d * d.transpose();
        }
      }
      Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
      const auto& ev = es.eigenvalues();
      // Collinear support: the plane is undetermined.
      if (!(ev[1] > 1e-12 * std::max(ev[2], 1e-300))) continue;
      Vec3 n = es.eigenvectors().col(0).normalized();
      const Vec3 p(cam.points.at(i, j, 0), cam.points.at(i, j, 1), cam.points.at(i, j, 2));
      if (n.dot(p) > 0.0) n = -n;
      for (int k = 0; k < 3; ++k) out.normals.at(i, j, k) = n[k];
      out.valid.at(i, j) = 1;
    }
  }
  return out;
}

Similarity umeyama_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst, bool with_scale) {
  if (src.size() != dst.size()) throw GeometryError("umeyama_align: correspondence count mismatch");
  const std::size_t n = src.size();
  if (n < 3) throw GeometryError("degenerate alignment: fewer than three correspondences");
  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= static_cast<double>(n);
  mu_d /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = src[i] - mu_s;
    const Vec3 b = dst[i] - mu_d;
    cov += b * a.transpose();
    var_s += a.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_s /= static_cast<double>(n);
  if (!(var_s > 0.0)) throw GeometryError("degenerate alignment: source points coincide");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv[1] > 1e-12 * std::max(sv[0], 1e-300))) {
    throw GeometryError("degenerate alignment: correspondences are collinear");
  }
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  Similarity sim;
  sim.rotation = svd.matrixU() * S * svd.matrixV().transpose();
  sim.scale = with_scale ? (sv.asDiagonal() * S).trace() / var_s : 1.0;
  sim.translation = mu_d - sim.scale * (sim.rotation * mu_s);
  return sim;
}

double rmse(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.size() != b.size() || a.empty()) throw GeometryError("rmse: size mismatch or empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(a.size()));
}

nlohmann::json cameras_to_json(const CameraSet& cams) {
  nlohmann::json views = nlohmann::json::array();
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto& k = cams.intrinsics[i];
    const auto& p = cams.poses[i];
    views.push_back({{"fx", k.fx},
                     {"fy", k.fy},
                     {"cx", k.cx},
                     {"cy", k.cy},
                     {"width", k.width},
                     {"height", k.height},
                     {"quat", {p.quat[0], p.quat[1], p.quat[2], p.quat[3]}},
                     {"trans", {p.translation[0], p.translation[1], p.translation[2]}}});
  }
  return {{"views", views}};
}

namespace {

double number_field(const nlohmann::json& obj, const std::string& key, const std::string& where) {
  if (!obj.contains(key)) throw DataError("camera schema: missing field '" + where + "." + key + "'");
  if (!obj[key].is_number()) throw DataError("camera schema: field '" + where + "." + key + "' is not a number");
  return obj[key].get<double>();
}

std::vector<double> array_field(const nlohmann::json& obj, const std::string& key, std::size_t len,
                                const std::string& where) {
  if (!obj.contains(key)) throw DataError("camera schema: missing field '" + where + "." + key + "'");
  const auto& a = obj[key];
  if (!a.is_array() || a.size() != len) {
    throw DataError("camera schema: field '" + where + "." + key + "' must be an array of " +
                    std::to_string(len) + " numbers");
  }
  std::vector<double> out;
  for (const auto& v : a) {
    if (!v.is_number()) throw DataError("camera schema: field '" + where + "." + key + "' has a non-number entry");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

CameraSet cameras_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("views") || !doc["views"].is_array()) {
    throw DataError("camera schema: missing field 'views'");
  }
  CameraSet cams;
  for (std::size_t i = 0; i < doc["views"].size(); ++i) {
    const auto& v = doc["views"][i];
    const std::string where = "views[" + std::to_string(i) + "]";
    if (!v.is_object()) throw DataError("camera schema: '" + where + "' is not an object");
    Intrinsics k;
    k.fx = number_field(v, "fx", where);
    k.fy = number_field(v, "fy", where);
    k.cx = number_field(v, "cx", where);
    k.cy = number_field(v, "cy", where);
    k.width = static_cast<int>(number_field(v, "width", where));
    k.height = static_cast<int>(number_field(v, "height", where));
    const auto q = array_field(v, "quat", 4, where);
    const auto t = array_field(v, "trans", 3, where);
    Pose p;
    try {
      p.quat = canonical_quat(Quat(q[0], q[1], q[2], q[3]));
    } catch (const GeometryError&) {
      throw DataError("camera schema: field '" + where + ".quat' has zero norm");
    }
    p.translation = Vec3(t[0], t[1], t[2]);
    cams.poses.push_back(p);
    cams.intrinsics.push_back(k);
  }
  if (cams.poses.empty()) throw DataError("camera schema: 'views' is empty");
  return cams;
}

void write_cameras(const CameraSet& cams, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f.precision(17);
  f << cameras_to_json(cams).dump(2) << "\n";
}

CameraSet read_cameras(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open camera file " + path);
  nlohmann::json doc;
  try {
    f >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("camera file " + path + " is not valid JSON: " + e.what());
  }
  return cameras_from_json(doc);
}

}  // namespace promptrecon
