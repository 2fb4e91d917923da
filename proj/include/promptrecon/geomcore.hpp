#pragma once

// Camera, rotation and projective geometry shared by every other module.
//
// Conventions used throughout the project:
//  * poses are world-to-camera: x_cam = R * x_world + t
//  * camera axes follow the OpenCV layout (x right, y down, z forward)
//  * pixel (row i, col j) has its center at continuous coordinate
//    (u, v) = (j + 0.5, i + 0.5)
//  * quaternions are stored (w, x, y, z) with w >= 0

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "promptrecon/grid.hpp"

namespace promptrecon {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Vector4d;  // (w, x, y, z)

Quat canonical_quat(Quat q);
Mat3 matrix_from_quat(const Quat& q);

/// Rotation matrix to unit quaternion with w >= 0.
/// Throws GeometryError when R is not a proper rotation within 1e-6.
Quat quat_from_matrix(const Mat3& R);

/// Geodesic angle between two rotations, in degrees.
double rotation_angle_deg(const Mat3& a, const Mat3& b);

struct Pose {
  Quat quat{1.0, 0.0, 0.0, 0.0};
  Vec3 translation = Vec3::Zero();

  static Pose from_rt(const Mat3& R, const Vec3& t);
  static Pose identity() { return {}; }

  Mat3 rotation() const { return matrix_from_quat(quat); }
  Vec3 center() const { return -(rotation().transpose() * translation); }
  Vec3 to_camera(const Vec3& world) const { return rotation() * world + translation; }
  Vec3 to_world(const Vec3& cam) const { return rotation().transpose() * (cam - translation); }
  Pose inverse() const;
  /// (this * other)(x) = this(other(x)).
  Pose compose(const Pose& other) const;
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;
  int width = 1;
  int height = 1;

  void validate() const;
  Intrinsics scaled(double factor) const;
  bool operator==(const Intrinsics&) const = default;
};

struct Normalization {
  Vec3 centroid = Vec3::Zero();
  double scale = 1.0;
};

struct CameraSet {
  std::vector<Pose> poses;
  std::vector<Intrinsics> intrinsics;
  std::optional<Normalization> normalization;

  std::size_t size() const { return poses.size(); }
  void validate() const;
};

struct PointMap {
  Grid<double> points;  // H x W x 3
  Mask valid;           // H x W
};

/// Shift camera centers by their centroid and divide by the max distance to it.
/// The record composes with any normalization already present, so
/// denormalize_camera_set always returns to the original frame.
CameraSet normalize_camera_set(const CameraSet& cams, double eps = 1e-8);
CameraSet denormalize_camera_set(const CameraSet& cams);

/// Re-express every pose relative to view `ref` (which becomes the identity).
CameraSet rebase_to_view(const CameraSet& cams, std::size_t ref = 0);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

Projection project(const Vec3& world, const Intrinsics& intr, const Pose& pose);
Vec3 unproject(double u, double v, double depth, const Intrinsics& intr, const Pose& pose);

/// Nonpositive or non-finite depth marks the pixel invalid.
PointMap backproject(const Grid<float>& depth, const Intrinsics& intr, const Pose& pose);

struct NormalMap {
  Grid<double> normals;  // H x W x 3, camera frame
  Mask valid;
};

/// Least-squares plane fit over a window x window neighborhood of camera-frame
/// points; normals are unit length and face the camera.
NormalMap pseudo_normals_from_depth(const Grid<float>& depth, const Intrinsics& intr,
                                    int window = 5);

struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
};

/// Closed-form least-squares similarity (or rigid when with_scale is false)
/// mapping src onto dst. Throws GeometryError for fewer than three
/// non-collinear correspondences.
Similarity umeyama_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                         bool with_scale = true);

double rmse(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

// Camera JSON: {"views": [{"fx","fy","cx","cy","width","height",
//                          "quat":[w,x,y,z], "trans":[x,y,z]}]}
nlohmann::json cameras_to_json(const CameraSet& cams);
/// Throws DataError naming the offending field.
CameraSet cameras_from_json(const nlohmann::json& doc);
void write_cameras(const CameraSet& cams, const std::string& path);
CameraSet read_cameras(const std::string& path);

}  // namespace promptrecon
