#pragma once

// Evaluation metrics for geometry, cameras, depth, normals and rendered
// images, plus the report container written by the eval command.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptrecon/geomcore.hpp"

namespace promptrecon {

/// Static 3D kd-tree for nearest-neighbor queries.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points);
  /// Index and squared distance of the nearest stored point.
  std::pair<std::size_t, double> nearest(const Vec3& q) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::size_t point;
    int axis;
    int left = -1;
    int right = -1;
  };
  int build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi, int depth);
  void search(int node, const Vec3& q, std::size_t& best, double& best_d2) const;

  std::vector<Vec3> points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

double median(std::vector<double> v);

struct AccComp {
  double acc_mean = 0.0;
  double acc_median = 0.0;
  double comp_mean = 0.0;
  double comp_median = 0.0;
};

/// Accuracy: pred -> gt nearest-neighbor distances; completion: gt -> pred.
/// With `align`, pred is first mapped onto gt by a similarity fitted on
/// index-wise correspondences (requires equal sizes). Throws ProtocolError on
/// an empty set.
AccComp chamfer_acc_comp(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, bool align);

struct PairErrors {
  std::vector<double> rotation_deg;     // one per view pair i < j
  std::vector<double> translation_deg;  // angle between relative translation directions
};
PairErrors pose_pair_errors(const CameraSet& pred, const CameraSet& gt);

struct PoseAccuracy {
  double rra = 0.0;  // percent of pairs with rotation error < tau
  double rta = 0.0;
  double auc = 0.0;  // mean over t = 1..tau of min(RRA@t, RTA@t)
};
/// Throws ProtocolError for fewer than two views or mismatched sets.
PoseAccuracy pose_pair_metrics(const CameraSet& pred, const CameraSet& gt, int tau_deg);

struct TrajectoryErrors {
  double ate = 0.0;
  double rpe_trans = 0.0;
  double rpe_rot_deg = 0.0;
};
/// Sim(3) alignment of predicted onto ground-truth camera centers, then RMSE
/// of positions and mean consecutive relative-pose errors. Sets whose centers
/// are degenerate for a point alignment are aligned through the first pose
/// and the first baseline instead.
TrajectoryErrors trajectory_metrics(const CameraSet& pred, const CameraSet& gt);

enum class DepthScaling { kNone, kMono, kVideo };
DepthScaling parse_depth_scaling(const std::string& s);

struct DepthErrors {
  double abs_rel = 0.0;
  double delta_125 = 0.0;   // fraction in [0, 1]
  double inlier_103 = 0.0;  // fraction in [0, 1]
};
/// Pixels count when gt is valid and both values are finite and positive.
/// kMono rescales each image by median(gt) / median(pred); kVideo uses one
/// factor over all images.
DepthErrors depth_metrics(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                          const std::vector<Mask>& valid, DepthScaling mode);

/// Fraction of valid points with |s * p - g| / |g| < tol, where
/// s = median |g| / median |p| over the valid set.
double point_inlier_ratio(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                          const std::vector<Mask>& valid, double tol = 0.03);

struct NormalErrors {
  double mean_deg = 0.0;
  double median_deg = 0.0;
  double within_11_25 = 0.0;  // percent
  double within_22_5 = 0.0;
  double within_30 = 0.0;
};
NormalErrors normal_metrics(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                            const std::vector<Mask>& mask);
double angle_between_deg(const Vec3& a, const Vec3& b);

inline constexpr double kPsnrCap = 99.0;
double psnr(const Grid<float>& pred, const Grid<float>& gt);
/// 11x11 Gaussian window (sigma 1.5), valid region only, mean over channels.
double ssim(const Grid<float>& pred, const Grid<float>& gt);

/// Mean over views of (|fx' - fx| + |fy' - fy|) / 2, in pixels.
double focal_error(const std::vector<Intrinsics>& pred, const std::vector<Intrinsics>& gt);

struct Metric {
  std::optional<double> value;  // nullopt when undefined
  std::string unit;
};

struct MetricReport {
  std::map<std::string, Metric> metrics;
  std::map<std::string, std::map<std::string, Metric>> per_scene;
  nlohmann::json protocol = nlohmann::json::object();

  void set(const std::string& name, std::optional<double> value, const std::string& unit);
  void set_scene(const std::string& scene, const std::string& name, std::optional<double> value, const std::string& unit);
  /// Every summary metric becomes the mean of its per-scene values.
  void summarize();
  nlohmann::json to_json() const;
  /// Rows "scene,metric,value,unit"; summary rows use scene "all".
  std::string to_csv() const;
};

}  // namespace promptrecon
