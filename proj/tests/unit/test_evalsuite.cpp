#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../common/oracles.hpp"
#include "promptrecon/errors.hpp"
#include "promptrecon/evalsuite.hpp"

using namespace promptrecon;

namespace {

std::vector<Vec3> random_points(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> p;
  for (int i = 0; i < n; ++i) p.emplace_back(u(rng), u(rng), u(rng));
  return p;
}

Grid<float> filled(int h, int w, int c, float v) { return Grid<float>(h, w, c, v); }

}  // namespace

TEST(KdTree, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  const auto pts = random_points(rng, 500);
  const KdTree tree(pts);
  for (const auto& q : random_points(rng, 100)) {
    double best = 1e300;
    for (const auto& p : pts) best = std::min(best, (p - q).squaredNorm());
    EXPECT_DOUBLE_EQ(tree.nearest(q).second, best);
  }
}

TEST(Chamfer, IdentityOffsetAndEmpty) {
  std::mt19937_64 rng(2);
  const auto gt = random_points(rng, 200);
  const auto same = chamfer_acc_comp(gt, gt, true);
  EXPECT_NEAR(same.acc_mean, 0.0, 1e-9);
  EXPECT_NEAR(same.comp_median, 0.0, 1e-9);
  // Sparse points so the shifted copy is still nearest to its own source.
  std::vector<Vec3> sparse{{0, 0, 0}, {5, 0, 0}, {0, 5, 0}, {0, 0, 5}}, moved;
  for (const auto& p : sparse) moved.push_back(p + Vec3(0.1, 0.0, 0.0));
  const auto off = chamfer_acc_comp(moved, sparse, false);
  EXPECT_NEAR(off.acc_mean, 0.1, 1e-12);
  EXPECT_NEAR(off.comp_mean, 0.1, 1e-12);
  EXPECT_THROW(chamfer_acc_comp({}, gt, false), ProtocolError);
}

TEST(PosePairs, PerfectAndTenDegreeRotation) {
  std::mt19937_64 rng(3);
  const auto gt = random_cameras(rng, 4);
  const auto perfect = pose_pair_metrics(gt, gt, 30);
  EXPECT_DOUBLE_EQ(perfect.rra, 100.0);
  EXPECT_DOUBLE_EQ(perfect.rta, 100.0);
  EXPECT_DOUBLE_EQ(perfect.auc, 100.0);

  // Rotate only camera 0 by 10 degrees about its optical axis: every pair
  // with view 0 has a 10 degree relative rotation error.
  CameraSet two;
  two.poses = {gt.poses[0], gt.poses[1]};
  two.intrinsics = {gt.intrinsics[0], gt.intrinsics[1]};
  CameraSet two_off = two;
  const Mat3 Rz = Eigen::AngleAxisd(10.0 * M_PI / 180.0, Vec3::UnitZ()).toRotationMatrix();
  two_off.poses[0] = Pose::from_rt(Rz * two.poses[0].rotation(), Rz * two.poses[0].translation);
  const auto errs = pose_pair_errors(two_off, two);
  ASSERT_EQ(errs.rotation_deg.size(), 1u);
  EXPECT_NEAR(errs.rotation_deg[0], 10.0, 1e-9);
  EXPECT_DOUBLE_EQ(pose_pair_metrics(two_off, two, 30).rra, 100.0);
  EXPECT_DOUBLE_EQ(pose_pair_metrics(two_off, two, 5).rra, 0.0);

  CameraSet one;
  one.poses = {gt.poses[0]};
  one.intrinsics = {gt.intrinsics[0]};
  EXPECT_THROW(pose_pair_metrics(one, one, 5), ProtocolError);
}

TEST(Trajectory, PerfectAndSimilarityInvariant) {
  std::mt19937_64 rng(4);
  const auto gt = random_cameras(rng, 5);
  const auto p = trajectory_metrics(gt, gt);
  EXPECT_NEAR(p.ate, 0.0, 1e-12);
  EXPECT_NEAR(p.rpe_trans, 0.0, 1e-12);
  EXPECT_NEAR(p.rpe_rot_deg, 0.0, 1e-9);
  // World-to-camera poses under x -> s R x + t: T' = T * S^-1.
  const Mat3 R = random_rotation(rng, 180.0);
  const Vec3 t(0.5, -1.0, 2.0);
  const double s = 3.0;
  CameraSet moved = gt;
  for (auto& pose : moved.poses) {
    const Mat3 Rc = pose.rotation() * R.transpose();
    const Vec3 tc = s * pose.translation - Rc * t;
    pose = Pose::from_rt(Rc, tc);
  }
  EXPECT_NEAR(trajectory_metrics(moved, gt).ate, 0.0, 1e-9);
  CameraSet short_set = gt;
  short_set.poses.pop_back();
  short_set.intrinsics.pop_back();
  EXPECT_THROW(trajectory_metrics(short_set, gt), ProtocolError);
}

TEST(Trajectory, HandComputedThreePoses) {
  // Identity rotations; centers on the x axis at 0, 1, 2 versus 0, 1, 3.
  CameraSet gt, pred;
  for (double x : {0.0, 1.0, 2.0}) gt.poses.push_back(Pose::from_rt(Mat3::Identity(), Vec3(-x, 0, 0)));
  for (double x : {0.0, 1.0, 3.0}) pred.poses.push_back(Pose::from_rt(Mat3::Identity(), Vec3(-x, 0, 0)));
  gt.intrinsics.resize(3);
  pred.intrinsics.resize(3);
  // Similarity fit on collinear centers: s = cov / var.
  const double mp = 4.0 / 3.0, mg = 1.0;
  double cov = 0.0, var = 0.0;
  const double xp[3] = {0, 1, 3}, xg[3] = {0, 1, 2};
  for (int i = 0; i < 3; ++i) {
    cov += (xp[i] - mp) * (xg[i] - mg);
    var += (xp[i] - mp) * (xp[i] - mp);
  }
  const double s = cov / var;
  double se = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double r = s * (xp[i] - mp) + mg - xg[i];
    se += r * r;
  }
  const auto e = trajectory_metrics(pred, gt);
  EXPECT_NEAR(e.ate, std::sqrt(se / 3.0), 1e-9);
  EXPECT_NEAR(e.rpe_rot_deg, 0.0, 1e-9);
}

TEST(Depth, WorkedExamples) {
  std::vector<Grid<float>> gt{filled(4, 4, 1, 2.0f)};
  gt[0].at(1, 1) = 3.0f;
  std::vector<Mask> valid{Mask(4, 4, 1, 1)};
  auto d = depth_metrics(gt, gt, valid, DepthScaling::kNone);
  EXPECT_DOUBLE_EQ(d.abs_rel, 0.0);
  EXPECT_DOUBLE_EQ(d.delta_125, 1.0);
  EXPECT_DOUBLE_EQ(d.inlier_103, 1.0);
  std::vector<Grid<float>> twice = gt;
  for (auto& v : twice[0].data) v *= 2.0f;
  d = depth_metrics(twice, gt, valid, DepthScaling::kNone);
  EXPECT_NEAR(d.abs_rel, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(d.delta_125, 0.0);
  for (auto mode : {DepthScaling::kMono, DepthScaling::kVideo}) {
    d = depth_metrics(twice, gt, valid, mode);
    EXPECT_NEAR(d.abs_rel, 0.0, 1e-12);
    EXPECT_DOUBLE_EQ(d.inlier_103, 1.0);
  }
  std::vector<Mask> none{Mask(4, 4, 1, 0)};
  EXPECT_THROW(depth_metrics(gt, gt, none, DepthScaling::kNone), ProtocolError);
  EXPECT_THROW(parse_depth_scaling("bogus"), ConfigError);
}

TEST(Normals, TwentyDegreesAndClamp) {
  Grid<float> gt(2, 2, 3, 0.0f), pred(2, 2, 3, 0.0f);
  const double a = 20.0 * M_PI / 180.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      gt.at(i, j, 2) = 1.0f;
      pred.at(i, j, 0) = static_cast<float>(std::sin(a));
      pred.at(i, j, 2) = static_cast<float>(std::cos(a));
    }
  std::vector<Mask> mask{Mask(2, 2, 1, 1)};
  const auto same = normal_metrics({gt}, {gt}, mask);
  EXPECT_NEAR(same.mean_deg, 0.0, 1e-9);
  EXPECT_DOUBLE_EQ(same.within_11_25, 100.0);
  const auto off = normal_metrics({pred}, {gt}, mask);
  EXPECT_NEAR(off.mean_deg, 20.0, 1e-4);
  EXPECT_DOUBLE_EQ(off.within_22_5, 100.0);
  EXPECT_DOUBLE_EQ(off.within_11_25, 0.0);
  EXPECT_EQ(angle_between_deg(Vec3(1 + 1e-9, 0, 0), Vec3(1, 0, 0)), 0.0);
}

TEST(Images, PsnrAndSsim) {
  const Grid<float> a = filled(16, 16, 3, 0.4f);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  const Grid<float> b = filled(16, 16, 3, 0.5f);  // MSE = 0.01
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Grid<float> x(16, 16, 3), y(16, 16, 3);
  for (auto& v : x.data) v = u(rng);
  for (auto& v : y.data) v = u(rng);
  EXPECT_DOUBLE_EQ(ssim(x, y), ssim(y, x));
}

TEST(Intrinsics, FocalError) {
  Intrinsics k;
  k.fx = 100;
  k.fy = 90;
  Intrinsics off = k;
  off.fx += 5;
  off.fy -= 5;
  EXPECT_DOUBLE_EQ(focal_error({k}, {k}), 0.0);
  EXPECT_DOUBLE_EQ(focal_error({off}, {k}), 5.0);
}

TEST(Report, SummaryJsonAndCsv) {
  MetricReport r;
  r.set_scene("a", "psnr", 20.0, "dB");
  r.set_scene("b", "psnr", 30.0, "dB");
  r.set_scene("a", "ssim", std::nullopt, "");
  r.summarize();
  EXPECT_DOUBLE_EQ(*r.metrics.at("psnr").value, 25.0);
  EXPECT_FALSE(r.metrics.at("ssim").value.has_value());
  const auto j = r.to_json();
  EXPECT_TRUE(j["metrics"]["ssim"]["value"].is_null());
  EXPECT_NE(r.to_csv().find("all,psnr,25"), std::string::npos);
}
