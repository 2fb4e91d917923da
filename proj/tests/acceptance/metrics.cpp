// Metric implementations against brute-force oracles written from the metric
// definitions alone.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include <Eigen/Geometry>

#include "acceptance.hpp"
#include "../common/oracles.hpp"
#include "promptrecon/evalsuite.hpp"

namespace promptrecon::acceptance {

namespace {

double oracle_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double brute_nn(const Vec3& q, const std::vector<Vec3>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : set) best = std::min(best, (p - q).norm());
  return best;
}

AccComp oracle_chamfer(std::vector<Vec3> pred, const std::vector<Vec3>& gt, bool align) {
  if (align) {
    Eigen::Matrix3Xd s(3, pred.size()), d(3, gt.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      s.col(i) = pred[i];
      d.col(i) = gt[i];
    }
    const Eigen::Matrix4d T = Eigen::umeyama(s, d, true);
    for (auto& p : pred) p = T.topLeftCorner<3, 3>() * p + T.topRightCorner<3, 1>();
  }
  std::vector<double> acc, comp;
  for (const auto& p : pred) acc.push_back(brute_nn(p, gt));
  for (const auto& g : gt) comp.push_back(brute_nn(g, pred));
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / v.size();
  };
  return {mean(acc), oracle_median(acc), mean(comp), oracle_median(comp)};
}

// Rotation errors and translation-direction errors over pairs i < j using
// 4x4 camera-to-world matrices.
void oracle_pairs(const CameraSet& pred, const CameraSet& gt, std::vector<double>& rot, std::vector<double>& trans) {
  auto w2c = [](const Pose& p) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    const Eigen::Quaterniond q(p.quat[0], p.quat[1], p.quat[2], p.quat[3]);
    m.topLeftCorner<3, 3>() = q.normalized().toRotationMatrix();
    m.topRightCorner<3, 1>() = p.translation;
    return m;
  };
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = i + 1; j < gt.size(); ++j) {
      const Eigen::Matrix4d a = w2c(pred.poses[j]) * w2c(pred.poses[i]).inverse();
      const Eigen::Matrix4d b = w2c(gt.poses[j]) * w2c(gt.poses[i]).inverse();
      const Eigen::Matrix3d d = a.topLeftCorner<3, 3>() * b.topLeftCorner<3, 3>().transpose();
      rot.push_back(Eigen::AngleAxisd(d).angle() * 180.0 / M_PI);
      const Vec3 ta = a.topRightCorner<3, 1>(), tb = b.topRightCorner<3, 1>();
      const double c = std::clamp(ta.normalized().dot(tb.normalized()), -1.0, 1.0);
      trans.push_back(std::acos(c) * 180.0 / M_PI);
    }
  }
}

PoseAccuracy oracle_pose(const CameraSet& pred, const CameraSet& gt, int tau) {
  std::vector<double> rot, trans;
  oracle_pairs(pred, gt, rot, trans);
  auto pct = [](const std::vector<double>& v, int t) {
    int k = 0;
    for (double x : v) k += x < t ? 1 : 0;
    return 100.0 * k / static_cast<double>(v.size());
  };
  PoseAccuracy out{pct(rot, tau), pct(trans, tau), 0.0};
  for (int t = 1; t <= tau; ++t) out.auc += std::min(pct(rot, t), pct(trans, t));
  out.auc /= tau;
  return out;
}

TrajectoryErrors oracle_trajectory(const CameraSet& pred, const CameraSet& gt) {
  const std::size_t n = gt.size();
  Eigen::Matrix3Xd s(3, n), d(3, n);
  for (std::size_t i = 0; i < n; ++i) {
    s.col(i) = pred.poses[i].center();
    d.col(i) = gt.poses[i].center();
  }
  const Eigen::Matrix4d T = Eigen::umeyama(s, d, true);
  const double scale = std::cbrt(T.topLeftCorner<3, 3>().determinant());
  const Eigen::Matrix3d R = T.topLeftCorner<3, 3>() / scale;
  std::vector<Eigen::Matrix4d> P(n), G(n);
  TrajectoryErrors e;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 c = T.topLeftCorner<3, 3>() * s.col(i) + T.topRightCorner<3, 1>();
    e.ate += (c - d.col(i)).squaredNorm();
    P[i].setIdentity();
    P[i].topLeftCorner<3, 3>() = R * pred.poses[i].rotation().transpose();
    P[i].topRightCorner<3, 1>() = c;
    G[i].setIdentity();
    G[i].topLeftCorner<3, 3>() = gt.poses[i].rotation().transpose();
    G[i].topRightCorner<3, 1>() = d.col(i);
  }
  e.ate = std::sqrt(e.ate / n);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Eigen::Matrix4d a = P[i].inverse() * P[i + 1];
    const Eigen::Matrix4d b = G[i].inverse() * G[i + 1];
    e.rpe_trans += (a.topRightCorner<3, 1>() - b.topRightCorner<3, 1>()).norm();
    const Eigen::Matrix3d r = a.topLeftCorner<3, 3>().transpose() * b.topLeftCorner<3, 3>();
    e.rpe_rot_deg += Eigen::AngleAxisd(r).angle() * 180.0 / M_PI;
  }
  e.rpe_trans /= (n - 1);
  e.rpe_rot_deg /= (n - 1);
  return e;
}

DepthErrors oracle_depth(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                         const std::vector<Mask>& valid, DepthScaling mode) {
  std::vector<std::vector<std::pair<double, double>>> pix(pred.size());
  for (std::size_t v = 0; v < pred.size(); ++v)
    for (std::size_t k = 0; k < gt[v].data.size(); ++k)
      if (valid[v].data[k] && pred[v].data[k] > 0 && gt[v].data[k] > 0)
        pix[v].emplace_back(pred[v].data[k], gt[v].data[k]);
  auto ratio_of = [](const std::vector<std::pair<double, double>>& px) {
    std::vector<double> p, g;
    for (auto [a, b] : px) {
      p.push_back(a);
      g.push_back(b);
    }
    return oracle_median(g) / oracle_median(p);
  };
  std::vector<std::pair<double, double>> all;
  for (const auto& p : pix) all.insert(all.end(), p.begin(), p.end());
  DepthErrors e;
  for (std::size_t v = 0; v < pix.size(); ++v) {
    const double s = mode == DepthScaling::kNone ? 1.0 : mode == DepthScaling::kMono ? ratio_of(pix[v]) : ratio_of(all);
    for (auto [p0, g] : pix[v]) {
      const double p = s * p0;
      e.abs_rel += std::abs(p - g) / g;
      e.delta_125 += (p / g < 1.25 && g / p < 1.25) ? 1.0 : 0.0;
      e.inlier_103 += (p / g < 1.03 && g / p < 1.03) ? 1.0 : 0.0;
    }
  }
  e.abs_rel /= all.size();
  e.delta_125 /= all.size();
  e.inlier_103 /= all.size();
  return e;
}

}  // namespace

Result criterion_metric_oracles() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  double worst = 0.0;
  std::string worst_name = "none";
  auto track = [&](const char* name, double a, double b) {
    const double d = std::abs(a - b);
    if (!(d <= worst) && !(d <= 0.0)) {
      worst = std::isfinite(d) ? d : 1e300;
      worst_name = name;
    }
  };

  for (int it = 0; it < 100; ++it) {
    // Chamfer, with and without alignment.
    const int n = 20 + it % 40;
    std::vector<Vec3> gt, pred;
    for (int i = 0; i < n; ++i) gt.emplace_back(U(rng), U(rng), U(rng));
    const Mat3 R = random_rotation(rng, 180.0);
    const Vec3 t(U(rng), U(rng), U(rng));
    const double s = 0.5 + 0.5 * (U(rng) + 1.0);
    for (const auto& g : gt) pred.push_back(s * (R * g) + t + 0.05 * Vec3(U(rng), U(rng), U(rng)));
    for (bool align : {false, true}) {
      const AccComp a = chamfer_acc_comp(pred, gt, align), b = oracle_chamfer(pred, gt, align);
      track("chamfer acc mean", a.acc_mean, b.acc_mean);
      track("chamfer acc median", a.acc_median, b.acc_median);
      track("chamfer comp mean", a.comp_mean, b.comp_mean);
      track("chamfer comp median", a.comp_median, b.comp_median);
    }

    // Poses and trajectories.
    const int views = 3 + it % 5;
    const CameraSet g = random_cameras(rng, views);
    CameraSet p = g;
    const double spread = 1.0 + (it % 10) * 2.0;
    for (auto& pose : p.poses) {
      pose = Pose::from_rt(random_rotation(rng, spread) * pose.rotation(),
                           pose.translation + 0.02 * spread * Vec3(U(rng), U(rng), U(rng)));
    }
    for (int tau : {5, 30}) {
      const PoseAccuracy a = pose_pair_metrics(p, g, tau), b = oracle_pose(p, g, tau);
      track("rra", a.rra, b.rra);
      track("rta", a.rta, b.rta);
      track("auc", a.auc, b.auc);
    }
    const TrajectoryErrors ta = trajectory_metrics(p, g), tb = oracle_trajectory(p, g);
    track("ate", ta.ate, tb.ate);
    track("rpe_trans", ta.rpe_trans, tb.rpe_trans);
    track("rpe_rot", ta.rpe_rot_deg, tb.rpe_rot_deg);

    // Depth thresholds under every scaling mode.
    std::vector<Grid<float>> dp, dg;
    std::vector<Mask> valid;
    std::uniform_real_distribution<double> D(0.5, 3.0), J(0.9, 1.1);
    std::bernoulli_distribution keep(0.8);
    for (int v = 0; v < 2; ++v) {
      Grid<float> a(5, 7), b(5, 7);
      Mask m(5, 7);
      for (std::size_t k = 0; k < a.data.size(); ++k) {
        b.data[k] = static_cast<float>(D(rng));
        a.data[k] = static_cast<float>(b.data[k] * J(rng) * (1.0 + 0.3 * v));
        m.data[k] = keep(rng);
      }
      dp.push_back(a);
      dg.push_back(b);
      valid.push_back(m);
    }
    for (auto mode : {DepthScaling::kNone, DepthScaling::kMono, DepthScaling::kVideo}) {
      const DepthErrors a = depth_metrics(dp, dg, valid, mode), b = oracle_depth(dp, dg, valid, mode);
      track("abs_rel", a.abs_rel, b.abs_rel);
      track("delta_1.25", a.delta_125, b.delta_125);
      track("inlier_1.03", a.inlier_103, b.inlier_103);
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "100 instances, max |diff| = %.3g (%s), tol 1e-9", worst, worst_name.c_str());
  return {worst <= 1e-9, buf};
}

}  // namespace promptrecon::acceptance
