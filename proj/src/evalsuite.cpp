#include "promptrecon/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "promptrecon/errors.hpp"

namespace promptrecon {

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  std::vector<std::size_t> idx(points_.size());
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(points_.size());
  root_ = build(idx, 0, idx.size(), 0);
}

int KdTree::build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi, int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 3;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                   [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({idx[mid], axis});
  const int l = build(idx, lo, mid, depth + 1);
  const int r = build(idx, mid + 1, hi, depth + 1);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

void KdTree::search(int node, const Vec3& q, std::size_t& best, double& best_d2) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const Vec3& p = points_[n.point];
  const double d2 = (p - q).squaredNorm();
  if (d2 < best_d2 || (d2 == best_d2 && n.point < best)) {
    best_d2 = d2;
    best = n.point;
  }
  const double diff = q[n.axis] - p[n.axis];
  const int near = diff < 0 ? n.left : n.right;
  const int far = diff < 0 ? n.right : n.left;
  search(near, q, best, best_d2);
  if (diff * diff <= best_d2) search(far, q, best, best_d2);
}

std::pair<std::size_t, double> KdTree::nearest(const Vec3& q) const {
  if (points_.empty()) throw ProtocolError("nearest-neighbor query on an empty set");
  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  search(root_, q, best, best_d2);
  return {best, best_d2};
}

double median(std::vector<double> v) {
  if (v.empty()) throw ProtocolError("median of an empty set");
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + n / 2, v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + n / 2);
  return 0.5 * (lo + hi);
}

namespace {

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::vector<double> nn_distances(const std::vector<Vec3>& from, const KdTree& to) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from) d.push_back(std::sqrt(to.nearest(p).second));
  return d;
}

}  // namespace

AccComp chamfer_acc_comp(const std::vector<Vec3>& pred_in, const std::vector<Vec3>& gt, bool align) {
  if (pred_in.empty() || gt.empty()) throw ProtocolError("chamfer: empty point set");
  std::vector<Vec3> pred = pred_in;
  if (align) {
    if (pred.size() != gt.size()) throw ProtocolError("chamfer: alignment needs index-wise correspondences");
    const Similarity s = umeyama_align(pred, gt, true);
    for (auto& p : pred) p = s.apply(p);
  }
  const KdTree gt_tree(gt), pred_tree(pred);
  const auto acc = nn_distances(pred, gt_tree);
  const auto comp = nn_distances(gt, pred_tree);
  return {mean_of(acc), median(acc), mean_of(comp), median(comp)};
}

double angle_between_deg(const Vec3& a, const Vec3& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 && nb < 1e-12) return 0.0;
  if (na < 1e-12 || nb < 1e-12) return 180.0;
  const double c = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

PairErrors pose_pair_errors(const CameraSet& pred, const CameraSet& gt) {
  if (pred.size() != gt.size()) throw ProtocolError("pose metrics: view count mismatch");
  if (gt.size() < 2) throw ProtocolError("pose metrics need at least two views");
  PairErrors e;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = i + 1; j < gt.size(); ++j) {
      const Pose rp = pred.poses[j].compose(pred.poses[i].inverse());
      const Pose rg = gt.poses[j].compose(gt.poses[i].inverse());
      e.rotation_deg.push_back(rotation_angle_deg(rp.rotation(), rg.rotation()));
      e.translation_deg.push_back(angle_between_deg(rp.translation, rg.translation));
    }
  }
  return e;
}

PoseAccuracy pose_pair_metrics(const CameraSet& pred, const CameraSet& gt, int tau_deg) {
  if (tau_deg < 1) throw ProtocolError("pose threshold must be >= 1 degree");
  const PairErrors e = pose_pair_errors(pred, gt);
  const double n = static_cast<double>(e.rotation_deg.size());
  auto below = [&](const std::vector<double>& v, double t) {
    return 100.0 * static_cast<double>(std::count_if(v.begin(), v.end(), [t](double x) { return x < t; })) / n;
  };
  PoseAccuracy a;
  a.rra = below(e.rotation_deg, tau_deg);
  a.rta = below(e.translation_deg, tau_deg);
  double area = 0.0;
  for (int t = 1; t <= tau_deg; ++t) area += std::min(below(e.rotation_deg, t), below(e.translation_deg, t));
  a.auc = area / tau_deg;
  return a;
}

TrajectoryErrors trajectory_metrics(const CameraSet& pred, const CameraSet& gt) {
  if (pred.size() != gt.size()) throw ProtocolError("trajectory metrics: length mismatch");
  if (gt.size() < 2) throw ProtocolError("trajectory metrics need at least two poses");
  const std::size_t n = gt.size();
  std::vector<Vec3> pc(n), gc(n);
  for (std::size_t i = 0; i < n; ++i) {
    pc[i] = pred.poses[i].center();
    gc[i] = gt.poses[i].center();
  }
  Similarity s;
  try {
    s = umeyama_align(pc, gc, true);
  } catch (const GeometryError&) {
    // Too few or collinear centers: rotation from the first pose, least-squares scale and shift.
    s.rotation = gt.poses[0].rotation().transpose() * pred.poses[0].rotation();
    Vec3 mp = Vec3::Zero(), mg = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      mp += s.rotation * pc[i];
      mg += gc[i];
    }
    mp /= static_cast<double>(n);
    mg /= static_cast<double>(n);
    double cov = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 d = s.rotation * pc[i] - mp;
      cov += d.dot(gc[i] - mg);
      var += d.squaredNorm();
    }
    s.scale = var > 1e-24 ? cov / var : 1.0;
    s.translation = mg - s.scale * mp;
  }
  std::vector<Vec3> aligned(n);
  std::vector<Mat3> pred_c2w(n), gt_c2w(n);
  for (std::size_t i = 0; i < n; ++i) {
    aligned[i] = s.apply(pc[i]);
    pred_c2w[i] = s.rotation * pred.poses[i].rotation().transpose();
    gt_c2w[i] = gt.poses[i].rotation().transpose();
  }
  TrajectoryErrors e;
  e.ate = rmse(aligned, gc);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Vec3 tp = pred_c2w[i].transpose() * (aligned[i + 1] - aligned[i]);
    const Vec3 tg = gt_c2w[i].transpose() * (gc[i + 1] - gc[i]);
    e.rpe_trans += (tp - tg).norm();
    e.rpe_rot_deg += rotation_angle_deg(pred_c2w[i].transpose() * pred_c2w[i + 1], gt_c2w[i].transpose() * gt_c2w[i + 1]);
  }
  e.rpe_trans /= static_cast<double>(n - 1);
  e.rpe_rot_deg /= static_cast<double>(n - 1);
  return e;
}

DepthScaling parse_depth_scaling(const std::string& s) {
  if (s == "none") return DepthScaling::kNone;
  if (s == "mono") return DepthScaling::kMono;
  if (s == "video") return DepthScaling::kVideo;
  throw ConfigError("depth scaling must be none, mono or video; got '" + s + "'");
}

namespace {

bool usable(float p, float g) { return std::isfinite(p) && std::isfinite(g) && p > 0.0f && g > 0.0f; }

void check_lists(std::size_t a, std::size_t b, std::size_t c, const char* what) {
  if (a != b || a != c) throw ProtocolError(std::string(what) + ": per-view inputs disagree in count");
}

}  // namespace

DepthErrors depth_metrics(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                          const std::vector<Mask>& valid, DepthScaling mode) {
  check_lists(pred.size(), gt.size(), valid.size(), "depth metrics");
  std::vector<std::vector<double>> ps(pred.size()), gs(pred.size());
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (pred[v].data.size() != gt[v].data.size()) throw ProtocolError("depth metrics: resolution mismatch");
    for (std::size_t k = 0; k < gt[v].data.size(); ++k) {
      if (valid[v].data[k] && usable(pred[v].data[k], gt[v].data[k])) {
        ps[v].push_back(pred[v].data[k]);
        gs[v].push_back(gt[v].data[k]);
      }
    }
  }
  std::vector<double> scale(pred.size(), 1.0);
  if (mode == DepthScaling::kMono) {
    for (std::size_t v = 0; v < pred.size(); ++v)
      if (!ps[v].empty()) scale[v] = median(gs[v]) / median(ps[v]);
  } else if (mode == DepthScaling::kVideo) {
    std::vector<double> all_p, all_g;
    for (std::size_t v = 0; v < pred.size(); ++v) {
      all_p.insert(all_p.end(), ps[v].begin(), ps[v].end());
      all_g.insert(all_g.end(), gs[v].begin(), gs[v].end());
    }
    if (!all_p.empty()) std::fill(scale.begin(), scale.end(), median(all_g) / median(all_p));
  }
  DepthErrors e;
  std::size_t count = 0;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    for (std::size_t k = 0; k < ps[v].size(); ++k) {
      const double p = scale[v] * ps[v][k], g = gs[v][k];
      const double ratio = std::max(p / g, g / p);
      e.abs_rel += std::abs(p - g) / g;
      e.delta_125 += ratio < 1.25;
      e.inlier_103 += ratio < 1.03;
      ++count;
    }
  }
  if (count == 0) throw ProtocolError("depth metrics: no overlapping valid pixels");
  e.abs_rel /= count;
  e.delta_125 /= count;
  e.inlier_103 /= count;
  return e;
}

double point_inlier_ratio(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                          const std::vector<Mask>& valid, double tol) {
  check_lists(pred.size(), gt.size(), valid.size(), "point metrics");
  std::vector<Vec3> p, g;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (pred[v].channels != 3 || gt[v].channels != 3 || pred[v].data.size() != gt[v].data.size()) {
      throw ProtocolError("point metrics: point maps must be H x W x 3 of equal size");
    }
    for (int i = 0; i < gt[v].height; ++i) {
      for (int j = 0; j < gt[v].width; ++j) {
        if (!valid[v].at(i, j)) continue;
        const Vec3 a(pred[v].at(i, j, 0), pred[v].at(i, j, 1), pred[v].at(i, j, 2));
        const Vec3 b(gt[v].at(i, j, 0), gt[v].at(i, j, 1), gt[v].at(i, j, 2));
        if (!a.allFinite() || !b.allFinite() || b.norm() <= 0.0) continue;
        p.push_back(a);
        g.push_back(b);
      }
    }
  }
  if (p.empty()) throw ProtocolError("point metrics: no valid points");
  std::vector<double> np, ng;
  for (std::size_t k = 0; k < p.size(); ++k) {
    np.push_back(p[k].norm());
    ng.push_back(g[k].norm());
  }
  const double mp = median(np);
  const double s = mp > 0.0 ? median(ng) / mp : 1.0;
  std::size_t inl = 0;
  for (std::size_t k = 0; k < p.size(); ++k) inl += (s * p[k] - g[k]).norm() / g[k].norm() < tol;
  return static_cast<double>(inl) / static_cast<double>(p.size());
}

NormalErrors normal_metrics(const std::vector<Grid<float>>& pred, const std::vector<Grid<float>>& gt,
                            const std::vector<Mask>& mask) {
  check_lists(pred.size(), gt.size(), mask.size(), "normal metrics");
  std::vector<double> err;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    for (int i = 0; i < gt[v].height; ++i) {
      for (int j = 0; j < gt[v].width; ++j) {
        if (!mask[v].at(i, j)) continue;
        const Vec3 a(pred[v].at(i, j, 0), pred[v].at(i, j, 1), pred[v].at(i, j, 2));
        const Vec3 b(gt[v].at(i, j, 0), gt[v].at(i, j, 1), gt[v].at(i, j, 2));
        err.push_back(std::atan2(a.cross(b).norm(), a.dot(b)) * 180.0 / M_PI);
      }
    }
  }
  if (err.empty()) throw ProtocolError("normal metrics: empty mask");
  NormalErrors e;
  e.mean_deg = mean_of(err);
  e.median_deg = median(err);
  auto pct = [&](double t) {
    return 100.0 * static_cast<double>(std::count_if(err.begin(), err.end(), [t](double x) { return x < t; })) / err.size();
  };
  e.within_11_25 = pct(11.25);
  e.within_22_5 = pct(22.5);
  e.within_30 = pct(30.0);
  return e;
}

double psnr(const Grid<float>& pred, const Grid<float>& gt) {
  if (pred.data.size() != gt.data.size() || pred.data.empty()) throw ProtocolError("psnr: image shapes differ");
  double mse = 0.0;
  for (std::size_t k = 0; k < gt.data.size(); ++k) {
    const double d = static_cast<double>(pred.data[k]) - gt.data[k];
    mse += d * d;
  }
  mse /= static_cast<double>(gt.data.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Grid<float>& pred, const Grid<float>& gt) {
  if (!pred.same_extent(gt.height, gt.width) || pred.channels != gt.channels) throw ProtocolError("ssim: image shapes differ");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  if (gt.height < kWin || gt.width < kWin) throw ProtocolError("ssim: image smaller than the 11x11 window");
  double w[kWin][kWin], wsum = 0.0;
  for (int a = 0; a < kWin; ++a) {
    for (int b = 0; b < kWin; ++b) {
      const double da = a - kWin / 2, db = b - kWin / 2;
      w[a][b] = std::exp(-(da * da + db * db) / (2.0 * kSigma * kSigma));
      wsum += w[a][b];
    }
  }
  double total = 0.0;
  std::size_t count = 0;
  for (int ch = 0; ch < gt.channels; ++ch) {
    for (int i = 0; i + kWin <= gt.height; ++i) {
      for (int j = 0; j + kWin <= gt.width; ++j) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int a = 0; a < kWin; ++a) {
          for (int b = 0; b < kWin; ++b) {
            const double k = w[a][b] / wsum;
            const double x = pred.at(i + a, j + b, ch), y = gt.at(i + a, j + b, ch);
            mx += k * x;
            my += k * y;
            xx += k * x * x;
            yy += k * y * y;
            xy += k * x * y;
          }
        }
        const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
        total += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

double focal_error(const std::vector<Intrinsics>& pred, const std::vector<Intrinsics>& gt) {
  if (pred.size() != gt.size() || gt.empty()) throw ProtocolError("focal error: view count mismatch");
  double e = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) e += 0.5 * (std::abs(pred[i].fx - gt[i].fx) + std::abs(pred[i].fy - gt[i].fy));
  return e / static_cast<double>(gt.size());
}

void MetricReport::set(const std::string& name, std::optional<double> value, const std::string& unit) {
  metrics[name] = {value, unit};
}

void MetricReport::set_scene(const std::string& scene, const std::string& name, std::optional<double> value,
                             const std::string& unit) {
  per_scene[scene][name] = {value, unit};
}

void MetricReport::summarize() {
  std::map<std::string, std::pair<double, int>> acc;
  std::map<std::string, std::string> units;
  for (const auto& [scene, ms] : per_scene) {
    for (const auto& [name, m] : ms) {
      units[name] = m.unit;
      if (!m.value) continue;
      acc[name].first += *m.value;
      acc[name].second += 1;
    }
  }
  for (const auto& [name, unit] : units) {
    const auto it = acc.find(name);
    if (it == acc.end() || it->second.second == 0) {
      set(name, std::nullopt, unit);
    } else {
      set(name, it->second.first / it->second.second, unit);
    }
  }
}

namespace {

nlohmann::json metric_json(const Metric& m) {
  nlohmann::json j = {{"unit", m.unit}};
  j["value"] = m.value ? nlohmann::json(*m.value) : nlohmann::json(nullptr);
  return j;
}

std::string fmt(std::optional<double> v) {
  if (!v) return "";
  std::ostringstream s;
  s.precision(10);
  s << *v;
  return s.str();
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["protocol"] = protocol;
  j["metrics"] = nlohmann::json::object();
  for (const auto& [n, m] : metrics) j["metrics"][n] = metric_json(m);
  j["per_scene"] = nlohmann::json::object();
  for (const auto& [s, ms] : per_scene)
    for (const auto& [n, m] : ms) j["per_scene"][s][n] = metric_json(m);
  return j;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "scene,metric,value,unit\n";
  for (const auto& [n, m] : metrics) out << "all," << n << "," << fmt(m.value) << "," << m.unit << "\n";
  for (const auto& [s, ms] : per_scene)
    for (const auto& [n, m] : ms) out << s << "," << n << "," << fmt(m.value) << "," << m.unit << "\n";
  return out.str();
}

}  // namespace promptrecon
