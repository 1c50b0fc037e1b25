#include "pmsfm/eval.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "pmsfm/optimizer.h"

namespace pmsfm {

namespace {

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

std::map<ImageId, Pose> Registered(const Trajectory& traj) {
  std::map<ImageId, Pose> out;
  for (const auto& e : traj) {
    PMSFM_CHECK(!out.contains(e.id), ErrorKind::kInvalidArgument,
                "duplicate trajectory id " + std::to_string(e.id));
    if (e.pose) out[e.id] = *e.pose;
  }
  return out;
}

double AngleBetween(const Vector3d& a, const Vector3d& b) {
  const double c = a.dot(b) / (a.norm() * b.norm());
  return std::acos(std::clamp(c, -1.0, 1.0)) * kRadToDeg;
}

double CenterSpread(const std::vector<Vector3d>& centers) {
  if (centers.empty()) return 0.0;
  Vector3d mean = Vector3d::Zero();
  for (const auto& c : centers) mean += c;
  mean /= static_cast<double>(centers.size());
  double ss = 0;
  for (const auto& c : centers) ss += (c - mean).squaredNorm();
  return std::sqrt(ss / static_cast<double>(centers.size()));
}

}  // namespace

double RotationAngleDeg(const Matrix3d& a, const Matrix3d& b) {
  const Matrix3d d = a * b.transpose();
  const double c = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near zero; use the skew part there.
  const Vector3d w(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(w.norm() / 2.0, c) * kRadToDeg;
}

Similarity<double> ProcrustesAlign(std::span<const Vector3d> est,
                                   std::span<const Vector3d> gt) {
  return UmeyamaAlign(est, gt);
}

double Ate(const Trajectory& est, const Trajectory& gt) {
  const auto e = Registered(est);
  const auto g = Registered(gt);
  std::vector<Vector3d> ce, cg;
  for (const auto& [id, pose] : g) {
    auto it = e.find(id);
    if (it == e.end()) continue;
    ce.push_back(it->second.Center());
    cg.push_back(pose.Center());
  }
  PMSFM_CHECK(ce.size() >= 3, ErrorKind::kDegenerateConfiguration,
              "ATE needs at least three common cameras");
  const Similarity<double> s = ProcrustesAlign(ce, cg);
  const double spread = CenterSpread(cg);
  PMSFM_CHECK(spread > 0, ErrorKind::kDegenerateConfiguration,
              "ground-truth centers coincide");
  double sum = 0;
  for (std::size_t k = 0; k < ce.size(); ++k) sum += (s.Apply(ce[k]) - cg[k]).norm();
  return sum / static_cast<double>(ce.size()) / spread;
}

PairErrors PairwiseErrors(const Trajectory& est, const Trajectory& gt,
                          TranslationErrorMode mode) {
  const auto e = Registered(est);
  const auto g = Registered(gt);
  std::vector<ImageId> ids;
  for (const auto& entry : gt) ids.push_back(entry.id);
  std::sort(ids.begin(), ids.end());

  // Coincident centers have no spread; the translation magnitude then sets
  // the scale of rounding noise.
  auto spread_of = [](const std::map<ImageId, Pose>& poses) {
    std::vector<Vector3d> c;
    double t_norm = 0;
    for (const auto& [id, p] : poses) {
      c.push_back(p.Center());
      t_norm += p.t.norm();
    }
    const double spread = CenterSpread(c);
    if (poses.empty()) return spread;
    t_norm /= static_cast<double>(poses.size());
    return spread > 1e-9 * t_norm ? spread : t_norm;
  };
  const double tol_e = 1e-9 * spread_of(e);
  const double tol_g = 1e-9 * spread_of(g);

  auto direction = [mode](const Pose& pi, const Pose& pj) -> Vector3d {
    if (mode == TranslationErrorMode::kCenterDirection)
      return pi.Rotation() * (pj.Center() - pi.Center());
    const Matrix3d Rij = pj.Rotation() * pi.Rotation().transpose();
    return pj.t - Rij * pi.t;
  };

  PairErrors out;
  constexpr double kFail = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < ids.size(); ++a)
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      auto ea = e.find(ids[a]), eb = e.find(ids[b]);
      auto ga = g.find(ids[a]), gb = g.find(ids[b]);
      if (ea == e.end() || eb == e.end() || ga == g.end() || gb == g.end()) {
        out.rotation.push_back(kFail);
        out.translation.push_back(kFail);
        continue;
      }
      const Matrix3d r_est = eb->second.Rotation() * ea->second.Rotation().transpose();
      const Matrix3d r_gt = gb->second.Rotation() * ga->second.Rotation().transpose();
      out.rotation.push_back(RotationAngleDeg(r_est, r_gt));

      const Vector3d t_est = direction(ea->second, eb->second);
      const Vector3d t_gt = direction(ga->second, gb->second);
      const bool zero_est = t_est.norm() <= tol_e;
      const bool zero_gt = t_gt.norm() <= tol_g;
      if (zero_est && zero_gt)
        out.translation.push_back(0.0);
      else if (zero_est || zero_gt)
        out.translation.push_back(90.0);
      else
        out.translation.push_back(AngleBetween(t_est, t_gt));
    }
  return out;
}

namespace {

double PercentBelow(const std::vector<double>& errors, double tau) {
  if (errors.empty()) return 100.0;
  const auto hits = std::count_if(errors.begin(), errors.end(),
                                  [tau](double v) { return v < tau; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(errors.size());
}

}  // namespace

PairAccuracy RraRta(const Trajectory& est, const Trajectory& gt, double tau_deg,
                    TranslationErrorMode mode) {
  const PairErrors errs = PairwiseErrors(est, gt, mode);
  return {PercentBelow(errs.rotation, tau_deg), PercentBelow(errs.translation, tau_deg)};
}

double Maa(const Trajectory& est, const Trajectory& gt, int tau_max,
           TranslationErrorMode mode) {
  PMSFM_CHECK(tau_max >= 1, ErrorKind::kInvalidArgument, "tau_max must be >= 1");
  const PairErrors errs = PairwiseErrors(est, gt, mode);
  double sum = 0;
  for (int t = 1; t <= tau_max; ++t)
    sum += std::min(PercentBelow(errs.rotation, t), PercentBelow(errs.translation, t)) / 100.0;
  return sum / tau_max;
}

double RegistrationRate(const Trajectory& traj) {
  if (traj.empty()) return 0.0;
  const auto registered = std::count_if(traj.begin(), traj.end(),
                                        [](const TrajectoryEntry& e) { return e.pose.has_value(); });
  return 100.0 * static_cast<double>(registered) / static_cast<double>(traj.size());
}

}  // namespace pmsfm
