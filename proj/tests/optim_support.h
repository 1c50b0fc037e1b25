#pragma once

// Optimizer fixtures shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pmsfm/optimizer.h"
#include "pmsfm/synth.h"

namespace pmsfm::testing {

// Canonical views straight from the renderer, so ground truth is an exact
// state of the model.
struct Fixture {
  SynthScene scene;
  SceneState state;
  std::vector<MatchSet> matches;
};

inline std::vector<double> ShiftsOf(const SceneState& s, Stage stage) {
  std::vector<double> out;
  for (int n = 0; n < s.size(); ++n) {
    const CanonicalView& v = s.views[n];
    const double f = stage == Stage::kCoarse ? v.focal : std::exp(s.log_focals[s.shared_focal ? 0 : n]);
    out.push_back(s.rotation_center ? v.median_depth * f / v.focal : 0.0);
  }
  return out;
}

inline void SetWorld(SceneState* s, const std::vector<Similarity<double>>& world, Stage stage) {
  SetLinksFromWorldPoses(&s->tree, world, ShiftsOf(*s, stage));
}

inline std::vector<Similarity<double>> WorldOf(const std::vector<CameraParams>& cams) {
  std::vector<Similarity<double>> out;
  for (const auto& c : cams) {
    Similarity<double> w;
    w.R = c.pose.Rotation();
    w.t = c.pose.t;
    w.s = c.sigma;
    out.push_back(w);
  }
  return out;
}

inline Fixture MakeFixture(int views, std::uint64_t seed, TreeMode mode, const OptimConfig& cfg) {
  SceneOptions so;
  so.width = 64;
  so.height = 48;
  so.focal = 56;
  Fixture fx;
  fx.scene = GenerateScene(SurfaceKind::kBlobs, views, seed, so);
  std::vector<CanonicalView> canon;
  for (int n = 0; n < views; ++n) {
    const PointMap own = fx.scene.OwnPointmap(n);
    canon.push_back(CanonicalFromEstimates(n, std::span(&own, 1)));
  }
  const SceneGraph graph = BuildCompleteGraph(views);
  NoiseConfig noise;
  noise.allow_empty = true;
  MatrixXd weights = MatrixXd::Zero(views, views);
  for (const Edge& e : graph.edges) {
    fx.matches.push_back(SimulatePair(fx.scene, e, noise).prediction.matches);
    weights(e.first, e.second) = weights(e.second, e.first) = fx.matches.back().pairs.size();
  }
  fx.state = MakeState(std::move(canon), BuildKinematicTree(graph, weights, mode), cfg);
  SetWorld(&fx.state, WorldOf(fx.scene.cameras), Stage::kCoarse);
  return fx;
}

inline void Perturb(SceneState* s, Stage stage, std::mt19937_64& rng, double amount) {
  std::normal_distribution<double> g(0.0, amount);
  VectorXd p = PackParameters(*s, stage);
  for (auto& v : p) v += g(rng) * std::max(1.0, std::abs(v));
  UnpackParameters(p, stage, s);
}

// Loss as a function of the packed parameters.
inline double LossAt(const SceneState& base, const VectorXd& p, std::span<const MatchSet> matches,
              Stage stage, const OptimConfig& cfg) {
  SceneState s = base;
  UnpackParameters(p, stage, &s);
  return EvaluateLoss(s, matches, stage, cfg, false).value;
}

struct ClassError {
  double worst = 0;
  std::string where;
};

// Norm-relative error of the analytic gradient against central differences,
// per parameter class, so near-zero entries do not dominate.
inline ClassError GradientError(const SceneState& s, std::span<const MatchSet> matches, Stage stage,
                         const OptimConfig& cfg) {
  const ParameterLayout l = MakeLayout(s, stage);
  const VectorXd p = PackParameters(s, stage);
  const VectorXd analytic = EvaluateLoss(s, matches, stage, cfg, true).gradient;
  VectorXd numeric(p.size());
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(p(k)));
    auto at = [&](double step) {
      VectorXd q = p;
      q(k) += step;
      return LossAt(s, q, matches, stage, cfg);
    };
    // Fourth-order central stencil: the robust loss curves sharply near
    // small residuals.
    numeric(k) = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
  }
  std::vector<std::pair<std::string, std::vector<int>>> classes{{"rotation", {}}, {"pivot", {}}, {"scale", {}}, {"focal", {}}, {"anchor", {}}};
  for (int n = 0; n < s.size(); ++n)
    for (int k = 0; k < ParameterLayout::kPoseBlock; ++k)
      classes[k < 4 ? 0 : k < 7 ? 1 : 2].second.push_back(ParameterLayout::PoseOffset(n) + k);
  for (int k = l.focal_offset; k < l.focal_offset + l.focal_count; ++k) classes[3].second.push_back(k);
  for (int k = l.focal_offset + l.focal_count; k < l.size; ++k) classes[4].second.push_back(k);
  ClassError out;
  for (const auto& [name, idx] : classes) {
    if (idx.empty()) continue;
    double diff = 0, ref = 0;
    for (int k : idx) {
      diff += std::pow(analytic(k) - numeric(k), 2);
      ref += numeric(k) * numeric(k);
    }
    const double err = std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
    if (err > out.worst) out = {err, name};
  }
  return out;
}

}  // namespace pmsfm::testing
