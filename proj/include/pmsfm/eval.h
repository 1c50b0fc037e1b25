#pragma once

#include <optional>
#include <span>
#include <vector>

#include "pmsfm/geometry.h"

namespace pmsfm {

struct TrajectoryEntry {
  ImageId id = 0;
  std::optional<Pose> pose;  // world-to-camera; empty when unregistered
};

using Trajectory = std::vector<TrajectoryEntry>;

// Least-squares similarity with gt ~ s R est + t (reflections excluded).
Similarity<double> ProcrustesAlign(std::span<const Vector3d> est,
                                   std::span<const Vector3d> gt);

// Mean distance between aligned estimated centers and ground-truth centers,
// divided by the RMS spread of the ground-truth centers about their centroid.
double Ate(const Trajectory& est, const Trajectory& gt);

enum class TranslationErrorMode { kRelativeTranslation, kCenterDirection };

// Per-pair angular errors in degrees over all pairs of ground-truth ids;
// pairs with an unregistered camera get +infinity.
struct PairErrors {
  std::vector<double> rotation;
  std::vector<double> translation;
};

PairErrors PairwiseErrors(const Trajectory& est, const Trajectory& gt,
                          TranslationErrorMode mode = TranslationErrorMode::kRelativeTranslation);

struct PairAccuracy {
  double rra = 0.0;  // percent
  double rta = 0.0;
};

PairAccuracy RraRta(const Trajectory& est, const Trajectory& gt, double tau_deg,
                    TranslationErrorMode mode = TranslationErrorMode::kRelativeTranslation);

// Mean over integer thresholds 1..tau_max of min(RRA, RTA), in [0, 1].
double Maa(const Trajectory& est, const Trajectory& gt, int tau_max = 30,
           TranslationErrorMode mode = TranslationErrorMode::kRelativeTranslation);

double RegistrationRate(const Trajectory& traj);

double RotationAngleDeg(const Matrix3d& a, const Matrix3d& b);

}  // namespace pmsfm
