#pragma once

// Pinhole camera model, quaternion poses and scaled rigid transforms.
//
// Conventions: a Pose is a world-to-camera rigid transform with quaternion
// coefficients stored as (w, x, y, z). A camera additionally carries a scale
// sigma, so a world point x lands in camera coordinates as R * (sigma * x) + t
// and is then projected with K followed by perspective division.

#include <optional>
#include <vector>

#include "pmsfm/types.h"

namespace pmsfm {

inline constexpr double kMinDepth = 1e-9;

struct Intrinsics {
  double focal = 1.0;
  Vector2d principal_point = Vector2d::Zero();
  int width = 1;
  int height = 1;

  // Square pixels with the principal point at the image center.
  static Intrinsics Centered(double focal, int width, int height);
  void Validate() const;
};

struct Pose {
  Vector4d q = Vector4d(1, 0, 0, 0);
  Vector3d t = Vector3d::Zero();

  static Pose Identity() { return {}; }
  static Pose FromRt(const Matrix3d& R, const Vector3d& t);

  Matrix3d Rotation() const;
  Matrix4d Matrix() const;
  Pose Inverse() const;
  Vector3d Center() const { return -(Rotation().transpose() * t); }
  Vector3d Apply(const Vector3d& x) const { return Rotation() * x + t; }
  void Normalize();
};

// this * other, i.e. apply other first.
Pose Compose(const Pose& a, const Pose& b);

struct CameraParams {
  Intrinsics intrinsics;
  Pose pose;
  double sigma = 1.0;
  std::optional<ImageId> parent;
};

template <typename T>
Vec4<T> NormalizeQuaternion(const Vec4<T>& q) {
  using std::sqrt;
  const T n = sqrt(q.squaredNorm());
  return q / n;
}

// Rotation matrix of the normalized quaternion (w, x, y, z).
template <typename T>
Mat3<T> QuaternionToRotation(const Vec4<T>& q_raw) {
  const Vec4<T> q = NormalizeQuaternion(q_raw);
  const T w = q(0), x = q(1), y = q(2), z = q(3);
  const T one(1.0), two(2.0);
  Mat3<T> R;
  R(0, 0) = one - two * (y * y + z * z);
  R(0, 1) = two * (x * y - w * z);
  R(0, 2) = two * (x * z + w * y);
  R(1, 0) = two * (x * y + w * z);
  R(1, 1) = one - two * (x * x + z * z);
  R(1, 2) = two * (y * z - w * x);
  R(2, 0) = two * (x * z - w * y);
  R(2, 1) = two * (y * z + w * x);
  R(2, 2) = one - two * (x * x + y * y);
  return R;
}

Vector4d RotationToQuaternion(const Matrix3d& R);

// Scaled rigid world-to-camera map x -> R * (s * x) + t.
template <typename T>
struct Similarity {
  Mat3<T> R = Mat3<T>::Identity();
  Vec3<T> t = Vec3<T>::Zero();
  T s = T(1.0);

  Vec3<T> Apply(const Vec3<T>& x) const { return R * (s * x) + t; }
  Vec3<T> InverseApply(const Vec3<T>& y) const {
    return (R.transpose() * (y - t)) / s;
  }
};

// a after b.
template <typename T>
Similarity<T> Compose(const Similarity<T>& a, const Similarity<T>& b) {
  Similarity<T> out;
  out.R = a.R * b.R;
  out.s = a.s * b.s;
  out.t = a.R * (a.s * b.t) + a.t;
  return out;
}

// Forward projection; returns false when the camera-frame depth is not
// above kMinDepth.
template <typename T>
bool ProjectCamera(const T& focal, double cx, double cy, const Vec3<T>& xc,
                   Vec2<T>* pixel) {
  if (!(xc(2) > T(kMinDepth))) return false;
  const T inv_z = T(1.0) / xc(2);
  (*pixel)(0) = focal * xc(0) * inv_z + T(cx);
  (*pixel)(1) = focal * xc(1) * inv_z + T(cy);
  return true;
}

// Camera-frame point seen at pixel (i, j) with the given depth.
template <typename T>
Vec3<T> BackprojectCamera(const T& focal, double cx, double cy, double i,
                          double j, const T& depth) {
  Vec3<T> ray;
  ray(0) = (T(i) - T(cx)) / focal;
  ray(1) = (T(j) - T(cy)) / focal;
  ray(2) = T(1.0);
  return ray * depth;
}

// pixel = K * (R * sigma * x + t), then perspective division.
Vector2d Reproject(const CameraParams& cam, const Vector3d& x);

// (1 / sigma) * P^-1 * K^-1 * depth * [i, j, 1]^T.
Vector3d InverseReproject(const CameraParams& cam, double i, double j,
                          double depth);

// Applies the fixed z-axis post-translation of the rotation-center
// parametrization: returns T~ * raw with m = median_depth * focal / canonical.
Pose ReparametrizedPose(const Pose& raw, double median_canonical_depth,
                        double focal, double canonical_focal);

}  // namespace pmsfm
