#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace pmsfm {

template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T>
using Mat4 = Eigen::Matrix<T, 4, 4>;

using Vector2d = Vec2<double>;
using Vector3d = Vec3<double>;
using Vector4d = Vec4<double>;
using Matrix3d = Mat3<double>;
using Matrix4d = Mat4<double>;
using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

using ImageId = int;

// Pixel coordinates: i is the column (x), j is the row (y).
struct Pixel {
  int i = 0;
  int j = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

enum class ErrorKind {
  kNonPositiveDepth,
  kCycleDetected,
  kMissingNode,
  kInsufficientSamples,
  kDimensionMismatch,
  kBadCount,
  kDisconnected,
  kEmptyEstimates,
  kShapeMismatch,
  kDegenerateGeometry,
  kMissingPrediction,
  kTooFewMatches,
  kNonFiniteLoss,
  kDegenerateConfiguration,
  kNoOverlap,
  kInvalidArgument,
  kParse,
  kIo,
  kCorruptBundle,
};

const char* ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(ErrorKindName(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define PMSFM_CHECK(cond, kind, msg)          \
  do {                                        \
    if (!(cond)) throw ::pmsfm::Error(kind, msg); \
  } while (0)

}  // namespace pmsfm
