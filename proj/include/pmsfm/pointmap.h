#pragma once

#include <cmath>

#include "pmsfm/types.h"

namespace pmsfm {

// H x W grid of 3D points in the coordinate frame of camera `frame`, stored
// row-major (pixel (i, j) at row j * width + i) with per-pixel confidence.
template <typename Scalar>
struct PointMapT {
  using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
  using Confidence = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  int width = 0;
  int height = 0;
  ImageId frame = 0;
  Points points;
  Confidence confidence;

  PointMapT() = default;
  PointMapT(int w, int h, ImageId f)
      : width(w), height(h), frame(f), points(Points::Zero(w * h, 3)),
        confidence(Confidence::Ones(w * h)) {}

  int size() const { return width * height; }
  int Index(int i, int j) const { return j * width + i; }
  bool Contains(int i, int j) const {
    return i >= 0 && j >= 0 && i < width && j < height;
  }
  Vec3<Scalar> At(int i, int j) const { return points.row(Index(i, j)).transpose(); }

  void Validate() const {
    PMSFM_CHECK(width >= 1 && height >= 1, ErrorKind::kShapeMismatch,
                "pointmap must be non-empty");
    PMSFM_CHECK(points.rows() == size() && confidence.size() == size(),
                ErrorKind::kShapeMismatch, "pointmap grids disagree");
    PMSFM_CHECK(points.allFinite() && confidence.allFinite(),
                ErrorKind::kInvalidArgument, "pointmap has non-finite entries");
    PMSFM_CHECK((confidence.array() >= Scalar(0)).all(),
                ErrorKind::kInvalidArgument, "negative confidence");
  }

  template <typename Other>
  PointMapT<Other> Cast() const {
    PointMapT<Other> out;
    out.width = width;
    out.height = height;
    out.frame = frame;
    out.points = points.template cast<Other>();
    out.confidence = confidence.template cast<Other>();
    return out;
  }
};

using PointMap = PointMapT<double>;

// h x w grid of d-dimensional feature vectors, one row per token.
template <typename Scalar>
struct FeatureMapT {
  using Features = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  int width = 0;
  int height = 0;
  Features features;

  FeatureMapT() = default;
  FeatureMapT(int w, int h, int dim)
      : width(w), height(h), features(Features::Zero(w * h, dim)) {}

  int dim() const { return static_cast<int>(features.cols()); }
  int size() const { return width * height; }
  int Index(int i, int j) const { return j * width + i; }

  void Validate() const {
    PMSFM_CHECK(width >= 1 && height >= 1, ErrorKind::kShapeMismatch,
                "feature map must be non-empty");
    PMSFM_CHECK(features.rows() == size(), ErrorKind::kShapeMismatch,
                "feature grid size mismatch");
    PMSFM_CHECK(dim() >= 2, ErrorKind::kDimensionMismatch,
                "feature dimension must be at least 2");
    PMSFM_CHECK(features.allFinite(), ErrorKind::kInvalidArgument,
                "non-finite features");
  }
};

using FeatureMap = FeatureMapT<double>;

}  // namespace pmsfm
