#pragma once

// File formats: tensor bundles (JSON manifest + raw little-endian blobs with
// CRC32 per array), trajectory and graph text files, and PLY point clouds.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmsfm/eval.h"
#include "pmsfm/local_recon.h"
#include "pmsfm/retrieval.h"

namespace pmsfm {

enum class DType { kF32, kF64, kI32 };

const char* DTypeName(DType t);
int DTypeSize(DType t);

struct TensorArray {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::int64_t> shape;
  std::vector<double> values;  // already rounded to dtype

  std::int64_t count() const;
  bool operator==(const TensorArray&) const = default;
};

class TensorBundle {
 public:
  std::map<std::string, std::string> meta;

  // Values are rounded to `dtype` on insertion, so a saved bundle reloads
  // equal to the in-memory one.
  void Put(std::string name, DType dtype, std::vector<std::int64_t> shape,
           std::vector<double> values);
  template <typename Derived>
  void PutMatrix(std::string name, DType dtype, const Eigen::MatrixBase<Derived>& m) {
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(static_cast<double>(m(r, c)));
    Put(std::move(name), dtype, {m.rows(), m.cols()}, std::move(v));
  }

  bool Has(const std::string& name) const;
  const TensorArray& Get(const std::string& name) const;
  // Row-major view as a matrix; 1-D arrays become a column.
  MatrixXd GetMatrix(const std::string& name) const;
  const std::string& Meta(const std::string& key) const;

  const std::vector<TensorArray>& arrays() const { return arrays_; }
  bool operator==(const TensorBundle&) const = default;

 private:
  std::vector<TensorArray> arrays_;
};

std::string SerializeBundle(const TensorBundle& bundle);
TensorBundle ParseBundle(const std::string& bytes);
void WriteBundle(const std::filesystem::path& path, const TensorBundle& bundle);
TensorBundle ReadBundle(const std::filesystem::path& path);

TensorBundle PairToBundle(const PairPrediction& pred);
PairPrediction PairFromBundle(const TensorBundle& bundle);

// Per-image inputs: retrieval tokens, plus a monocular own-frame pointmap
// used when the image ends up without pairs.
struct ImageInput {
  ImageId id = 0;
  FeatureMap tokens;
  std::optional<PointMap> own;
};

TensorBundle ImageToBundle(const ImageInput& image);
ImageInput ImageFromBundle(const TensorBundle& bundle);

TensorBundle RetrievalModelToBundle(const RetrievalModel& model);
RetrievalModel RetrievalModelFromBundle(const TensorBundle& bundle);

// One line per camera: "id qw qx qy qz tx ty tz" or "id unregistered".
std::string FormatTrajectory(const Trajectory& traj);
Trajectory ParseTrajectory(const std::string& text);
void WriteTrajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory ReadTrajectory(const std::filesystem::path& path);

// "nodes N", "keyframe i", "edge n m", then optionally "tree_mode name",
// "root r" and "tree child parent" lines.
std::string FormatGraph(const SceneGraph& graph, const KinematicTree* tree = nullptr);
struct GraphFile {
  SceneGraph graph;
  std::optional<KinematicTree> tree;
};
GraphFile ParseGraph(const std::string& text);

struct PlyCloud {
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> points;
  std::vector<std::uint8_t> gray;
};

struct PlyHeader {
  bool binary = false;
  std::int64_t vertex_count = 0;
  std::vector<std::string> properties;
  bool operator==(const PlyHeader&) const = default;
};

// Grayscale is 255 * confidence / max confidence (0 when all are zero).
PlyCloud MakeCloud(const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>& points,
                   const VectorXd& confidence);
std::string FormatPly(const PlyCloud& cloud, bool binary);
PlyHeader ParsePlyHeader(const std::string& bytes, std::size_t* body_offset = nullptr);
PlyCloud ParsePly(const std::string& bytes);

std::string ReadFile(const std::filesystem::path& path);
void WriteFile(const std::filesystem::path& path, const std::string& bytes);

// Shortest round-trip decimal form.
std::string FormatDouble(double v);
double ParseDouble(const std::string& s);

}  // namespace pmsfm
