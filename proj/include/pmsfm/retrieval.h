#pragma once

// Training-free image retrieval with aggregated selective match kernels
// (ASMK) over per-image bags of local features.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "pmsfm/pointmap.h"

namespace pmsfm {

using SampleMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Whitening {
  VectorXd mean;
  MatrixXd transform;  // d x d, applied as transform * (x - mean)

  int dim() const { return static_cast<int>(mean.size()); }
  VectorXd Apply(const VectorXd& x) const { return transform * (x - mean); }
};

// PCA whitening; eigenvalues are floored at 1e-6 * max eigenvalue.
Whitening FitWhitening(const SampleMatrix& samples);

struct Codebook {
  SampleMatrix centroids;  // K x d

  int size() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
  // Nearest centroid in L2, ties to the lowest id.
  int Assign(const VectorXd& x) const;
};

// Lloyd's k-means with k-means++ seeding. Empty clusters are re-seeded from
// the sample farthest from its assigned centroid.
Codebook TrainCodebook(const SampleMatrix& samples, int k, int iters,
                       std::uint64_t seed);

struct AsmkEntry {
  std::uint32_t cell = 0;
  std::vector<std::int8_t> bits;  // +1 / -1 per component
};

struct AsmkDescriptor {
  int dim = 0;
  std::vector<AsmkEntry> entries;  // strictly increasing cell ids

  void Validate() const;
};

struct AsmkConfig {
  double alpha = 3.0;
  double tau = 0.0;
};

AsmkDescriptor AsmkEncode(const FeatureMap& fm, const Whitening& wh,
                          const Codebook& cb);

double AsmkSimilarity(const AsmkDescriptor& a, const AsmkDescriptor& b,
                      const AsmkConfig& cfg = {});

// Symmetric N x N matrix of scores in [0, 1] with unit diagonal.
MatrixXd SimilarityMatrix(std::span<const AsmkDescriptor> descriptors,
                          const AsmkConfig& cfg = {});

// Baseline scorer: cosine of whitened mean-pooled features mapped to [0, 1].
MatrixXd GlobalPoolingSimilarity(std::span<const FeatureMap> maps,
                                 const Whitening& wh);

// Stacks the tokens of several feature maps, keeping at most `max_samples`
// tokens chosen with a fixed stride.
SampleMatrix CollectTokens(std::span<const FeatureMap> maps,
                           std::size_t max_samples);

struct RetrievalModel {
  Whitening whitening;
  Codebook codebook;
};

// Fits whitening on raw tokens and the codebook on whitened tokens.
RetrievalModel FitRetrievalModel(std::span<const FeatureMap> maps, int k,
                                 std::size_t max_samples, std::uint64_t seed);

// Little-endian dump: "ASMK" magic, u32 dim, u32 cell count, then per cell a
// u32 id followed by ceil(dim / 8) bytes where bit i is set iff component i
// is +1 (bit i lives in byte i / 8 at position i % 8).
void WriteDescriptor(std::ostream& os, const AsmkDescriptor& d);
AsmkDescriptor ReadDescriptor(std::istream& is);

}  // namespace pmsfm
