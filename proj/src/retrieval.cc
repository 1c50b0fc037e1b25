#include "pmsfm/retrieval.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <random>

#include <Eigen/Eigenvalues>

namespace pmsfm {

Whitening FitWhitening(const SampleMatrix& samples) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  PMSFM_CHECK(d >= 1 && n >= d + 1, ErrorKind::kInsufficientSamples,
              "whitening needs at least d + 1 samples");
  Whitening wh;
  wh.mean = samples.colwise().mean().transpose();
  const MatrixXd centered = samples.rowwise() - wh.mean.transpose();
  const MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
  VectorXd lambda = eig.eigenvalues();
  const double floor = 1e-6 * lambda.maxCoeff();
  lambda = lambda.cwiseMax(floor);
  // Symmetric (zero-phase) form of the PCA whitening map.
  wh.transform = eig.eigenvectors() * lambda.cwiseSqrt().cwiseInverse().asDiagonal() *
                 eig.eigenvectors().transpose();
  return wh;
}

int Codebook::Assign(const VectorXd& x) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < size(); ++k) {
    const double d = (centroids.row(k).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

namespace {

// Nearest centroid of every sample, lowest index on ties. Distances are
// expanded as |c|^2 - 2 x.c so the bulk is one matrix product.
std::vector<int> AssignAll(const SampleMatrix& samples, const SampleMatrix& centroids) {
  const VectorXd c2 = centroids.rowwise().squaredNorm();
  const MatrixXd cross = samples * centroids.transpose();
  std::vector<int> out(samples.rows());
  for (Eigen::Index s = 0; s < samples.rows(); ++s) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
      const double d = c2(k) - 2.0 * cross(s, k);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    out[s] = best;
  }
  return out;
}

}  // namespace

Codebook TrainCodebook(const SampleMatrix& samples, int k, int iters,
                       std::uint64_t seed) {
  const int n = static_cast<int>(samples.rows());
  PMSFM_CHECK(k >= 1 && n >= k, ErrorKind::kInsufficientSamples,
              "k-means needs at least K samples");
  std::mt19937_64 rng(seed);
  Codebook cb;
  cb.centroids.resize(k, samples.cols());

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  int first = std::uniform_int_distribution<int>(0, n - 1)(rng);
  cb.centroids.row(0) = samples.row(first);
  chosen[first] = 1;
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
      d2[s] = std::min(d2[s], (samples.row(s) - cb.centroids.row(c - 1)).squaredNorm());
      total += d2[s];
    }
    int pick = -1;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (int s = 0; s < n; ++s) {
        if (d2[s] <= 0.0) continue;
        pick = s;
        r -= d2[s];
        if (r <= 0.0) break;
      }
    }
    if (pick < 0) {
      for (int s = 0; s < n; ++s)
        if (!chosen[s]) {
          pick = s;
          break;
        }
    }
    chosen[pick] = 1;
    cb.centroids.row(c) = samples.row(pick);
  }

  std::vector<int> assign(n, 0);
  for (int it = 0; it < iters; ++it) {
    assign = AssignAll(samples, cb.centroids);
    SampleMatrix sums = SampleMatrix::Zero(k, samples.cols());
    std::vector<int> counts(k, 0);
    for (int s = 0; s < n; ++s) {
      sums.row(assign[s]) += samples.row(s);
      ++counts[assign[s]];
    }
    std::vector<char> taken(n, 0);
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        cb.centroids.row(c) = sums.row(c) / counts[c];
        continue;
      }
      int far = -1;
      double far_d = -1.0;
      for (int s = 0; s < n; ++s) {
        if (taken[s]) continue;
        const double d = (samples.row(s) - cb.centroids.row(assign[s])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = s;
        }
      }
      taken[far] = 1;
      cb.centroids.row(c) = samples.row(far);
    }
  }
  return cb;
}

void AsmkDescriptor::Validate() const {
  for (std::size_t e = 0; e < entries.size(); ++e) {
    PMSFM_CHECK(static_cast<int>(entries[e].bits.size()) == dim,
                ErrorKind::kDimensionMismatch, "residual size mismatch");
    PMSFM_CHECK(e == 0 || entries[e].cell > entries[e - 1].cell,
                ErrorKind::kInvalidArgument, "cell ids must increase");
  }
}

AsmkDescriptor AsmkEncode(const FeatureMap& fm, const Whitening& wh,
                          const Codebook& cb) {
  fm.Validate();
  PMSFM_CHECK(fm.dim() == wh.dim() && fm.dim() == cb.dim(),
              ErrorKind::kDimensionMismatch, "feature/codebook dimension mismatch");
  std::map<int, VectorXd> residuals;
  for (int t = 0; t < fm.size(); ++t) {
    const VectorXd x = wh.Apply(fm.features.row(t).transpose());
    const int cell = cb.Assign(x);
    auto [it, inserted] = residuals.try_emplace(cell, VectorXd::Zero(fm.dim()));
    it->second += x - cb.centroids.row(cell).transpose();
  }
  AsmkDescriptor out;
  out.dim = fm.dim();
  for (auto& [cell, r] : residuals) {
    const double norm = r.norm();
    if (norm > 0) r /= norm;
    AsmkEntry e;
    e.cell = static_cast<std::uint32_t>(cell);
    e.bits.resize(out.dim);
    for (int c = 0; c < out.dim; ++c) e.bits[c] = r(c) < 0.0 ? -1 : 1;
    out.entries.push_back(std::move(e));
  }
  return out;
}

namespace {

double Selectivity(double u, const AsmkConfig& cfg) {
  if (!(u > cfg.tau)) return 0.0;
  return (u < 0 ? -1.0 : 1.0) * std::pow(std::abs(u), cfg.alpha);
}

double RawScore(const AsmkDescriptor& a, const AsmkDescriptor& b,
                const AsmkConfig& cfg) {
  double score = 0.0;
  std::size_t ia = 0, ib = 0;
  while (ia < a.entries.size() && ib < b.entries.size()) {
    const auto& ea = a.entries[ia];
    const auto& eb = b.entries[ib];
    if (ea.cell < eb.cell) {
      ++ia;
    } else if (eb.cell < ea.cell) {
      ++ib;
    } else {
      int dot = 0;
      for (int c = 0; c < a.dim; ++c) dot += ea.bits[c] * eb.bits[c];
      score += Selectivity(static_cast<double>(dot) / a.dim, cfg);
      ++ia;
      ++ib;
    }
  }
  return score;
}

}  // namespace

double AsmkSimilarity(const AsmkDescriptor& a, const AsmkDescriptor& b,
                      const AsmkConfig& cfg) {
  PMSFM_CHECK(a.dim == b.dim, ErrorKind::kDimensionMismatch,
              "descriptor dimensions differ");
  const double self_a = RawScore(a, a, cfg);
  const double self_b = RawScore(b, b, cfg);
  if (self_a <= 0.0 || self_b <= 0.0) return 0.0;
  const double s = RawScore(a, b, cfg) / std::sqrt(self_a * self_b);
  return std::clamp(s, 0.0, 1.0);
}

MatrixXd SimilarityMatrix(std::span<const AsmkDescriptor> descriptors,
                          const AsmkConfig& cfg) {
  const int n = static_cast<int>(descriptors.size());
  PMSFM_CHECK(n >= 1, ErrorKind::kBadCount, "no descriptors");
  MatrixXd S = MatrixXd::Identity(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      S(i, j) = S(j, i) = AsmkSimilarity(descriptors[i], descriptors[j], cfg);
  return S;
}

MatrixXd GlobalPoolingSimilarity(std::span<const FeatureMap> maps,
                                 const Whitening& wh) {
  const int n = static_cast<int>(maps.size());
  std::vector<VectorXd> pooled;
  for (const auto& m : maps) {
    PMSFM_CHECK(m.dim() == wh.dim(), ErrorKind::kDimensionMismatch,
                "feature/whitening dimension mismatch");
    VectorXd acc = VectorXd::Zero(m.dim());
    for (int t = 0; t < m.size(); ++t) acc += wh.Apply(m.features.row(t).transpose());
    pooled.push_back(acc / m.size());
  }
  MatrixXd S = MatrixXd::Identity(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double den = pooled[i].norm() * pooled[j].norm();
      const double cos = den > 0 ? pooled[i].dot(pooled[j]) / den : 0.0;
      S(i, j) = S(j, i) = std::clamp((1.0 + cos) / 2.0, 0.0, 1.0);
    }
  return S;
}

SampleMatrix CollectTokens(std::span<const FeatureMap> maps,
                           std::size_t max_samples) {
  std::size_t total = 0;
  for (const auto& m : maps) total += m.size();
  PMSFM_CHECK(total > 0 && !maps.empty(), ErrorKind::kInsufficientSamples,
              "no tokens");
  const std::size_t stride = std::max<std::size_t>(1, (total + max_samples - 1) / max_samples);
  SampleMatrix out((total + stride - 1) / stride, maps[0].dim());
  std::size_t flat = 0, row = 0;
  for (const auto& m : maps) {
    PMSFM_CHECK(m.dim() == maps[0].dim(), ErrorKind::kDimensionMismatch,
                "feature dimensions differ across images");
    for (int t = 0; t < m.size(); ++t, ++flat)
      if (flat % stride == 0) out.row(row++) = m.features.row(t);
  }
  out.conservativeResize(row, Eigen::NoChange);
  return out;
}

RetrievalModel FitRetrievalModel(std::span<const FeatureMap> maps, int k,
                                 std::size_t max_samples, std::uint64_t seed) {
  const SampleMatrix tokens = CollectTokens(maps, max_samples);
  RetrievalModel model;
  model.whitening = FitWhitening(tokens);
  SampleMatrix whitened(tokens.rows(), tokens.cols());
  for (Eigen::Index r = 0; r < tokens.rows(); ++r)
    whitened.row(r) = model.whitening.Apply(tokens.row(r).transpose()).transpose();
  const int clusters = std::min<int>(k, static_cast<int>(whitened.rows()));
  model.codebook = TrainCodebook(whitened, clusters, 20, seed);
  return model;
}

namespace {

void PutU32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t GetU32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  PMSFM_CHECK(is.good(), ErrorKind::kParse, "truncated descriptor");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void WriteDescriptor(std::ostream& os, const AsmkDescriptor& d) {
  os.write("ASMK", 4);
  PutU32(os, static_cast<std::uint32_t>(d.dim));
  PutU32(os, static_cast<std::uint32_t>(d.entries.size()));
  const int nbytes = (d.dim + 7) / 8;
  std::vector<char> packed(nbytes);
  for (const auto& e : d.entries) {
    PutU32(os, e.cell);
    std::fill(packed.begin(), packed.end(), 0);
    for (int c = 0; c < d.dim; ++c)
      if (e.bits[c] > 0) packed[c / 8] = static_cast<char>(packed[c / 8] | (1 << (c % 8)));
    os.write(packed.data(), nbytes);
  }
}

AsmkDescriptor ReadDescriptor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  PMSFM_CHECK(is.good() && std::string(magic, 4) == "ASMK", ErrorKind::kParse,
              "bad descriptor magic");
  AsmkDescriptor d;
  d.dim = static_cast<int>(GetU32(is));
  const std::uint32_t count = GetU32(is);
  const int nbytes = (d.dim + 7) / 8;
  std::vector<unsigned char> packed(nbytes);
  for (std::uint32_t k = 0; k < count; ++k) {
    AsmkEntry e;
    e.cell = GetU32(is);
    is.read(reinterpret_cast<char*>(packed.data()), nbytes);
    PMSFM_CHECK(is.good() || (is.eof() && k + 1 == count), ErrorKind::kParse,
                "truncated descriptor");
    e.bits.resize(d.dim);
    for (int c = 0; c < d.dim; ++c) e.bits[c] = (packed[c / 8] >> (c % 8)) & 1 ? 1 : -1;
    d.entries.push_back(std::move(e));
  }
  d.Validate();
  return d;
}

}  // namespace pmsfm
