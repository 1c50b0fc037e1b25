#include "pmsfm/io.h"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace pmsfm {

namespace {

using Json = nlohmann::json;
using PointRows = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

constexpr const char* kBundleMagic = "TBUNDLE";

double RoundTo(DType t, double v) {
  switch (t) {
    case DType::kF32: return static_cast<double>(static_cast<float>(v));
    case DType::kF64: return v;
    case DType::kI32: return static_cast<double>(static_cast<std::int32_t>(v));
  }
  return v;
}

DType ParseDType(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  if (s == "i32") return DType::kI32;
  throw Error(ErrorKind::kCorruptBundle, "unknown dtype '" + s + "'");
}

template <typename U>
void PutLe(std::string* out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b)
    out->push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

template <typename U>
U GetLe(const unsigned char* p) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
  return v;
}

std::string Encode(const TensorArray& a) {
  std::string out;
  out.reserve(a.values.size() * DTypeSize(a.dtype));
  for (double v : a.values) {
    switch (a.dtype) {
      case DType::kF32: PutLe(&out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
      case DType::kF64: PutLe(&out, std::bit_cast<std::uint64_t>(v)); break;
      case DType::kI32:
        PutLe(&out, std::bit_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
        break;
    }
  }
  return out;
}

std::vector<double> Decode(DType t, const unsigned char* p, std::int64_t count) {
  std::vector<double> out(static_cast<std::size_t>(count));
  for (std::int64_t k = 0; k < count; ++k) {
    switch (t) {
      case DType::kF32:
        out[k] = std::bit_cast<float>(GetLe<std::uint32_t>(p + 4 * k));
        break;
      case DType::kF64:
        out[k] = std::bit_cast<double>(GetLe<std::uint64_t>(p + 8 * k));
        break;
      case DType::kI32:
        out[k] = std::bit_cast<std::int32_t>(GetLe<std::uint32_t>(p + 4 * k));
        break;
    }
  }
  return out;
}

std::uint32_t Crc32(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

int MetaInt(const TensorBundle& b, const std::string& key) {
  try {
    return std::stoi(b.Meta(key));
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::kCorruptBundle, "metadata '" + key + "' is not an integer");
  }
}

void PutPointMap(TensorBundle* b, const std::string& name, const PointMap& pm) {
  b->Put(name, DType::kF32, {pm.height, pm.width, 3},
         std::vector<double>(pm.points.data(), pm.points.data() + pm.points.size()));
  b->Put("conf_" + name, DType::kF32, {pm.height, pm.width},
         std::vector<double>(pm.confidence.data(),
                             pm.confidence.data() + pm.confidence.size()));
}

PointMap GetPointMap(const TensorBundle& b, const std::string& name, ImageId frame) {
  const TensorArray& pts = b.Get(name);
  const TensorArray& conf = b.Get("conf_" + name);
  PMSFM_CHECK(pts.shape.size() == 3 && pts.shape[2] == 3 && conf.shape.size() == 2 &&
                  conf.shape[0] == pts.shape[0] && conf.shape[1] == pts.shape[1],
              ErrorKind::kShapeMismatch, "pointmap '" + name + "' has a bad shape");
  PointMap pm(static_cast<int>(pts.shape[1]), static_cast<int>(pts.shape[0]), frame);
  std::copy(pts.values.begin(), pts.values.end(), pm.points.data());
  std::copy(conf.values.begin(), conf.values.end(), pm.confidence.data());
  return pm;
}

void PutFeatures(TensorBundle* b, const std::string& name, const FeatureMap& fm) {
  b->Put(name, DType::kF32, {fm.height, fm.width, fm.dim()},
         std::vector<double>(fm.features.data(), fm.features.data() + fm.features.size()));
}

FeatureMap GetFeatures(const TensorBundle& b, const std::string& name) {
  const TensorArray& a = b.Get(name);
  PMSFM_CHECK(a.shape.size() == 3, ErrorKind::kShapeMismatch,
              "feature map '" + name + "' must be 3-D");
  FeatureMap fm(static_cast<int>(a.shape[1]), static_cast<int>(a.shape[0]),
                static_cast<int>(a.shape[2]));
  std::copy(a.values.begin(), a.values.end(), fm.features.data());
  return fm;
}

std::vector<std::string> SplitWords(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

int ParseInt(const std::string& s, int line_no) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw Error(ErrorKind::kParse,
                "line " + std::to_string(line_no) + ": expected integer, got '" + s + "'");
  return v;
}

std::string FormatFloat(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace

const char* DTypeName(DType t) {
  switch (t) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kI32: return "i32";
  }
  return "?";
}

int DTypeSize(DType t) { return t == DType::kF64 ? 8 : 4; }

std::int64_t TensorArray::count() const {
  std::int64_t c = 1;
  for (auto s : shape) c *= s;
  return c;
}

void TensorBundle::Put(std::string name, DType dtype, std::vector<std::int64_t> shape,
                       std::vector<double> values) {
  PMSFM_CHECK(!Has(name), ErrorKind::kInvalidArgument, "duplicate array '" + name + "'");
  TensorArray a{std::move(name), dtype, std::move(shape), std::move(values)};
  for (auto s : a.shape)
    PMSFM_CHECK(s >= 0, ErrorKind::kShapeMismatch, "negative extent in '" + a.name + "'");
  PMSFM_CHECK(a.count() == static_cast<std::int64_t>(a.values.size()),
              ErrorKind::kShapeMismatch, "shape of '" + a.name + "' disagrees with data");
  for (double& v : a.values) v = RoundTo(dtype, v);
  arrays_.push_back(std::move(a));
}

bool TensorBundle::Has(const std::string& name) const {
  return std::any_of(arrays_.begin(), arrays_.end(),
                     [&](const TensorArray& a) { return a.name == name; });
}

const TensorArray& TensorBundle::Get(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return a;
  throw Error(ErrorKind::kCorruptBundle, "bundle has no array '" + name + "'");
}

MatrixXd TensorBundle::GetMatrix(const std::string& name) const {
  const TensorArray& a = Get(name);
  const Eigen::Index rows = a.shape.empty() ? 1 : a.shape[0];
  const Eigen::Index cols = rows == 0 ? 0 : a.count() / rows;
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = a.values[r * cols + c];
  return m;
}

const std::string& TensorBundle::Meta(const std::string& key) const {
  auto it = meta.find(key);
  PMSFM_CHECK(it != meta.end(), ErrorKind::kCorruptBundle, "bundle has no metadata '" + key + "'");
  return it->second;
}

std::string SerializeBundle(const TensorBundle& bundle) {
  Json manifest;
  manifest["meta"] = bundle.meta;
  manifest["arrays"] = Json::array();
  std::string payload;
  for (const auto& a : bundle.arrays()) {
    const std::string blob = Encode(a);
    manifest["arrays"].push_back({{"name", a.name},
                                  {"dtype", DTypeName(a.dtype)},
                                  {"shape", a.shape},
                                  {"offset", payload.size()},
                                  {"bytes", blob.size()},
                                  {"crc32", Crc32(blob)}});
    payload += blob;
  }
  const std::string text = manifest.dump();
  return std::string(kBundleMagic) + " 1 " + std::to_string(text.size()) + "\n" + text + payload;
}

TensorBundle ParseBundle(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  PMSFM_CHECK(eol != std::string::npos && eol < 64, ErrorKind::kCorruptBundle,
              "missing bundle header");
  const auto head = SplitWords(bytes.substr(0, eol));
  PMSFM_CHECK(head.size() == 3 && head[0] == kBundleMagic && head[1] == "1",
              ErrorKind::kCorruptBundle, "not a version 1 tensor bundle");
  std::size_t manifest_len = 0;
  {
    const auto [ptr, ec] = std::from_chars(head[2].data(), head[2].data() + head[2].size(),
                                           manifest_len);
    PMSFM_CHECK(ec == std::errc() && ptr == head[2].data() + head[2].size(),
                ErrorKind::kCorruptBundle, "bad manifest length");
  }
  const std::size_t body = eol + 1;
  PMSFM_CHECK(body + manifest_len <= bytes.size(), ErrorKind::kCorruptBundle,
              "truncated manifest");
  Json manifest;
  try {
    manifest = Json::parse(bytes.substr(body, manifest_len));
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::kCorruptBundle, std::string("manifest: ") + e.what());
  }
  const std::size_t payload = body + manifest_len;

  TensorBundle out;
  try {
    out.meta = manifest.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& entry : manifest.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const DType dtype = ParseDType(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("bytes").get<std::size_t>();
      const auto crc = entry.at("crc32").get<std::uint32_t>();
      std::int64_t count = 1;
      for (auto s : shape) {
        PMSFM_CHECK(s >= 0, ErrorKind::kCorruptBundle, "negative extent in '" + name + "'");
        count *= s;
      }
      PMSFM_CHECK(static_cast<std::size_t>(count) * DTypeSize(dtype) == nbytes,
                  ErrorKind::kCorruptBundle, "byte length of '" + name + "' disagrees with shape");
      PMSFM_CHECK(payload + offset + nbytes <= bytes.size(), ErrorKind::kCorruptBundle,
                  "array '" + name + "' runs past end of file");
      const std::string blob = bytes.substr(payload + offset, nbytes);
      PMSFM_CHECK(Crc32(blob) == crc, ErrorKind::kCorruptBundle,
                  "checksum mismatch in '" + name + "'");
      out.Put(name, dtype, shape,
              Decode(dtype, reinterpret_cast<const unsigned char*>(blob.data()), count));
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::kCorruptBundle, std::string("manifest: ") + e.what());
  }
  return out;
}

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFile(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "short write to " + path.string());
}

void WriteBundle(const std::filesystem::path& path, const TensorBundle& bundle) {
  WriteFile(path, SerializeBundle(bundle));
}

TensorBundle ReadBundle(const std::filesystem::path& path) {
  return ParseBundle(ReadFile(path));
}

TensorBundle PairToBundle(const PairPrediction& pred) {
  TensorBundle b;
  b.meta["kind"] = "pair";
  b.meta["n"] = std::to_string(pred.n);
  b.meta["m"] = std::to_string(pred.m);
  PutPointMap(&b, "x_nn", pred.x_nn);
  PutPointMap(&b, "x_mn", pred.x_mn);
  PutPointMap(&b, "x_mm", pred.x_mm);
  PutPointMap(&b, "x_nm", pred.x_nm);
  if (pred.d_n.size() > 0) PutFeatures(&b, "d_n", pred.d_n);
  if (pred.d_m.size() > 0) PutFeatures(&b, "d_m", pred.d_m);
  const auto count = static_cast<std::int64_t>(pred.matches.pairs.size());
  std::vector<double> px, conf;
  for (const Match& mt : pred.matches.pairs) {
    px.insert(px.end(), {double(mt.a.i), double(mt.a.j), double(mt.b.i), double(mt.b.j)});
    conf.push_back(mt.confidence);
  }
  b.Put("matches", DType::kI32, {count, 4}, std::move(px));
  b.Put("match_conf", DType::kF32, {count}, std::move(conf));
  return b;
}

PairPrediction PairFromBundle(const TensorBundle& b) {
  PMSFM_CHECK(b.meta.contains("kind") && b.Meta("kind") == "pair", ErrorKind::kCorruptBundle,
              "not a pair bundle");
  PairPrediction p;
  p.n = MetaInt(b, "n");
  p.m = MetaInt(b, "m");
  p.x_nn = GetPointMap(b, "x_nn", p.n);
  p.x_mn = GetPointMap(b, "x_mn", p.n);
  p.x_mm = GetPointMap(b, "x_mm", p.m);
  p.x_nm = GetPointMap(b, "x_nm", p.m);
  if (b.Has("d_n")) p.d_n = GetFeatures(b, "d_n");
  if (b.Has("d_m")) p.d_m = GetFeatures(b, "d_m");
  p.matches.edge = {p.n, p.m};
  if (!b.Has("matches")) {
    // Dumps without matches: derive them from the features.
    PMSFM_CHECK(p.d_n.size() > 0 && p.d_m.size() > 0, ErrorKind::kCorruptBundle,
                "pair bundle has neither matches nor features");
    p.matches = FastReciprocalNN(p.d_n, p.d_m);
    p.matches.edge = {p.n, p.m};
    p.Validate();
    return p;
  }
  const TensorArray& px = b.Get("matches");
  const TensorArray& conf = b.Get("match_conf");
  PMSFM_CHECK(px.shape.size() == 2 && px.shape[1] == 4 && conf.shape.size() == 1 &&
                  conf.shape[0] == px.shape[0],
              ErrorKind::kShapeMismatch, "match arrays have bad shapes");
  for (std::int64_t k = 0; k < px.shape[0]; ++k) {
    const double* r = px.values.data() + 4 * k;
    p.matches.pairs.push_back({{int(r[0]), int(r[1])}, {int(r[2]), int(r[3])}, conf.values[k]});
  }
  p.Validate();
  return p;
}

TensorBundle ImageToBundle(const ImageInput& image) {
  TensorBundle b;
  b.meta["kind"] = "image";
  b.meta["id"] = std::to_string(image.id);
  PutFeatures(&b, "tokens", image.tokens);
  if (image.own) PutPointMap(&b, "own", *image.own);
  return b;
}

ImageInput ImageFromBundle(const TensorBundle& b) {
  PMSFM_CHECK(b.meta.contains("kind") && b.Meta("kind") == "image", ErrorKind::kCorruptBundle,
              "not an image bundle");
  ImageInput im;
  im.id = MetaInt(b, "id");
  im.tokens = GetFeatures(b, "tokens");
  im.tokens.Validate();
  if (b.Has("own")) im.own = GetPointMap(b, "own", im.id);
  return im;
}

TensorBundle RetrievalModelToBundle(const RetrievalModel& model) {
  TensorBundle b;
  b.meta["kind"] = "retrieval";
  b.PutMatrix("whitening_mean", DType::kF64, model.whitening.mean);
  b.PutMatrix("whitening_transform", DType::kF64, model.whitening.transform);
  b.PutMatrix("centroids", DType::kF64, model.codebook.centroids);
  return b;
}

RetrievalModel RetrievalModelFromBundle(const TensorBundle& b) {
  PMSFM_CHECK(b.meta.contains("kind") && b.Meta("kind") == "retrieval",
              ErrorKind::kCorruptBundle, "not a retrieval bundle");
  RetrievalModel m;
  m.whitening.mean = b.GetMatrix("whitening_mean").col(0);
  m.whitening.transform = b.GetMatrix("whitening_transform");
  m.codebook.centroids = b.GetMatrix("centroids");
  PMSFM_CHECK(m.whitening.transform.rows() == m.whitening.dim() &&
                  m.whitening.transform.cols() == m.whitening.dim() &&
                  m.codebook.dim() == m.whitening.dim(),
              ErrorKind::kShapeMismatch, "retrieval model dimensions disagree");
  return m;
}

std::string FormatDouble(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

double ParseDouble(const std::string& s) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw Error(ErrorKind::kParse, "expected number, got '" + s + "'");
  return v;
}

std::string FormatTrajectory(const Trajectory& traj) {
  std::string out = "# id qw qx qy qz tx ty tz\n";
  for (const auto& e : traj) {
    out += std::to_string(e.id);
    if (!e.pose) {
      out += " unregistered\n";
      continue;
    }
    for (int k = 0; k < 4; ++k) out += " " + FormatDouble(e.pose->q(k));
    for (int k = 0; k < 3; ++k) out += " " + FormatDouble(e.pose->t(k));
    out += "\n";
  }
  return out;
}

Trajectory ParseTrajectory(const std::string& text) {
  Trajectory out;
  std::istringstream is(text);
  int line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    const auto w = SplitWords(line);
    if (w.empty() || w[0][0] == '#') continue;
    TrajectoryEntry e;
    e.id = ParseInt(w[0], line_no);
    if (w.size() == 2 && w[1] == "unregistered") {
      out.push_back(e);
      continue;
    }
    if (w.size() != 8)
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) +
                                         ": expected 8 fields, got " + std::to_string(w.size()));
    Pose p;
    try {
      for (int k = 0; k < 4; ++k) p.q(k) = ParseDouble(w[1 + k]);
      for (int k = 0; k < 3; ++k) p.t(k) = ParseDouble(w[5 + k]);
    } catch (const Error& err) {
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": " + err.what());
    }
    if (!(p.q.norm() > 0))
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": zero quaternion");
    e.pose = p;
    out.push_back(e);
  }
  return out;
}

void WriteTrajectory(const std::filesystem::path& path, const Trajectory& traj) {
  WriteFile(path, FormatTrajectory(traj));
}

Trajectory ReadTrajectory(const std::filesystem::path& path) {
  return ParseTrajectory(ReadFile(path));
}

std::string FormatGraph(const SceneGraph& graph, const KinematicTree* tree) {
  std::string out = "nodes " + std::to_string(graph.n) + "\n";
  for (ImageId k : graph.keyframes) out += "keyframe " + std::to_string(k) + "\n";
  for (const auto& [a, b] : graph.edges)
    out += "edge " + std::to_string(a) + " " + std::to_string(b) + "\n";
  if (graph.repair_edges) out += "repairs " + std::to_string(graph.repair_edges) + "\n";
  if (tree) {
    out += std::string("tree_mode ") + TreeModeName(tree->mode) + "\n";
    out += "root " + std::to_string(tree->root) + "\n";
    for (int c = 0; c < tree->size(); ++c)
      if (tree->links[c].parent >= 0)
        out += "tree " + std::to_string(c) + " " + std::to_string(tree->links[c].parent) + "\n";
  }
  return out;
}

GraphFile ParseGraph(const std::string& text) {
  GraphFile out;
  std::istringstream is(text);
  int line_no = 0;
  bool have_nodes = false;
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": " + msg);
  };
  auto need = [&](const std::vector<std::string>& w, std::size_t n) {
    if (w.size() != n) fail("expected " + std::to_string(n - 1) + " values after '" + w[0] + "'");
  };
  auto node = [&](const std::string& s) {
    const int v = ParseInt(s, line_no);
    if (!have_nodes) fail("'nodes' must come first");
    if (v < 0 || v >= out.graph.n) fail("node " + s + " out of range");
    return v;
  };
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    const auto w = SplitWords(line);
    if (w.empty() || w[0][0] == '#') continue;
    if (w[0] == "nodes") {
      need(w, 2);
      out.graph.n = ParseInt(w[1], line_no);
      if (out.graph.n < 0) fail("negative node count");
      have_nodes = true;
    } else if (w[0] == "keyframe") {
      need(w, 2);
      out.graph.keyframes.push_back(node(w[1]));
    } else if (w[0] == "edge") {
      need(w, 3);
      const int a = node(w[1]), b = node(w[2]);
      if (a == b) fail("self edge");
      out.graph.edges.emplace_back(std::min(a, b), std::max(a, b));
    } else if (w[0] == "repairs") {
      need(w, 2);
      out.graph.repair_edges = ParseInt(w[1], line_no);
    } else if (w[0] == "tree_mode" || w[0] == "root" || w[0] == "tree") {
      if (!out.tree) {
        out.tree.emplace();
        out.tree->links.assign(out.graph.n, TreeLink{});
      }
      if (w[0] == "tree_mode") {
        need(w, 2);
        try {
          out.tree->mode = ParseTreeMode(w[1]);
        } catch (const Error& e) {
          fail(e.what());
        }
      } else if (w[0] == "root") {
        need(w, 2);
        out.tree->root = node(w[1]);
      } else {
        need(w, 3);
        out.tree->links[node(w[1])].parent = node(w[2]);
      }
    } else {
      fail("unknown record '" + w[0] + "'");
    }
  }
  std::sort(out.graph.edges.begin(), out.graph.edges.end());
  out.graph.edges.erase(std::unique(out.graph.edges.begin(), out.graph.edges.end()),
                        out.graph.edges.end());
  if (out.tree) out.tree->Validate();
  return out;
}

PlyCloud MakeCloud(const PointRows& points, const VectorXd& confidence) {
  PMSFM_CHECK(confidence.size() == points.rows(), ErrorKind::kShapeMismatch,
              "one confidence per point required");
  PlyCloud c;
  c.points = points;
  const double top = confidence.size() ? confidence.maxCoeff() : 0.0;
  for (Eigen::Index k = 0; k < confidence.size(); ++k) {
    const double g = top > 0 ? std::clamp(confidence(k) / top, 0.0, 1.0) : 0.0;
    c.gray.push_back(static_cast<std::uint8_t>(std::lround(255.0 * g)));
  }
  return c;
}

std::string FormatPly(const PlyCloud& cloud, bool binary) {
  PMSFM_CHECK(cloud.gray.size() == static_cast<std::size_t>(cloud.points.rows()),
              ErrorKind::kShapeMismatch, "one gray value per point required");
  std::string out = "ply\n";
  out += binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  out += "element vertex " + std::to_string(cloud.points.rows()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out += "end_header\n";
  for (Eigen::Index k = 0; k < cloud.points.rows(); ++k) {
    const std::uint8_t g = cloud.gray[k];
    if (binary) {
      for (int a = 0; a < 3; ++a)
        PutLe(&out, std::bit_cast<std::uint32_t>(static_cast<float>(cloud.points(k, a))));
      out.append(3, static_cast<char>(g));
    } else {
      for (int a = 0; a < 3; ++a) out += FormatFloat(static_cast<float>(cloud.points(k, a))) + " ";
      const std::string gs = std::to_string(g);
      out += gs + " " + gs + " " + gs + "\n";
    }
  }
  return out;
}

PlyHeader ParsePlyHeader(const std::string& bytes, std::size_t* body_offset) {
  PlyHeader h;
  std::size_t pos = 0;
  int line_no = 0;
  bool saw_format = false;
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorKind::kParse, "ply line " + std::to_string(line_no) + ": " + msg);
  };
  while (true) {
    const auto eol = bytes.find('\n', pos);
    ++line_no;
    if (eol == std::string::npos) fail("missing end_header");
    const auto w = SplitWords(bytes.substr(pos, eol - pos));
    pos = eol + 1;
    if (line_no == 1) {
      if (w.size() != 1 || w[0] != "ply") fail("missing 'ply' magic");
      continue;
    }
    if (w.empty() || w[0] == "comment") continue;
    if (w[0] == "end_header") break;
    if (w[0] == "format") {
      if (w.size() != 3 || w[2] != "1.0") fail("bad format line");
      if (w[1] == "ascii")
        h.binary = false;
      else if (w[1] == "binary_little_endian")
        h.binary = true;
      else
        fail("unsupported format '" + w[1] + "'");
      saw_format = true;
    } else if (w[0] == "element") {
      if (w.size() != 3 || w[1] != "vertex") fail("only vertex elements are supported");
      h.vertex_count = ParseInt(w[2], line_no);
    } else if (w[0] == "property") {
      if (w.size() != 3) fail("bad property line");
      h.properties.push_back(w[1] + " " + w[2]);
    } else {
      fail("unknown header line '" + w[0] + "'");
    }
  }
  if (!saw_format) fail("missing format line");
  if (body_offset) *body_offset = pos;
  return h;
}

PlyCloud ParsePly(const std::string& bytes) {
  std::size_t pos = 0;
  const PlyHeader h = ParsePlyHeader(bytes, &pos);
  const std::vector<std::string> expected = {"float x", "float y", "float z",
                                             "uchar red", "uchar green", "uchar blue"};
  PMSFM_CHECK(h.properties == expected, ErrorKind::kParse, "unsupported vertex layout");
  PlyCloud c;
  c.points.resize(h.vertex_count, 3);
  c.gray.resize(static_cast<std::size_t>(h.vertex_count));
  if (h.binary) {
    PMSFM_CHECK(pos + 15 * static_cast<std::size_t>(h.vertex_count) <= bytes.size(),
                ErrorKind::kParse, "truncated binary ply");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (std::int64_t k = 0; k < h.vertex_count; ++k, p += 15) {
      for (int a = 0; a < 3; ++a) c.points(k, a) = std::bit_cast<float>(GetLe<std::uint32_t>(p + 4 * a));
      c.gray[k] = p[12];
    }
  } else {
    std::istringstream is(bytes.substr(pos));
    for (std::int64_t k = 0; k < h.vertex_count; ++k) {
      float x, y, z;
      int r, g, b;
      if (!(is >> x >> y >> z >> r >> g >> b))
        throw Error(ErrorKind::kParse, "vertex " + std::to_string(k) + " unreadable");
      c.points.row(k) << x, y, z;
      c.gray[k] = static_cast<std::uint8_t>(r);
    }
  }
  return c;
}

}  // namespace pmsfm
