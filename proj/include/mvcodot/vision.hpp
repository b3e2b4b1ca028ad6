#pragma once

// Region-level feature extraction per view and the per-view latent
// projections with additive fusion.

#include "mvcodot/autograd.hpp"
#include "mvcodot/data.hpp"
#include "mvcodot/errors.hpp"
#include "mvcodot/nn.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mvcodot::vision {

using ag::Var;
using data::Image;
using data::ViewTag;

struct ViewFeatureMap {
  Matrix regions;  // R x D
  ViewTag view_tag = ViewTag::frontal;
};

struct ViewEmbedding {
  Var regions;  // (B*R) x d
  ViewTag view_tag = ViewTag::frontal;
};

struct FusedEmbedding {
  Var regions;  // (B*R) x d
};

// Pluggable source of region features. Implementations must be
// deterministic and free of hidden mutable state.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual ViewFeatureMap extract(const Image& image, ViewTag view, const std::string& case_id) const = 0;
  virtual Eigen::Index regions() const = 0;
  virtual Eigen::Index feature_dim() const = 0;
};

struct ConvExtractorOptions {
  int channels = 1;
  int image_size = 16;
  int grid = 4;
  int hidden_channels = 16;
  int feature_dim = 32;
  std::uint64_t seed = 1234;
};

// Frozen two-layer strided convolutional stack (3x3, stride 2, ReLU) with
// two appended coordinate channels, average-pooled into a grid x grid map.
// Weights are drawn once from a fixed seed and never trained.
class ConvFeatureExtractor final : public FeatureExtractor {
 public:
  explicit ConvFeatureExtractor(ConvExtractorOptions opt) : opt_(opt) {
    if (opt.image_size % 4 != 0 || (opt.image_size / 4) % opt.grid != 0) {
      throw std::invalid_argument("ConvFeatureExtractor: image_size/4 must be a multiple of grid");
    }
    std::mt19937_64 rng(opt.seed);
    const int in1 = opt.channels + 2;
    w1_ = nn::normal_matrix(opt.hidden_channels, in1 * 9, std::sqrt(2.0 / (in1 * 9)), rng);
    b1_ = nn::normal_matrix(opt.hidden_channels, 1, 0.05, rng);
    w2_ = nn::normal_matrix(opt.feature_dim, opt.hidden_channels * 9, std::sqrt(2.0 / (opt.hidden_channels * 9)), rng);
    b2_ = nn::normal_matrix(opt.feature_dim, 1, 0.05, rng);
  }

  ViewFeatureMap extract(const Image& image, ViewTag view, const std::string& = {}) const override {
    if (image.channels != opt_.channels || image.height != opt_.image_size || image.width != opt_.image_size) {
      throw DataError("extract_features: expected image " + std::to_string(opt_.channels) + "x" +
                      std::to_string(opt_.image_size) + "x" + std::to_string(opt_.image_size) + ", got " +
                      std::to_string(image.channels) + "x" + std::to_string(image.height) + "x" +
                      std::to_string(image.width));
    }
    const int s = opt_.image_size;
    Image in(opt_.channels + 2, s, s);
    for (int c = 0; c < opt_.channels; ++c)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) in.at(c, y, x) = image.at(c, y, x);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        in.at(opt_.channels, y, x) = 2.0 * y / (s - 1) - 1.0;
        in.at(opt_.channels + 1, y, x) = 2.0 * x / (s - 1) - 1.0;
      }
    }
    Image h1 = conv_stride2_relu(in, w1_, b1_);
    Image h2 = conv_stride2_relu(h1, w2_, b2_);
    const int cell = h2.height / opt_.grid;
    ViewFeatureMap out;
    out.view_tag = view;
    out.regions = Matrix::Zero(opt_.grid * opt_.grid, opt_.feature_dim);
    for (int gy = 0; gy < opt_.grid; ++gy) {
      for (int gx = 0; gx < opt_.grid; ++gx) {
        for (int c = 0; c < opt_.feature_dim; ++c) {
          double acc = 0.0;
          for (int y = 0; y < cell; ++y)
            for (int x = 0; x < cell; ++x) acc += h2.at(c, gy * cell + y, gx * cell + x);
          out.regions(gy * opt_.grid + gx, c) = acc / (cell * cell);
        }
      }
    }
    return out;
  }

  Eigen::Index regions() const override { return opt_.grid * opt_.grid; }
  Eigen::Index feature_dim() const override { return opt_.feature_dim; }

 private:
  static Image conv_stride2_relu(const Image& in, const Matrix& w, const Matrix& b) {
    const int oh = in.height / 2;
    const int ow = in.width / 2;
    const int oc = static_cast<int>(w.rows());
    Image out(oc, oh, ow);
    Vector patch(in.channels * 9);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        int k = 0;
        for (int c = 0; c < in.channels; ++c) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int sy = 2 * y + dy;
              const int sx = 2 * x + dx;
              const bool inside = sy >= 0 && sy < in.height && sx >= 0 && sx < in.width;
              patch(k++) = inside ? in.at(c, sy, sx) : 0.0;
            }
          }
        }
        Vector r = w * patch + b;
        for (int c = 0; c < oc; ++c) out.at(c, y, x) = std::max(0.0, r(c));
      }
    }
    return out;
  }

  ConvExtractorOptions opt_;
  Matrix w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Precomputed feature archive.
//
// Binary layout (native little-endian):
//   magic "MVFEAT01" | u64 entry count | entries...
//   entry: u32 key length | key bytes ("<case_id>/<view>") | u64 rows |
//          u64 cols | rows*cols f64 values, row-major

inline std::string feature_key(const std::string& case_id, ViewTag view) {
  return case_id + "/" + data::to_string(view);
}

class FeatureArchive {
 public:
  void put(const std::string& case_id, ViewTag view, Matrix regions) {
    entries_[feature_key(case_id, view)] = std::move(regions);
  }

  const Matrix& get(const std::string& case_id, ViewTag view) const {
    auto it = entries_.find(feature_key(case_id, view));
    if (it == entries_.end()) throw DataError("feature archive has no entry " + feature_key(case_id, view));
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Matrix>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write feature archive " + path.string());
    out.write("MVFEAT01", 8);
    write_pod(out, static_cast<std::uint64_t>(entries_.size()));
    for (const auto& [key, m] : entries_) {
      write_pod(out, static_cast<std::uint32_t>(key.size()));
      out.write(key.data(), static_cast<std::streamsize>(key.size()));
      write_pod(out, static_cast<std::uint64_t>(m.rows()));
      write_pod(out, static_cast<std::uint64_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) write_pod(out, m(i, j));
    }
  }

  static FeatureArchive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open feature archive " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "MVFEAT01", 8) != 0) throw DataError("not a feature archive: " + path.string());
    FeatureArchive a;
    const auto n = read_pod<std::uint64_t>(in, path);
    for (std::uint64_t e = 0; e < n; ++e) {
      const auto len = read_pod<std::uint32_t>(in, path);
      std::string key(len, '\0');
      in.read(key.data(), len);
      const auto rows = read_pod<std::uint64_t>(in, path);
      const auto cols = read_pod<std::uint64_t>(in, path);
      if (rows > (1u << 24) || cols > (1u << 24)) throw DataError("corrupt feature archive " + path.string());
      Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = read_pod<double>(in, path);
      a.entries_[key] = std::move(m);
    }
    return a;
  }

 private:
  template <typename T>
  static void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <typename T>
  static T read_pod(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("truncated feature archive " + path.string());
    return v;
  }

  std::map<std::string, Matrix> entries_;
};

// Extractor backed by an archive; images are ignored.
class PrecomputedFeatureExtractor final : public FeatureExtractor {
 public:
  explicit PrecomputedFeatureExtractor(FeatureArchive archive) : archive_(std::move(archive)) {
    if (archive_.size() == 0) throw DataError("empty feature archive");
    const Matrix& first = archive_.entries().begin()->second;
    regions_ = first.rows();
    dim_ = first.cols();
  }

  ViewFeatureMap extract(const Image&, ViewTag view, const std::string& case_id) const override {
    return {archive_.get(case_id, view), view};
  }
  Eigen::Index regions() const override { return regions_; }
  Eigen::Index feature_dim() const override { return dim_; }

 private:
  FeatureArchive archive_;
  Eigen::Index regions_ = 0;
  Eigen::Index dim_ = 0;
};

// ---------------------------------------------------------------------------
// Per-view projections phi_f / phi_l: stacked affine + ELU layers with
// separate parameters per view.

class ViewProjection {
 public:
  ViewProjection() = default;
  ViewProjection(nn::ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, int depth,
                 std::mt19937_64& rng) {
    if (depth < 1) throw std::invalid_argument("ViewProjection: depth must be >= 1");
    for (int i = 0; i < depth; ++i) {
      layers_.emplace_back(store, name + ".l" + std::to_string(i), i == 0 ? in : out, out, rng);
    }
  }

  Var operator()(const Var& x) const {
    Var h = x;
    for (const auto& l : layers_) h = ag::elu(l(h));
    return h;
  }

  const std::vector<nn::Linear>& layers() const { return layers_; }

 private:
  std::vector<nn::Linear> layers_;
};

struct ViewProjections {
  ViewProjection frontal;
  ViewProjection lateral;

  ViewEmbedding project(const Var& features, ViewTag tag) const {
    switch (tag) {
      case ViewTag::frontal:
        return {frontal(features), tag};
      case ViewTag::lateral:
        return {lateral(features), tag};
    }
    throw std::invalid_argument("project_view: unknown view tag");
  }
};

inline FusedEmbedding fuse_views(const ViewEmbedding& a, const ViewEmbedding& b) {
  if (a.regions.rows() != b.regions.rows() || a.regions.cols() != b.regions.cols()) {
    throw std::invalid_argument("fuse_views: view embeddings differ in shape");
  }
  return {ag::add(a.regions, b.regions)};
}

}  // namespace mvcodot::vision
