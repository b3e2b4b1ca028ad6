#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace mvcodot;
using namespace mvcodot::vision;
using ag::Var;
using test::gradcheck;
using test::random_matrix;

namespace {

data::Image sample_image(int seed) {
  data::SynthOptions o;
  o.n_cases = 10;
  o.seed = static_cast<std::uint64_t>(seed);
  return data::generate_synthetic_dataset(o).front().frontal;
}

}  // namespace

TEST(Vision, ConvExtractorShapeAndDeterminism) {
  ConvExtractorOptions o;
  ConvFeatureExtractor a(o), b(o);
  const data::Image img = sample_image(1);
  const auto fa = a.extract(img, ViewTag::frontal);
  EXPECT_EQ(fa.regions.rows(), 16);
  EXPECT_EQ(fa.regions.cols(), 32);
  EXPECT_EQ(a.regions(), 16);
  EXPECT_TRUE(fa.regions == b.extract(img, ViewTag::frontal).regions);
  EXPECT_FALSE(fa.regions == a.extract(sample_image(2), ViewTag::frontal).regions);
}

TEST(Vision, CoordinateChannelsMakeRegionsDistinct) {
  ConvFeatureExtractor a({});
  data::Image blank(1, 16, 16);
  const Matrix r = a.extract(blank, ViewTag::frontal).regions;
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    for (Eigen::Index j = i + 1; j < r.rows(); ++j) EXPECT_GT((r.row(i) - r.row(j)).norm(), 1e-9);
}

TEST(Vision, ExtractorRejectsWrongImageShape) {
  ConvFeatureExtractor a({});
  EXPECT_THROW(a.extract(data::Image(1, 8, 8), ViewTag::frontal), DataError);
  ConvExtractorOptions bad;
  bad.grid = 3;
  EXPECT_THROW(ConvFeatureExtractor{bad}, std::invalid_argument);
}

TEST(Vision, FeatureArchiveRoundTrip) {
  std::mt19937_64 rng(3);
  FeatureArchive a;
  a.put("c1", ViewTag::frontal, random_matrix(4, 3, rng));
  a.put("c1", ViewTag::lateral, random_matrix(4, 3, rng));
  const auto path = std::filesystem::temp_directory_path() / "mvcodot_test_features.bin";
  a.save(path);
  PrecomputedFeatureExtractor ex(FeatureArchive::load(path));
  EXPECT_EQ(ex.regions(), 4);
  EXPECT_EQ(ex.feature_dim(), 3);
  EXPECT_TRUE(ex.extract({}, ViewTag::lateral, "c1").regions == a.get("c1", ViewTag::lateral));
  EXPECT_THROW(ex.extract({}, ViewTag::frontal, "c2"), DataError);
  EXPECT_THROW(FeatureArchive::load(path.string() + ".missing"), DataError);
}

TEST(Vision, ViewsHaveSeparateProjections) {
  std::mt19937_64 rng(4);
  nn::ParameterStore store;
  ViewProjections p{ViewProjection(store, "f", 5, 4, 2, rng), ViewProjection(store, "l", 5, 4, 2, rng)};
  Var x = Var::constant(random_matrix(3, 5, rng));
  EXPECT_FALSE(p.project(x, ViewTag::frontal).regions.value() == p.project(x, ViewTag::lateral).regions.value());
  EXPECT_EQ(store.all().size(), 8u);
}

TEST(Vision, FusionIsElementwiseSum) {
  std::mt19937_64 rng(5);
  Var a = Var::constant(random_matrix(4, 3, rng)), b = Var::constant(random_matrix(4, 3, rng));
  const Matrix f = fuse_views({a, ViewTag::frontal}, {b, ViewTag::lateral}).regions.value();
  EXPECT_TRUE(f == a.value() + b.value());
  EXPECT_THROW(fuse_views({a, ViewTag::frontal}, {Var::constant(Matrix::Zero(2, 3)), ViewTag::lateral}), std::invalid_argument);
}

TEST(Vision, ProjectionAndFusionGradients) {
  std::mt19937_64 rng(6);
  nn::ParameterStore store;
  ViewProjections p{ViewProjection(store, "f", 5, 4, 2, rng), ViewProjection(store, "l", 5, 4, 1, rng)};
  Var xf = Var::parameter(random_matrix(3, 5, rng)), xl = Var::parameter(random_matrix(3, 5, rng));
  const Matrix w = random_matrix(3, 4, rng);
  auto f = [&] {
    auto fused = fuse_views(p.project(xf, ViewTag::frontal), p.project(xl, ViewTag::lateral));
    return ag::sum(ag::mul_const(fused.regions, w));
  };
  auto params = test::all_params(store);
  params.push_back(xf);
  params.push_back(xl);
  EXPECT_LT(gradcheck(f, params).max_rel, 1e-6);
}
