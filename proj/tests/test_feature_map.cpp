#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "lmreloc/feature_map.hpp"
#include "lmreloc/random.hpp"

using namespace lmreloc;

namespace {

FeatureMap random_map(Rng& rng, int h, int w, int d) {
  FeatureMap m(h, w, d);
  for (double& v : m.data()) v = uniform(rng, -1, 1);
  return m;
}

FeaturePyramid random_pyramid(Rng& rng, int h, int w, int d) {
  FeaturePyramid p;
  for (int l = 1; l <= kPyramidLevels; ++l) {
    const int s = 1 << (4 - l);
    p.level(l) = random_map(rng, h / s, w / s, d);
    p.level(l).quantize_to_float();
  }
  return p;
}

}  // namespace

TEST(FeatureMap, ConstructionAndIndexing) {
  FeatureMap m(3, 4, 2, 0.5);
  EXPECT_EQ(m.size(), 24u);
  m.at(2, 3, 1) = 7.0;
  EXPECT_EQ(m.data().back(), 7.0);
  EXPECT_EQ(m.index(1, 2, 1), (1u * 4 + 2) * 2 + 1);
  EXPECT_THROW(FeatureMap(0, 4, 1), InvalidArgumentError);
}

TEST(FeatureMap, BilinearReproducesAffineFieldExactly) {
  // Bilinear interpolation is exact for a*u + b*v + c.
  FeatureMap m(10, 12, 1);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 12; ++c) m.at(r, c) = 0.5 * c - 2.0 * r + 3.0;
  const FeatureSample s = bilinear_sample(m, Vec2(4.3, 6.7));
  EXPECT_NEAR(s.value(0), 0.5 * 4.3 - 2.0 * 6.7 + 3.0, 1e-12);
  EXPECT_NEAR(s.grad(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(s.grad(0, 1), -2.0, 1e-12);
}

TEST(FeatureMap, BilinearHitsGridValuesAndWeights) {
  Rng rng(1);
  const FeatureMap m = random_map(rng, 8, 8, 3);
  const FeatureSample at_node = bilinear_sample(m, Vec2(3, 5));
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(at_node.value(c), m.at(5, 3, c));
  const double a = 0.25, b = 0.6;
  const FeatureSample s = bilinear_sample(m, Vec2(2 + a, 4 + b));
  for (int c = 0; c < 3; ++c) {
    const double expected = (1 - a) * (1 - b) * m.at(4, 2, c) + a * (1 - b) * m.at(4, 3, c) +
                            (1 - a) * b * m.at(5, 2, c) + a * b * m.at(5, 3, c);
    EXPECT_NEAR(s.value(c), expected, 1e-14);
  }
}

TEST(FeatureMap, BilinearDerivativeMatchesFiniteDifferenceInsideCell) {
  Rng rng(2);
  const FeatureMap m = random_map(rng, 9, 9, 2);
  const Vec2 q(3.4, 5.3);
  const FeatureSample s = bilinear_sample(m, q);
  const double h = 1e-6;
  for (int axis = 0; axis < 2; ++axis) {
    Vec2 e = Vec2::Zero();
    e(axis) = h;
    const Eigen::VectorXd fd =
        (bilinear_sample(m, q + e).value - bilinear_sample(m, q - e).value) / (2 * h);
    EXPECT_LT((fd - s.grad.col(axis)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(FeatureMap, BilinearBounds) {
  FeatureMap m(8, 10, 1);
  EXPECT_NO_THROW((void)bilinear_sample(m, Vec2(1.0, 1.0)));
  EXPECT_NO_THROW((void)bilinear_sample(m, Vec2(8.0, 6.0)));
  EXPECT_THROW((void)bilinear_sample(m, Vec2(0.99, 3.0)), OutOfBoundsError);
  EXPECT_THROW((void)bilinear_sample(m, Vec2(8.01, 3.0)), OutOfBoundsError);
  EXPECT_THROW((void)bilinear_sample(m, Vec2(3.0, 6.5)), OutOfBoundsError);
}

TEST(FeatureMap, DownsampleAreaAverages) {
  FeatureMap m(2, 4, 1);
  const double v[] = {1, 2, 3, 4, 5, 6, 7, 8};
  for (int i = 0; i < 8; ++i) m.data()[i] = v[i];
  const FeatureMap d = downsample_area(m);
  ASSERT_EQ(d.width(), 2);
  ASSERT_EQ(d.height(), 1);
  EXPECT_DOUBLE_EQ(d.at(0, 0), (1 + 2 + 5 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(d.at(0, 1), (3 + 4 + 7 + 8) / 4.0);
}

TEST(FeatureMap, ReflectPadding) {
  FeatureMap m(3, 5, 1);
  for (int c = 0; c < 5; ++c)
    for (int r = 0; r < 3; ++r) m.at(r, c) = 10 * r + c;
  const FeatureMap p = pad_reflect_to_multiple_of_8(m);
  ASSERT_EQ(p.width(), 8);
  ASSERT_EQ(p.height(), 8);
  // Columns 5, 6, 7 mirror 3, 2, 1; rows 3, 4 mirror 1, 0.
  EXPECT_EQ(p.at(0, 5), m.at(0, 3));
  EXPECT_EQ(p.at(0, 7), m.at(0, 1));
  EXPECT_EQ(p.at(3, 0), m.at(1, 0));
  EXPECT_EQ(p.at(4, 2), m.at(0, 2));
}

TEST(FeatureMap, PyramidContract) {
  Rng rng(3);
  FeaturePyramid p = random_pyramid(rng, 16, 24, 2);
  EXPECT_EQ(pyramid_contract_violation(p), "");
  p.level(2) = FeatureMap(5, 6, 2);
  EXPECT_NE(pyramid_contract_violation(p), "");
  FeaturePyramid q = random_pyramid(rng, 16, 24, 2);
  q.level(1) = FeatureMap(2, 3, 3);
  EXPECT_NE(pyramid_contract_violation(q), "");
}

TEST(FeatureMap, BaselinePyramidShapesAndNormalization) {
  Rng rng(4);
  const FeatureMap img = random_map(rng, 60, 44, 1);
  const BaselinePyramid bp = build_baseline_pyramid(img, {});
  EXPECT_EQ(pyramid_contract_violation(bp.pyramid), "");
  EXPECT_EQ(bp.pyramid.level(4).width(), 48);
  EXPECT_EQ(bp.pyramid.level(4).height(), 64);
  EXPECT_EQ(bp.pyramid.level(1).width(), 6);
  EXPECT_EQ(bp.pyramid.channels(), 2);
  for (int l = 1; l <= 4; ++l) {
    for (int ch = 0; ch < 2; ++ch) {
      double mean, sd;
      detail::channel_stats(bp.pyramid.level(l), ch, mean, sd);
      EXPECT_NEAR(mean, 0.0, 1e-12);
      EXPECT_NEAR(sd, 1.0, 1e-12);
    }
  }
  EXPECT_THROW((void)build_baseline_pyramid(FeatureMap(4, 4, 1), {}), InvalidArgumentError);
  EXPECT_THROW((void)build_baseline_pyramid(FeatureMap(8, 8, 2), {}), InvalidArgumentError);
}

TEST(FeatureMap, SharedStatisticsKeepOneScale) {
  Rng rng(5);
  const FeatureMap img = random_map(rng, 32, 32, 1);
  const BaselinePyramid a = build_baseline_pyramid(img, {});
  const BaselinePyramid b = build_baseline_pyramid(img, {}, &a.stats);
  EXPECT_EQ(a.pyramid, b.pyramid);
}

TEST(Fmap, RoundTripIsBitExact) {
  Rng rng(6);
  const FeaturePyramid p = random_pyramid(rng, 16, 24, 3);
  const std::string bytes = encode_fmap(p);
  const std::size_t floats = 3 * (2 * 3 + 4 * 6 + 8 * 12 + 16 * 24);
  EXPECT_EQ(bytes.size(), 12 + 4 * 12 + 4 * floats);
  EXPECT_EQ(decode_fmap(bytes), p);
}

TEST(Fmap, FileRoundTrip) {
  Rng rng(7);
  const FeaturePyramid p = random_pyramid(rng, 8, 16, 1);
  const auto path = std::filesystem::temp_directory_path() / "lmreloc_fmap_roundtrip.fmap";
  save_feature_pyramid(path.string(), p);
  EXPECT_EQ(load_feature_pyramid(path.string()), p);
  std::filesystem::remove(path);
  EXPECT_THROW((void)load_feature_pyramid(path.string()), Error);
}

TEST(Fmap, RejectsTruncatedFiles) {
  Rng rng(8);
  const std::string bytes = encode_fmap(random_pyramid(rng, 8, 8, 2));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{11}, std::size_t{20},
                          bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW((void)decode_fmap(bytes.substr(0, cut)), FormatError) << cut;
  }
}

TEST(Fmap, RejectsCorruptHeaders) {
  Rng rng(9);
  const std::string good = encode_fmap(random_pyramid(rng, 8, 8, 1));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)decode_fmap(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW((void)decode_fmap(bad_version), FormatError);
  std::string bad_levels = good;
  bad_levels[8] = 3;
  EXPECT_THROW((void)decode_fmap(bad_levels), FormatError);
  EXPECT_THROW((void)decode_fmap(good + "x"), FormatError);
}

TEST(Fmap, RejectsNonFiniteValues) {
  Rng rng(10);
  FeaturePyramid p = random_pyramid(rng, 8, 8, 1);
  std::string bytes = encode_fmap(p);
  const float inf = std::numeric_limits<float>::infinity();
  const auto bits = std::bit_cast<std::uint32_t>(inf);
  for (int i = 0; i < 4; ++i) bytes[24 + i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  EXPECT_THROW((void)decode_fmap(bytes), FormatError);
}

TEST(Fmap, EnforcesDivisibleByEightContract) {
  FeaturePyramid p;
  p.level(4) = FeatureMap(12, 16, 1);
  p.level(3) = FeatureMap(6, 8, 1);
  p.level(2) = FeatureMap(3, 4, 1);
  p.level(1) = FeatureMap(1, 2, 1);
  EXPECT_THROW((void)encode_fmap(p), FormatError);

  // Same violation arriving through a hand-assembled file.
  std::string bytes = "FMAP";
  detail::put_u32(bytes, 1);
  detail::put_u32(bytes, 4);
  for (const FeatureMap& m : p.levels) {
    detail::put_u32(bytes, static_cast<std::uint32_t>(m.height()));
    detail::put_u32(bytes, static_cast<std::uint32_t>(m.width()));
    detail::put_u32(bytes, 1);
    for (std::size_t k = 0; k < m.size(); ++k) detail::put_u32(bytes, 0);
  }
  EXPECT_THROW((void)decode_fmap(bytes), FormatError);
}
