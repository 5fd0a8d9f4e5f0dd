#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lmreloc/geometry.hpp"
#include "lmreloc/random.hpp"

using namespace lmreloc;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Independent rotation oracle: Eigen's angle-axis conversion.
Mat3 angle_axis(const Vec3& w) {
  const double theta = w.norm();
  if (theta == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

TangentVec random_twist(Rng& rng, double trans, double rot) {
  TangentVec xi;
  for (int k = 0; k < 3; ++k) xi(k) = uniform(rng, -trans, trans);
  for (int k = 3; k < 6; ++k) xi(k) = uniform(rng, -rot, rot);
  return xi;
}

}  // namespace

TEST(Geometry, SkewVeeRoundTrip) {
  const Vec3 v(0.3, -1.2, 2.5);
  EXPECT_TRUE(vee(skew(v)).isApprox(v));
  const Vec3 x(-0.7, 0.1, 4.0);
  EXPECT_TRUE((skew(v) * x).isApprox(v.cross(x)));
}

TEST(Geometry, So3ExpMatchesAngleAxis) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Vec3 w(uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3));
    EXPECT_LT((so3_exp(w) - angle_axis(w)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Geometry, So3ExpSmallAngleBranch) {
  const Vec3 w(1e-9, -2e-9, 3e-9);
  EXPECT_LT((so3_exp(w) - angle_axis(w)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Geometry, QuarterTurnAboutZ) {
  const Mat3 r = so3_exp(Vec3(0, 0, std::numbers::pi / 2));
  EXPECT_TRUE((r * Vec3::UnitX()).isApprox(Vec3::UnitY(), 1e-12));
}

TEST(Geometry, Se3ExpLogRoundTrip) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const TangentVec xi = random_twist(rng, 2.0, 1.5);
    const TangentVec back = se3_log(se3_exp(xi));
    EXPECT_LT((back - xi).cwiseAbs().maxCoeff(), 1e-10) << i;
  }
}

TEST(Geometry, Se3ExpIsOneParameterSubgroup) {
  // exp(a xi) exp(b xi) = exp((a + b) xi), a property the closed form must obey.
  Rng rng(3);
  const TangentVec xi = random_twist(rng, 1.0, 1.0);
  const SE3Pose lhs = se3_exp(0.3 * xi) * se3_exp(0.5 * xi);
  const SE3Pose rhs = se3_exp(0.8 * xi);
  EXPECT_LT((lhs.matrix() - rhs.matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Geometry, Se3ExpMatchesMatrixExponentialSeries) {
  Rng rng(4);
  const TangentVec xi = random_twist(rng, 0.8, 0.9);
  Eigen::Matrix4d a = Eigen::Matrix4d::Zero();
  a.topLeftCorner<3, 3>() = skew(xi.tail<3>());
  a.topRightCorner<3, 1>() = xi.head<3>();
  Eigen::Matrix4d sum = Eigen::Matrix4d::Identity();
  Eigen::Matrix4d term = Eigen::Matrix4d::Identity();
  for (int k = 1; k < 40; ++k) {
    term = term * a / k;
    sum += term;
  }
  EXPECT_LT((se3_exp(xi).matrix() - sum).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Geometry, So3LogNearPiThrows) {
  const Mat3 r = angle_axis(Vec3(0, 0, std::numbers::pi - 1e-8));
  EXPECT_THROW((void)so3_log(r), NearSingularError);
}

TEST(Geometry, BoxplusComposesOnTheLeft) {
  Rng rng(5);
  const SE3Pose pose = se3_exp(random_twist(rng, 1.0, 0.5));
  const TangentVec delta = random_twist(rng, 0.1, 0.1);
  const SE3Pose expected = se3_exp(delta) * pose;
  EXPECT_TRUE(boxplus(delta, pose).matrix().isApprox(expected.matrix()));
  EXPECT_TRUE(boxplus(TangentVec::Zero(), pose).matrix().isApprox(pose.matrix()));
}

TEST(Geometry, InverseComposesToIdentity) {
  Rng rng(6);
  const SE3Pose pose = se3_exp(random_twist(rng, 3.0, 2.0));
  EXPECT_TRUE((pose * pose.inverse()).matrix().isIdentity(1e-12));
}

TEST(Geometry, ProjectUnprojectRoundTrip) {
  CameraIntrinsics k;
  k.fx = 160;
  k.fy = 150;
  k.cx = 79.5;
  k.cy = 59.5;
  k.width = 160;
  k.height = 120;
  const Vec2 p(12.25, 100.75);
  const Vec3 x = unproject(p, 3.5, k);
  EXPECT_DOUBLE_EQ(x.z(), 3.5);
  EXPECT_TRUE(project(x, k).isApprox(p, 1e-14));
}

TEST(Geometry, ProjectionErrors) {
  CameraIntrinsics k;
  k.fx = k.fy = 100;
  k.cx = k.cy = 10;
  k.width = k.height = 20;
  EXPECT_THROW((void)unproject(Vec2(1, 1), 0.0, k), InvalidDepthError);
  EXPECT_THROW((void)unproject(Vec2(1, 1), -1.0, k), InvalidDepthError);
  EXPECT_THROW((void)project(Vec3(0, 0, -1), k), BehindCameraError);
}

TEST(Geometry, WarpPointIdentityIsFixedPoint) {
  CameraIntrinsics k;
  k.fx = k.fy = 100;
  k.cx = k.cy = 15.5;
  k.width = k.height = 32;
  const WarpResult w = warp_point(Vec2(10, 12), 2.0, SE3Pose::identity(), k, k);
  ASSERT_TRUE(w.valid);
  EXPECT_TRUE(w.pixel.isApprox(Vec2(10, 12), 1e-14));
  const WarpResult behind =
      warp_point(Vec2(10, 12), 2.0, SE3Pose(Mat3::Identity(), Vec3(0, 0, -5)), k, k);
  EXPECT_FALSE(behind.valid);
}

TEST(Geometry, LevelMappingOfPixelCenters) {
  // Level 1 is 1/8 resolution: full pixels 0..7 average into level pixel 0,
  // whose center is full-resolution 3.5.
  EXPECT_DOUBLE_EQ(CameraIntrinsics::pixel_to_level(Vec2(3.5, 3.5), 1).x(), 0.0);
  EXPECT_DOUBLE_EQ(CameraIntrinsics::pixel_to_level(Vec2(0.5, 0.5), 3).x(), 0.0);
  EXPECT_DOUBLE_EQ(CameraIntrinsics::pixel_to_level(Vec2(7, 7), 4).x(), 7.0);
  EXPECT_THROW((void)CameraIntrinsics::level_scale(0), InvalidArgumentError);
  EXPECT_THROW((void)CameraIntrinsics::level_scale(5), InvalidArgumentError);
}

TEST(Geometry, LevelIntrinsicsAreConsistentWithPixelMapping) {
  CameraIntrinsics k;
  k.fx = 160;
  k.fy = 160;
  k.cx = 79.5;
  k.cy = 59.5;
  k.width = 160;
  k.height = 120;
  const Vec3 x(0.4, -0.3, 2.7);
  for (int level = 1; level <= 4; ++level) {
    const Vec2 direct = project(x, k.at_level(level));
    const Vec2 mapped = CameraIntrinsics::pixel_to_level(project(x, k), level);
    EXPECT_LT((direct - mapped).norm(), 1e-12) << level;
  }
  EXPECT_EQ(k.at_level(1).width, 20);
  EXPECT_EQ(k.at_level(1).height, 15);
}

TEST(Geometry, RotationErrorEqualsAxisAngle) {
  Rng rng(7);
  for (double deg : {1.0, 30.0, 179.0}) {
    Vec3 axis(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    axis.normalize();
    const Mat3 r = angle_axis(deg * kDeg * axis);
    EXPECT_NEAR(rotation_error(r, Mat3::Identity()), deg, 1e-9) << deg;
    EXPECT_NEAR(rotation_error(Mat3::Identity(), r), deg, 1e-9) << deg;
  }
  EXPECT_EQ(rotation_error(Mat3::Identity(), Mat3::Identity()), 0.0);
}

TEST(Geometry, TranslationError) {
  EXPECT_DOUBLE_EQ(translation_error(Vec3(1, 2, 2), Vec3::Zero()), 3.0);
}

TEST(Geometry, PoseTextRoundTripIsExact) {
  Rng rng(8);
  const SE3Pose pose = se3_exp(random_twist(rng, 2.0, 1.0));
  const SE3Pose back = parse_pose(format_pose(pose));
  EXPECT_EQ(back.rotation, pose.rotation);
  EXPECT_EQ(back.translation, pose.translation);
}

TEST(Geometry, PoseParseRejectsBadInput) {
  EXPECT_THROW((void)parse_pose("1 0 0 0 0 1 0 0 0 0 1"), FormatError);
  EXPECT_THROW((void)parse_pose("1 0 0 0 0 1 0 0 0 0 1 0 7"), FormatError);
  EXPECT_THROW((void)parse_pose("1 0 0 0 0 1 0 0 0 0 1 x"), FormatError);
  EXPECT_THROW((void)parse_pose("2 0 0 0 0 1 0 0 0 0 1 0"), FormatError);
  EXPECT_THROW((void)parse_pose("1 0 0 0 0 1 0 0 0 0 -1 0"), FormatError);
  EXPECT_THROW((void)parse_pose("1 0 0 nan 0 1 0 0 0 0 1 0"), FormatError);
  EXPECT_NO_THROW((void)parse_pose("1 0 0 0.5\n0 1 0 0\n0 0 1 -2\n"));
}
