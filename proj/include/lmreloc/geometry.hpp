// SE(3) arithmetic, the pinhole camera, and pose error metrics.
//
// Twists are ordered (v, w): translational part first, rotational part last.
// Pose updates compose on the LEFT:
//
//   boxplus(delta, pose) = exp(delta) * pose
//
// so a small update perturbs a transformed point Y = R X + t as
// Y + v + w x Y. The projection Jacobian in lm_align.hpp is derived for this
// convention; switching to right composition would silently break it.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"

namespace lmreloc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// 6-vector (v1, v2, v3, w1, w2, w3); translation in scene units, rotation in
// radians.
using TangentVec = Vec6;

// Minimum depth in front of the camera for a projection to be valid.
inline constexpr double kMinDepth = 1e-6;

// Samples must keep this distance (pixels) from the image border so the
// bilinear cell and its gradient stay inside the map.
inline constexpr double kInterpolationMargin = 1.0;

// Below this rotation angle exp/log switch to second-order Taylor expansions.
inline constexpr double kSmallAngle = 1e-8;

[[nodiscard]] inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<    0.0, -v.z(),  v.y(),
        v.z(),    0.0, -v.x(),
       -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

[[nodiscard]] inline Vec3 vee(const Mat3& m) {
  return Vec3(m(2, 1), m(0, 2), m(1, 0));
}

// Rigid transform X -> R X + t. For relative poses the convention is
// reference camera -> target camera.
struct SE3Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  SE3Pose() = default;
  SE3Pose(const Mat3& r, const Vec3& t) : rotation(r), translation(t) {}

  [[nodiscard]] static SE3Pose identity() { return {}; }

  [[nodiscard]] Vec3 operator*(const Vec3& x) const {
    return rotation * x + translation;
  }

  [[nodiscard]] SE3Pose operator*(const SE3Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  [[nodiscard]] SE3Pose inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  // Max-abs deviation of R^T R from identity.
  [[nodiscard]] double orthonormality_error() const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  }

  [[nodiscard]] bool is_valid(double tol = 1e-9) const {
    return rotation.allFinite() && translation.allFinite() &&
           orthonormality_error() < tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }

  [[nodiscard]] Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

// ============================================================================
// Lie group maps
// ============================================================================

[[nodiscard]] inline Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b;
  if (theta < kSmallAngle) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 wx = skew(w);
  return Mat3::Identity() + a * wx + b * wx * wx;
}

[[nodiscard]] inline SE3Pose se3_exp(const TangentVec& delta) {
  const Vec3 v = delta.head<3>();
  const Vec3 w = delta.tail<3>();
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b, c;
  if (theta < kSmallAngle) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Mat3 wx = skew(w);
  const Mat3 wx2 = wx * wx;
  const Mat3 r = Mat3::Identity() + a * wx + b * wx2;
  const Mat3 jl = Mat3::Identity() + b * wx + c * wx2;
  return {r, jl * v};
}

// Rotation vector of R. Throws NearSingularError when the angle is within
// 1e-6 of pi, where the axis is not recoverable from the skew part.
[[nodiscard]] inline Vec3 so3_log(const Mat3& r) {
  const Vec3 axis2s = vee(r - r.transpose());  // 2 sin(theta) * axis
  const double s = 0.5 * axis2s.norm();
  const double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  const double theta = std::atan2(s, c);
  if (theta > std::numbers::pi - 1e-6) {
    throw NearSingularError("so3_log: rotation angle " + std::to_string(theta) +
                            " rad is too close to pi");
  }
  if (theta < kSmallAngle) {
    return (0.5 + theta * theta / 12.0) * axis2s;
  }
  return (theta / (2.0 * s)) * axis2s;
}

[[nodiscard]] inline TangentVec se3_log(const SE3Pose& pose) {
  const Vec3 w = so3_log(pose.rotation);
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 wx = skew(w);
  double k;
  if (theta < kSmallAngle) {
    k = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / theta2;
    k = (1.0 - a / (2.0 * b)) / theta2;
  }
  const Mat3 jl_inv = Mat3::Identity() - 0.5 * wx + k * wx * wx;
  TangentVec out;
  out.head<3>() = jl_inv * pose.translation;
  out.tail<3>() = w;
  return out;
}

// delta [+] pose = exp(delta) * pose.
[[nodiscard]] inline SE3Pose boxplus(const TangentVec& delta, const SE3Pose& pose) {
  return se3_exp(delta) * pose;
}

// ============================================================================
// Pinhole camera
// ============================================================================

// Pixel coordinates put the center of pixel (i, j) at (i, j).
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 8;
  int height = 8;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
      throw InvalidArgumentError("camera focal lengths must be positive");
    }
    if (width < 8 || height < 8) {
      throw InvalidArgumentError("camera image must be at least 8x8 pixels");
    }
  }

  // Intrinsics of pyramid level `level` in 1..4 (4 = full resolution). The
  // image is area-downsampled by 2 per level, which maps pixel centers as
  // u_l = (u + 0.5) / s - 0.5 with s = 2^(4 - level).
  [[nodiscard]] CameraIntrinsics at_level(int level) const {
    const double s = level_scale(level);
    CameraIntrinsics k;
    k.fx = fx / s;
    k.fy = fy / s;
    k.cx = (cx + 0.5) / s - 0.5;
    k.cy = (cy + 0.5) / s - 0.5;
    k.width = static_cast<int>(width / s);
    k.height = static_cast<int>(height / s);
    return k;
  }

  [[nodiscard]] static double level_scale(int level) {
    if (level < 1 || level > 4) {
      throw InvalidArgumentError("pyramid level must be in 1..4");
    }
    return static_cast<double>(1 << (4 - level));
  }

  // Full-resolution pixel -> level pixel.
  [[nodiscard]] static Vec2 pixel_to_level(const Vec2& p, int level) {
    const double s = level_scale(level);
    return (p.array() + 0.5) / s - 0.5;
  }

  [[nodiscard]] bool in_bounds(const Vec2& q, double margin = kInterpolationMargin) const {
    return q.x() >= margin && q.y() >= margin && q.x() <= width - 1 - margin &&
           q.y() <= height - 1 - margin;
  }
};

[[nodiscard]] inline Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& k) {
  if (!(depth > 0.0)) {
    throw InvalidDepthError("unproject: depth must be positive, got " + std::to_string(depth));
  }
  return depth * Vec3((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
}

[[nodiscard]] inline Vec2 project(const Vec3& point, const CameraIntrinsics& k) {
  if (!(point.z() > kMinDepth)) {
    throw BehindCameraError("project: point is behind the camera (z = " +
                            std::to_string(point.z()) + ")");
  }
  return {k.fx * point.x() / point.z() + k.cx, k.fy * point.y() / point.z() + k.cy};
}

struct WarpResult {
  Vec2 pixel = Vec2::Zero();
  Vec3 point = Vec3::Zero();  // in the target camera frame
  bool valid = false;
};

// p' = proj(R unproj(p, d) + t). Invalid when the transformed point is behind
// the target camera or p' leaves the interpolation margin of the target image.
[[nodiscard]] inline WarpResult warp_point(const Vec2& p, double depth, const SE3Pose& pose,
                                           const CameraIntrinsics& k_ref,
                                           const CameraIntrinsics& k_target) {
  WarpResult out;
  out.point = pose * unproject(p, depth, k_ref);
  if (!(out.point.z() > kMinDepth)) {
    return out;
  }
  out.pixel = project(out.point, k_target);
  out.valid = k_target.in_bounds(out.pixel);
  return out;
}

// ============================================================================
// Pose error metrics
// ============================================================================

[[nodiscard]] inline double translation_error(const Vec3& t_est, const Vec3& t_gt) {
  return (t_est - t_gt).norm();
}

// Geodesic angle between two rotations, in degrees.
[[nodiscard]] inline double rotation_error(const Mat3& r_est, const Mat3& r_gt) {
  const Mat3 d = r_est.transpose() * r_gt;
  const double c = 0.5 * (d.trace() - 1.0);
  const double s = 0.5 * vee(d - d.transpose()).norm();
  return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

// ============================================================================
// Pose text format: 12 whitespace-separated decimals, row-major [R | t].
// ============================================================================

inline constexpr double kPoseParseTolerance = 1e-6;

[[nodiscard]] inline std::string format_pose(const SE3Pose& pose) {
  std::string out;
  char buf[32];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      const double v = c < 3 ? pose.rotation(r, c) : pose.translation(r);
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      if (!out.empty()) out += ' ';
      out += buf;
    }
  }
  return out;
}

[[nodiscard]] inline SE3Pose parse_pose(const std::string& text) {
  std::istringstream in(text);
  std::array<double, 12> v{};
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::string tok;
    if (!(in >> tok)) {
      throw FormatError("pose: expected 12 numbers, found " + std::to_string(i));
    }
    try {
      std::size_t used = 0;
      v[i] = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw FormatError("pose: '" + tok + "' is not a number");
    }
    if (!std::isfinite(v[i])) {
      throw FormatError("pose: non-finite value");
    }
  }
  std::string extra;
  if (in >> extra) {
    throw FormatError("pose: more than 12 numbers");
  }
  SE3Pose pose;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) pose.rotation(r, c) = v[r * 4 + c];
    pose.translation(r) = v[r * 4 + 3];
  }
  if (!pose.is_valid(kPoseParseTolerance)) {
    throw FormatError("pose: rotation is not orthonormal (error " +
                      std::to_string(pose.orthonormality_error()) + ", det " +
                      std::to_string(pose.rotation.determinant()) + ")");
  }
  return pose;
}

[[nodiscard]] inline SE3Pose load_pose(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pose file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_pose(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void save_pose(const std::string& path, const SE3Pose& pose) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write pose file " + path);
  out << format_pose(pose) << '\n';
}

}  // namespace lmreloc
