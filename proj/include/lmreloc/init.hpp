// Pose initialization from a feature correlation volume, and the
// Euler-angle pose regression loss.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/feature_map.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/lm_align.hpp"
#include "lmreloc/parallel.hpp"

namespace lmreloc {

// ============================================================================
// Correlation map
// ============================================================================

inline constexpr int kCorrelationBudget = 4096;  // max pixels per input map

// c(i, j, i', j') for source pixel (row i, col j) and target pixel (i', j').
struct CorrelationMap {
  int height = 0;
  int width = 0;
  int target_height = 0;
  int target_width = 0;
  std::vector<double> values;

  [[nodiscard]] std::size_t slab_size() const {
    return static_cast<std::size_t>(target_height) * target_width;
  }
  [[nodiscard]] double operator()(int i, int j, int ti, int tj) const {
    return values[(static_cast<std::size_t>(i) * width + j) * slab_size() +
                  static_cast<std::size_t>(ti) * target_width + tj];
  }
  [[nodiscard]] const double* slab(int i, int j) const {
    return &values[(static_cast<std::size_t>(i) * width + j) * slab_size()];
  }
};

namespace detail {

// Per-pixel L2 normalization; zero vectors stay zero.
inline std::vector<double> normalized_pixels(const FeatureMap& f) {
  std::vector<double> out = f.data();
  const int d = f.channels();
  for (std::size_t p = 0; p < out.size(); p += d) {
    double n2 = 0.0;
    for (int c = 0; c < d; ++c) n2 += out[p + c] * out[p + c];
    const double inv = n2 > 0.0 ? 1.0 / std::sqrt(n2) : 0.0;
    for (int c = 0; c < d; ++c) out[p + c] *= inv;
  }
  return out;
}

}  // namespace detail

// All-pairs dot products of per-pixel L2-normalized features. With
// `normalize_slabs`, each source pixel's slab over target pixels is then
// L2-normalized as well (all-zero slabs stay zero).
[[nodiscard]] inline CorrelationMap correlation_map(const FeatureMap& source,
                                                    const FeatureMap& target,
                                                    bool normalize_slabs = true) {
  if (source.channels() != target.channels()) {
    throw InvalidArgumentError("correlation_map: channel counts differ");
  }
  if (static_cast<long>(source.height()) * source.width() > kCorrelationBudget ||
      static_cast<long>(target.height()) * target.width() > kCorrelationBudget) {
    throw InvalidArgumentError("correlation_map: input exceeds the 4096-pixel budget");
  }
  const int d = source.channels();
  const std::vector<double> fs = detail::normalized_pixels(source);
  const std::vector<double> ft = detail::normalized_pixels(target);
  CorrelationMap out;
  out.height = source.height();
  out.width = source.width();
  out.target_height = target.height();
  out.target_width = target.width();
  const std::size_t ns = static_cast<std::size_t>(out.height) * out.width;
  const std::size_t nt = out.slab_size();
  out.values.resize(ns * nt);
  for (std::size_t s = 0; s < ns; ++s) {
    double* slab = &out.values[s * nt];
    for (std::size_t t = 0; t < nt; ++t) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += fs[s * d + c] * ft[t * d + c];
      slab[t] = dot;
    }
    if (normalize_slabs) {
      double n2 = 0.0;
      for (std::size_t t = 0; t < nt; ++t) n2 += slab[t] * slab[t];
      if (n2 > 0.0) {
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t t = 0; t < nt; ++t) slab[t] *= inv;
      }
    }
  }
  return out;
}

// Stacks the (2r+1)^2 neighbourhood of every pixel into its feature vector,
// clamping at the border. A single level-1 pixel carries too few channels to
// be matched on its own.
[[nodiscard]] inline FeatureMap context_features(const FeatureMap& f, int radius = 1) {
  if (radius < 0) throw InvalidArgumentError("context_features: radius must be >= 0");
  const int d = f.channels();
  const int k = 2 * radius + 1;
  FeatureMap out(f.height(), f.width(), d * k * k);
  for (int r = 0; r < f.height(); ++r) {
    for (int c = 0; c < f.width(); ++c) {
      int o = 0;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const int rr = std::clamp(r + dy, 0, f.height() - 1);
          const int cc = std::clamp(c + dx, 0, f.width() - 1);
          for (int ch = 0; ch < d; ++ch) out.at(r, c, o++) = f.at(rr, cc, ch);
        }
      }
    }
  }
  return out;
}

// ============================================================================
// Correlation-seeded initialization
// ============================================================================

struct InitConfig {
  double yaw_pitch_range_deg = 6.0;
  double yaw_pitch_step_deg = 1.5;
  double translation_range = 0.5;
  int translation_steps = 5;
  int context_radius = 1;  // neighbourhood stacked into correlation features
  int num_threads = 1;
};

struct InitResult {
  SE3Pose pose;
  Vec2 median_flow = Vec2::Zero();  // level-1 pixels
  double identity_energy = 0.0;
  double energy = 0.0;
  std::size_t candidates = 0;
  bool used_identity = true;
};

[[nodiscard]] inline Mat3 yaw_pitch_rotation(double yaw, double pitch) {
  return (Eigen::AngleAxisd(yaw, Vec3::UnitY()) * Eigen::AngleAxisd(pitch, Vec3::UnitX()))
      .toRotationMatrix();
}

// Dominant level-1 flow from the correlation argmax of every point's source
// pixel, aggregated by a per-component median.
[[nodiscard]] inline Vec2 dominant_flow(const CorrelationMap& corr,
                                        const std::vector<Vec2>& source_pixels) {
  std::vector<double> fu, fv;
  for (const Vec2& p : source_pixels) {
    const int j = static_cast<int>(std::lround(p.x()));
    const int i = static_cast<int>(std::lround(p.y()));
    if (i < 0 || j < 0 || i >= corr.height || j >= corr.width) continue;
    const double* slab = corr.slab(i, j);
    const auto best = std::max_element(slab, slab + corr.slab_size()) - slab;
    if (slab[best] <= 0.0) continue;
    fu.push_back(static_cast<double>(best % corr.target_width) - j);
    fv.push_back(static_cast<double>(best / corr.target_width) - i);
  }
  if (fu.empty()) return Vec2::Zero();
  auto median = [](std::vector<double>& v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
      m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
    }
    return m;
  };
  return {median(fu), median(fv)};
}

// Coarse seed for LM: measures the dominant level-1 flow from correlation
// argmaxes over context-stacked features, explains it once as a yaw/pitch
// rotation and once as a lateral translation at the median point depth, and
// grid-searches yaw, pitch and the three translations around both
// explanations for the lowest level-1 energy.
// Falls back to identity unless a candidate is strictly better.
[[nodiscard]] inline InitResult corr_pose_init(const FeaturePyramid& reference,
                                               const FeaturePyramid& target,
                                               const SparsePointSet& points,
                                               const CameraIntrinsics& camera_full,
                                               const LMConfig& lm_config,
                                               const InitConfig& config = {}) {
  InitResult out;
  const LevelProblem prob = make_level_problem(reference, target, points, camera_full, 1);
  out.identity_energy = evaluate_energy(prob, SE3Pose::identity(), lm_config);
  out.energy = out.identity_energy;
  if (points.empty()) return out;

  const CorrelationMap corr = correlation_map(context_features(reference.level(1), config.context_radius),
                                              context_features(target.level(1), config.context_radius));
  std::vector<Vec2> level_pixels;
  std::vector<double> depths;
  for (const SparsePoint& p : points) {
    level_pixels.push_back(CameraIntrinsics::pixel_to_level(p.pixel, 1));
    depths.push_back(p.depth);
  }
  out.median_flow = dominant_flow(corr, level_pixels);
  std::nth_element(depths.begin(), depths.begin() + static_cast<std::ptrdiff_t>(depths.size() / 2),
                   depths.end());
  const double z_med = depths[depths.size() / 2];
  const CameraIntrinsics k1 = camera_full.at_level(1);

  struct Center {
    double yaw, pitch;
    Vec3 t;
  };
  const std::array<Center, 2> centers{{
      {std::atan(out.median_flow.x() / k1.fx), -std::atan(out.median_flow.y() / k1.fy),
       Vec3::Zero()},
      {0.0, 0.0,
       Vec3(-out.median_flow.x() * z_med / k1.fx, -out.median_flow.y() * z_med / k1.fy, 0.0)},
  }};
  const double deg = std::numbers::pi / 180.0;
  const int angle_steps =
      static_cast<int>(std::lround(2.0 * config.yaw_pitch_range_deg / config.yaw_pitch_step_deg)) + 1;
  const int ts = std::max(config.translation_steps, 1);
  auto offset = [](int k, int steps, double range) {
    return steps == 1 ? 0.0 : -range + 2.0 * range * k / (steps - 1);
  };

  std::vector<SE3Pose> candidates;
  candidates.reserve(centers.size() * angle_steps * angle_steps * ts * ts * ts);
  for (const Center& c : centers) {
    for (int a = 0; a < angle_steps; ++a) {
      for (int b = 0; b < angle_steps; ++b) {
        const double yaw = c.yaw + offset(a, angle_steps, config.yaw_pitch_range_deg * deg);
        const double pitch = c.pitch + offset(b, angle_steps, config.yaw_pitch_range_deg * deg);
        const Mat3 r = yaw_pitch_rotation(yaw, pitch);
        for (int x = 0; x < ts; ++x) {
          for (int y = 0; y < ts; ++y) {
            for (int z = 0; z < ts; ++z) {
              const Vec3 t = c.t + Vec3(offset(x, ts, config.translation_range),
                                        offset(y, ts, config.translation_range),
                                        offset(z, ts, config.translation_range));
              candidates.emplace_back(r, t);
            }
          }
        }
      }
    }
  }
  out.candidates = candidates.size();

  constexpr std::size_t kChunk = 256;
  std::vector<std::pair<double, std::size_t>> best(chunk_count(candidates.size(), kChunk),
                                                   {std::numeric_limits<double>::infinity(), 0});
  for_each_chunk(candidates.size(), kChunk, config.num_threads,
                 [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                   for (std::size_t i = begin; i < end; ++i) {
                     const double e = evaluate_energy(prob, candidates[i], lm_config);
                     if (e < best[chunk].first) best[chunk] = {e, i};
                   }
                 });
  for (const auto& [e, i] : best) {
    if (e < out.energy) {
      out.energy = e;
      out.pose = candidates[i];
      out.used_identity = false;
    }
  }
  return out;
}

// ============================================================================
// Euler pose loss
// ============================================================================

// Intrinsic X-Y-Z Euler angles: R = Rx(a) Ry(b) Rz(c).
struct EulerPose {
  Vec3 r_euler = Vec3::Zero();  // radians
  Vec3 t = Vec3::Zero();
};

[[nodiscard]] inline Mat3 rotation_from_euler(const Vec3& e) {
  return (Eigen::AngleAxisd(e.x(), Vec3::UnitX()) * Eigen::AngleAxisd(e.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(e.z(), Vec3::UnitZ()))
      .toRotationMatrix();
}

[[nodiscard]] inline Vec3 euler_from_rotation(const Mat3& r) {
  const double b = std::asin(std::clamp(r(0, 2), -1.0, 1.0));
  const double a = std::atan2(-r(1, 2), r(2, 2));
  const double c = std::atan2(-r(0, 1), r(0, 0));
  auto wrap = [](double x) { return x <= -std::numbers::pi ? x + 2.0 * std::numbers::pi : x; };
  return {wrap(a), wrap(b), wrap(c)};
}

[[nodiscard]] inline EulerPose to_euler(const SE3Pose& pose) {
  return {euler_from_rotation(pose.rotation), pose.translation};
}

// |t - t_gt| + lambda |r - r_gt|
[[nodiscard]] inline double posenet_loss(const EulerPose& est, const EulerPose& gt,
                                         double lambda_w = 10.0) {
  return (est.t - gt.t).norm() + lambda_w * (est.r_euler - gt.r_euler).norm();
}

}  // namespace lmreloc
