// Synthetic ground truth: textured scenes with dense depth, exact pose
// warping, pose perturbations by flow class, photometric perturbation, and
// gradient-based sparse point selection.
//
// Exactness: the target view is the scene texture itself (a crop of a larger
// canvas) and the reference view is synthesized by sampling the bilinear
// interpolant of that canvas at the forward-warped location of every
// reference pixel. Hence F'(p'(p)) = F(p) holds exactly at every reference
// pixel that lands inside the target, which makes the ground-truth pose a zero
// of the alignment energy on full-resolution intensity. Benchmark pairs extend
// this to every feature channel and level by rendering the reference pyramid
// in feature space (synthesize_reference_pyramid).
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/feature_map.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/lm_align.hpp"
#include "lmreloc/random.hpp"

namespace lmreloc {

struct SceneConfig {
  int width = 160;
  int height = 120;
  double fx = 160.0;
  double fy = 160.0;
  // Negative means image center.
  double cx = -1.0;
  double cy = -1.0;
  double depth_min = 1.0;
  double depth_max = 10.0;
  // Value-noise texture: largest cell size in pixels, octave count, amplitude
  // falloff per octave.
  double texture_cell = 24.0;
  int texture_octaves = 4;
  double texture_persistence = 0.5;
  bool constant_texture = false;
  // Adds a fronto-parallel foreground block at 60% of the background depth.
  bool depth_discontinuity = false;
  // Extra texture around the target view so out-of-frame reference pixels
  // still receive content.
  int canvas_margin = 32;
  // A pixel counts as textured when its gradient magnitude exceeds this.
  double gradient_threshold = 0.004;
  double min_gradient_coverage = 0.3;

  [[nodiscard]] CameraIntrinsics camera() const {
    CameraIntrinsics k;
    k.fx = fx;
    k.fy = fy;
    k.cx = cx < 0.0 ? 0.5 * (width - 1) : cx;
    k.cy = cy < 0.0 ? 0.5 * (height - 1) : cy;
    k.width = width;
    k.height = height;
    return k;
  }
};

struct SyntheticScene {
  FeatureMap texture;  // (h + 2m) x (w + 2m) canvas, D = 1, values in [0, 1]
  int canvas_margin = 0;
  FeatureMap depth;  // h x w, reference camera
  CameraIntrinsics camera;
  std::uint64_t seed = 0;
  double gradient_coverage = 0.0;
  bool texture_ok = false;

  // The view seen by a camera at the scene's own pose.
  [[nodiscard]] FeatureMap view() const {
    FeatureMap out(camera.height, camera.width, 1);
    for (int r = 0; r < camera.height; ++r) {
      for (int c = 0; c < camera.width; ++c) {
        out.at(r, c) = texture.at(r + canvas_margin, c + canvas_margin);
      }
    }
    return out;
  }
};

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Single octave of value noise over an h x w grid.
inline void add_value_noise(Rng& rng, double cell, double amplitude, FeatureMap& out) {
  const int gw = static_cast<int>(std::ceil(out.width() / cell)) + 2;
  const int gh = static_cast<int>(std::ceil(out.height() / cell)) + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gw) * gh);
  for (double& v : lattice) v = uniform01(rng);
  auto at = [&](int gy, int gx) { return lattice[static_cast<std::size_t>(gy) * gw + gx]; };
  for (int r = 0; r < out.height(); ++r) {
    const double fy = r / cell;
    const int y0 = static_cast<int>(fy);
    const double ty = smoothstep(fy - y0);
    for (int c = 0; c < out.width(); ++c) {
      const double fx = c / cell;
      const int x0 = static_cast<int>(fx);
      const double tx = smoothstep(fx - x0);
      const double top = (1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1);
      const double bottom = (1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1);
      out.at(r, c) += amplitude * ((1.0 - ty) * top + ty * bottom);
    }
  }
}

inline double gradient_coverage(const FeatureMap& img, double threshold) {
  const FeatureMap g = gradient_magnitude(img);
  std::size_t above = 0;
  for (double v : g.data()) above += v > threshold ? 1 : 0;
  return static_cast<double>(above) / static_cast<double>(g.size());
}

}  // namespace detail

[[nodiscard]] inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.width % 8 != 0 || config.height % 8 != 0) {
    throw InvalidArgumentError("scene dimensions must be multiples of 8");
  }
  if (!(config.depth_min > 0.0) || !(config.depth_max > config.depth_min)) {
    throw InvalidArgumentError("scene depth range must satisfy 0 < depth_min < depth_max");
  }
  SyntheticScene scene;
  scene.seed = seed;
  scene.camera = config.camera();
  scene.camera.validate();
  scene.canvas_margin = config.canvas_margin;
  Rng rng(seed);

  const int m = config.canvas_margin;
  scene.texture = FeatureMap(config.height + 2 * m, config.width + 2 * m, 1, 0.5);
  if (!config.constant_texture) {
    FeatureMap noise(scene.texture.height(), scene.texture.width(), 1, 0.0);
    double cell = config.texture_cell;
    double amp = 1.0;
    for (int o = 0; o < config.texture_octaves && cell >= 2.0; ++o) {
      detail::add_value_noise(rng, cell, amp, noise);
      cell *= 0.5;
      amp *= config.texture_persistence;
    }
    const auto [lo, hi] = std::minmax_element(noise.data().begin(), noise.data().end());
    const double range = std::max(*hi - *lo, 1e-12);
    const double lo_v = *lo;
    for (std::size_t i = 0; i < noise.size(); ++i) {
      scene.texture.data()[i] = (noise.data()[i] - lo_v) / range;
    }
  }
  scene.gradient_coverage = detail::gradient_coverage(scene.view(), config.gradient_threshold);
  scene.texture_ok = scene.gradient_coverage >= config.min_gradient_coverage;

  // Depth: slanted plane plus a low-frequency bump field, clamped.
  const double span = config.depth_max - config.depth_min;
  const double base = config.depth_min + span * uniform(rng, 0.2, 0.45);
  const double slant_u = base * uniform(rng, -0.3, 0.3);
  const double slant_v = base * uniform(rng, -0.3, 0.3);
  FeatureMap bumps(config.height, config.width, 1, 0.0);
  detail::add_value_noise(rng, 64.0, 1.0, bumps);
  scene.depth = FeatureMap(config.height, config.width, 1);
  const CameraIntrinsics& k = scene.camera;
  for (int r = 0; r < config.height; ++r) {
    for (int c = 0; c < config.width; ++c) {
      double d = base + slant_u * (c - k.cx) / config.width + slant_v * (r - k.cy) / config.height +
                 0.25 * base * (bumps.at(r, c) - 0.5);
      scene.depth.at(r, c) = d;
    }
  }
  if (config.depth_discontinuity) {
    const int bw = config.width / 4;
    const int bh = config.height / 3;
    const int c0 = static_cast<int>(uniform(rng, 0.15, 0.6) * config.width);
    const int r0 = static_cast<int>(uniform(rng, 0.15, 0.5) * config.height);
    double mean = 0.0;
    for (double v : scene.depth.data()) mean += v;
    mean /= static_cast<double>(scene.depth.size());
    for (int r = r0; r < std::min(r0 + bh, config.height); ++r) {
      for (int c = c0; c < std::min(c0 + bw, config.width); ++c) scene.depth.at(r, c) = 0.6 * mean;
    }
  }
  for (double& d : scene.depth.data()) d = std::clamp(d, config.depth_min, config.depth_max);
  return scene;
}

// ============================================================================
// Warping
// ============================================================================

struct WarpedScene {
  FeatureMap reference;  // h x w
  FeatureMap target;     // h x w
  // 1 where the reference pixel is in front of the target camera, lands inside
  // the target image, and is not occluded.
  std::vector<char> valid;
  // Target pixel of every reference pixel; NaN behind the camera.
  std::vector<Vec2> correspondence;
  double overlap = 0.0;

  [[nodiscard]] std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * reference.width() + c;
  }
};

// Renders the pair for relative pose `pose` (reference -> target). Throws
// RegeneratePoseError when fewer than `min_overlap` of the pixels stay valid.
[[nodiscard]] inline WarpedScene warp_scene(const SyntheticScene& scene, const SE3Pose& pose,
                                            double min_overlap = 0.5) {
  const CameraIntrinsics& k = scene.camera;
  const int w = k.width;
  const int h = k.height;
  const int m = scene.canvas_margin;

  // Homogeneous path: x' ~ K [R | t] [d K^-1 (u, v, 1); 1].
  Mat3 kmat;
  kmat << k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0;
  const Mat3 kinv = kmat.inverse();
  Eigen::Matrix<double, 3, 4> proj;
  proj.leftCols<3>() = kmat * pose.rotation;
  proj.col(3) = kmat * pose.translation;

  WarpedScene out;
  out.reference = FeatureMap(h, w, 1);
  out.target = scene.view();
  out.valid.assign(static_cast<std::size_t>(w) * h, 0);
  out.correspondence.assign(out.valid.size(), Vec2::Constant(std::numeric_limits<double>::quiet_NaN()));
  std::vector<double> zcam(out.valid.size(), std::numeric_limits<double>::infinity());
  std::vector<double> zbuf(out.valid.size(), std::numeric_limits<double>::infinity());

  auto inside = [&](const Vec2& q) {
    return q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= w - 1 && q.y() <= h - 1;
  };

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = out.index(r, c);
      Eigen::Vector4d xh;
      xh.head<3>() = scene.depth.at(r, c) * (kinv * Vec3(c, r, 1.0));
      xh(3) = 1.0;
      const Vec3 x = proj * xh;
      if (!(x.z() > kMinDepth)) continue;
      Vec2 q = x.head<2>() / x.z();
      // Round-off of the matrix path would push grid-aligned targets (the
      // identity pose, for one) a hair off the grid or out of the frame.
      for (int k = 0; k < 2; ++k) {
        const double n = std::round(q(k));
        if (std::abs(q(k) - n) < 1e-10) q(k) = n;
      }
      out.correspondence[i] = q;
      zcam[i] = x.z();
      if (!inside(q)) continue;
      const int qx0 = static_cast<int>(std::floor(q.x()));
      const int qy0 = static_cast<int>(std::floor(q.y()));
      for (int dy = 0; dy <= 1; ++dy) {
        for (int dx = 0; dx <= 1; ++dx) {
          const int qx = std::min(qx0 + dx, w - 1);
          const int qy = std::min(qy0 + dy, h - 1);
          double& z = zbuf[static_cast<std::size_t>(qy) * w + qx];
          z = std::min(z, x.z());
        }
      }
    }
  }

  std::size_t valid_count = 0;
  Eigen::VectorXd value(1);
  const double canvas_lo = kInterpolationMargin;
  const double canvas_hi_x = scene.texture.width() - 1 - kInterpolationMargin;
  const double canvas_hi_y = scene.texture.height() - 1 - kInterpolationMargin;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = out.index(r, c);
      const Vec2& q = out.correspondence[i];
      Vec2 canvas_q(c + m, r + m);
      if (std::isfinite(q.x())) {
        canvas_q = Vec2(std::clamp(q.x() + m, canvas_lo, canvas_hi_x),
                        std::clamp(q.y() + m, canvas_lo, canvas_hi_y));
        if (inside(q)) {
          const int qx = static_cast<int>(std::lround(q.x()));
          const int qy = static_cast<int>(std::lround(q.y()));
          const double zmin = zbuf[static_cast<std::size_t>(qy) * w + qx];
          if (zcam[i] <= zmin * 1.05) {
            out.valid[i] = 1;
            ++valid_count;
          }
        }
      }
      bilinear_sample_into(scene.texture, canvas_q, value.data(), nullptr, nullptr);
      out.reference.at(r, c) = value(0);
    }
  }
  out.overlap = static_cast<double>(valid_count) / static_cast<double>(out.valid.size());
  if (out.overlap < min_overlap) {
    throw RegeneratePoseError("pose leaves only " + std::to_string(100.0 * out.overlap) +
                              "% of pixels valid");
  }
  return out;
}

// ============================================================================
// Pose perturbations
// ============================================================================

enum class MagnitudeClass { kZero, kSmall, kMedium, kLarge };

[[nodiscard]] inline const char* to_string(MagnitudeClass c) {
  switch (c) {
    case MagnitudeClass::kZero:
      return "zero";
    case MagnitudeClass::kSmall:
      return "small";
    case MagnitudeClass::kMedium:
      return "medium";
    case MagnitudeClass::kLarge:
      return "large";
  }
  return "?";
}

[[nodiscard]] inline MagnitudeClass parse_magnitude_class(const std::string& s) {
  if (s == "zero") return MagnitudeClass::kZero;
  if (s == "small") return MagnitudeClass::kSmall;
  if (s == "medium") return MagnitudeClass::kMedium;
  if (s == "large") return MagnitudeClass::kLarge;
  throw InvalidArgumentError("unknown magnitude class '" + s + "'");
}

// Twist box (per-axis half widths) and accepted mean-flow bracket in pixels.
struct MagnitudeSpec {
  double rotation_deg = 0.0;
  double translation = 0.0;
  double flow_min = 0.0;
  double flow_max = 0.0;
};

[[nodiscard]] inline MagnitudeSpec magnitude_spec(MagnitudeClass c) {
  switch (c) {
    case MagnitudeClass::kZero:
      return {0.0, 0.0, 0.0, 0.0};
    case MagnitudeClass::kSmall:
      return {0.6, 0.05, 0.25, 2.0};
    case MagnitudeClass::kMedium:
      return {2.0, 0.18, 2.0, 8.0};
    case MagnitudeClass::kLarge:
      return {6.0, 0.5, 16.0, 24.0};
  }
  return {};
}

// Pixels and depths over which the mean induced flow of a pose is measured.
struct FlowProbe {
  std::vector<SparsePoint> points;
  CameraIntrinsics camera;
};

// Probe grid every `stride` pixels inside `border`.
[[nodiscard]] inline FlowProbe make_flow_probe(const SyntheticScene& scene, int stride = 8,
                                               int border = 12) {
  FlowProbe probe;
  probe.camera = scene.camera;
  for (int r = border; r < scene.camera.height - border; r += stride) {
    for (int c = border; c < scene.camera.width - border; c += stride) {
      probe.points.push_back({Vec2(c, r), scene.depth.at(r, c)});
    }
  }
  return probe;
}

// Mean |p' - p| over the probe; infinite if any probe point goes behind the
// camera.
[[nodiscard]] inline double mean_flow(const SE3Pose& pose, const FlowProbe& probe) {
  if (probe.points.empty()) return 0.0;
  double sum = 0.0;
  for (const SparsePoint& p : probe.points) {
    const Vec3 y = pose * unproject(p.pixel, p.depth, probe.camera);
    if (!(y.z() > kMinDepth)) return std::numeric_limits<double>::infinity();
    sum += (project(y, probe.camera) - p.pixel).norm();
  }
  return sum / static_cast<double>(probe.points.size());
}

// Uniform draw from the class's twist box, resampled until the mean flow over
// the probe falls inside the class bracket.
[[nodiscard]] inline SE3Pose sample_pose_perturbation(Rng& rng, MagnitudeClass cls,
                                                      const FlowProbe& probe,
                                                      int max_attempts = 10000) {
  if (cls == MagnitudeClass::kZero) return SE3Pose::identity();
  const MagnitudeSpec spec = magnitude_spec(cls);
  const double rot = spec.rotation_deg * std::numbers::pi / 180.0;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    TangentVec xi;
    for (int k = 0; k < 3; ++k) xi(k) = uniform(rng, -spec.translation, spec.translation);
    for (int k = 3; k < 6; ++k) xi(k) = uniform(rng, -rot, rot);
    const SE3Pose pose = se3_exp(xi);
    const double flow = mean_flow(pose, probe);
    if (flow >= spec.flow_min && flow <= spec.flow_max) return pose;
  }
  throw Error(std::string("could not sample a pose in flow class '") + to_string(cls) + "'");
}

// ============================================================================
// Photometric perturbation
// ============================================================================

// I -> a * I^gamma + b + N(0, sigma^2), no clamping.
struct PhotometricParams {
  double gain = 1.0;
  double offset = 0.0;
  double noise_sigma = 0.0;
  double gamma = 1.0;
  std::uint64_t seed = 0;

  [[nodiscard]] bool is_identity() const {
    return gain == 1.0 && offset == 0.0 && noise_sigma == 0.0 && gamma == 1.0;
  }
};

[[nodiscard]] inline FeatureMap photometric_perturb(const FeatureMap& image,
                                                    const PhotometricParams& params) {
  if (!std::isfinite(params.gain) || !std::isfinite(params.offset) ||
      !std::isfinite(params.noise_sigma) || !std::isfinite(params.gamma) ||
      params.noise_sigma < 0.0) {
    throw InvalidArgumentError("photometric parameters must be finite, sigma >= 0");
  }
  FeatureMap out = image;
  if (params.is_identity()) return out;
  Rng rng(params.seed);
  for (double& v : out.data()) {
    double x = params.gamma == 1.0 ? v : std::pow(std::max(v, 0.0), params.gamma);
    x = params.gain * x + params.offset;
    if (params.noise_sigma > 0.0) x += params.noise_sigma * standard_normal(rng);
    v = x;
  }
  return out;
}

// ============================================================================
// Sparse points
// ============================================================================

struct PointSelection {
  SparsePointSet points;
  bool insufficient_gradient = false;  // fewer than requested were available
  double threshold = 0.0;
};

// Picks up to n distinct pixels whose gradient magnitude exceeds an adaptive
// threshold (the median over eligible pixels, but at least `min_gradient`),
// sampling without replacement with probability proportional to gradient
// magnitude. `mask` (optional, row-major) restricts eligible pixels; `depth`
// supplies depths.
[[nodiscard]] inline PointSelection select_sparse_points(const FeatureMap& image,
                                                         const FeatureMap& depth, int n, Rng& rng,
                                                         const std::vector<char>* mask = nullptr,
                                                         int border = 12,
                                                         double min_gradient = 1e-6) {
  const std::size_t pixels = static_cast<std::size_t>(image.width()) * image.height();
  if (n < 0 || static_cast<std::size_t>(n) * 10 > pixels) {
    throw InvalidArgumentError("select_sparse_points: n must be at most 10% of the pixels");
  }
  const FeatureMap grad = gradient_magnitude(image);
  std::vector<std::size_t> eligible;
  std::vector<double> mags;
  for (int r = border; r < image.height() - border; ++r) {
    for (int c = border; c < image.width() - border; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * image.width() + c;
      if (mask != nullptr && !(*mask)[i]) continue;
      eligible.push_back(i);
      mags.push_back(grad.at(r, c));
    }
  }
  PointSelection out;
  std::vector<double> sorted = mags;
  if (!sorted.empty()) {
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    out.threshold = std::max(sorted[sorted.size() / 2], min_gradient);
  } else {
    out.threshold = min_gradient;
  }
  // Efraimidis-Spirakis keys u^(1/w): the n largest form a weighted sample.
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t k = 0; k < eligible.size(); ++k) {
    const double u = uniform01(rng);
    if (mags[k] <= out.threshold) continue;
    keyed.emplace_back(std::log(std::max(u, 1e-300)) / mags[k], eligible[k]);
  }
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(n), keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(take), keyed.end(),
                    [](const auto& a, const auto& b) {
                      return a.first > b.first || (a.first == b.first && a.second < b.second);
                    });
  for (std::size_t k = 0; k < take; ++k) {
    const std::size_t i = keyed[k].second;
    const int r = static_cast<int>(i / image.width());
    const int c = static_cast<int>(i % image.width());
    out.points.push_back({Vec2(c, r), depth.at(r, c)});
  }
  out.insufficient_gradient = out.points.size() < static_cast<std::size_t>(n);
  return out;
}

// ============================================================================
// Benchmark pairs
// ============================================================================

struct PairConfig {
  SceneConfig scene;
  MagnitudeClass magnitude = MagnitudeClass::kSmall;
  PhotometricParams photometric;
  int num_points = 300;
  BaselinePyramidConfig features;
  int point_border = 12;
};

struct BenchmarkPair {
  std::uint64_t seed = 0;
  MagnitudeClass magnitude = MagnitudeClass::kSmall;
  CameraIntrinsics camera;
  SE3Pose gt_pose;  // reference -> target
  FeatureMap reference_image;
  FeatureMap target_image;
  FeaturePyramid reference;
  FeaturePyramid target;
  SparsePointSet points;
  std::vector<Vec2> correspondence;  // dense, row-major over the reference
  std::vector<char> valid;
  double mean_flow = 0.0;  // over the sparse points
  bool points_insufficient = false;
};

// Reference pyramid rendered in feature space: every level-l reference pixel
// takes the (unnormalized) target features at its ground-truth
// correspondence. This keeps every channel, not only intensity, exact at the
// ground-truth pose; the gradient-magnitude channel of a warped image is not
// the warp of the gradient-magnitude channel.
[[nodiscard]] inline FeaturePyramid synthesize_reference_pyramid(const FeaturePyramid& target,
                                                                 const FeatureMap& depth,
                                                                 const CameraIntrinsics& camera,
                                                                 const SE3Pose& pose) {
  FeaturePyramid out;
  const int d = target.channels();
  for (int level = 1; level <= kPyramidLevels; ++level) {
    const FeatureMap& tgt = target.level(level);
    const double s = CameraIntrinsics::level_scale(level);
    FeatureMap m(tgt.height(), tgt.width(), d);
    Eigen::VectorXd depth_value(1);
    for (int r = 0; r < m.height(); ++r) {
      for (int c = 0; c < m.width(); ++c) {
        const Vec2 full((c + 0.5) * s - 0.5, (r + 0.5) * s - 0.5);
        const Vec2 dq(std::clamp(full.x(), 0.0, depth.width() - 1.0),
                      std::clamp(full.y(), 0.0, depth.height() - 1.0));
        bilinear_sample_into(depth, dq, depth_value.data(), nullptr, nullptr);
        const Vec3 y = pose * unproject(full, depth_value(0), camera);
        Vec2 q = Vec2(c, r);
        if (y.z() > kMinDepth) {
          q = CameraIntrinsics::pixel_to_level(project(y, camera), level);
        }
        q.x() = std::clamp(q.x(), kInterpolationMargin, tgt.width() - 1 - kInterpolationMargin);
        q.y() = std::clamp(q.y(), kInterpolationMargin, tgt.height() - 1 - kInterpolationMargin);
        bilinear_sample_into(tgt, q, &m.at(r, c, 0), nullptr, nullptr);
      }
    }
    out.level(level) = std::move(m);
  }
  return out;
}

// Builds a pair entirely from `seed`. Both pyramids are normalized with the
// reference's statistics and rounded to float32, so what is written to disk
// is exactly what was generated.
[[nodiscard]] inline BenchmarkPair make_benchmark_pair(std::uint64_t seed,
                                                       const PairConfig& config) {
  BenchmarkPair pair;
  pair.seed = seed;
  pair.magnitude = config.magnitude;
  const SyntheticScene scene = generate_scene(derive_seed(seed, 0), config.scene);
  pair.camera = scene.camera;
  Rng rng(derive_seed(seed, 1));
  const FlowProbe probe = make_flow_probe(scene, 8, config.point_border);
  WarpedScene warped;
  for (int attempt = 0;; ++attempt) {
    pair.gt_pose = sample_pose_perturbation(rng, config.magnitude, probe);
    try {
      warped = warp_scene(scene, pair.gt_pose);
      break;
    } catch (const RegeneratePoseError&) {
      if (attempt >= 100) throw;
    }
  }
  PhotometricParams photometric = config.photometric;
  photometric.seed = derive_seed(seed, 2);
  pair.reference_image = std::move(warped.reference);
  pair.target_image = photometric_perturb(warped.target, photometric);
  pair.correspondence = std::move(warped.correspondence);
  pair.valid = std::move(warped.valid);

  Rng point_rng(derive_seed(seed, 3));
  PointSelection sel = select_sparse_points(pair.reference_image, scene.depth, config.num_points,
                                            point_rng, &pair.valid, config.point_border);
  pair.points = std::move(sel.points);
  pair.points_insufficient = sel.insufficient_gradient;
  double flow = 0.0;
  for (const SparsePoint& p : pair.points) {
    const std::size_t i = static_cast<std::size_t>(p.pixel.y()) * pair.camera.width +
                          static_cast<std::size_t>(p.pixel.x());
    flow += (pair.correspondence[i] - p.pixel).norm();
  }
  pair.mean_flow = pair.points.empty() ? 0.0 : flow / static_cast<double>(pair.points.size());

  BaselinePyramidConfig raw = config.features;
  raw.normalization = Normalization::kNone;
  const FeaturePyramid clean_target = build_baseline_pyramid(warped.target, raw).pyramid;
  FeaturePyramid reference =
      synthesize_reference_pyramid(clean_target, scene.depth, scene.camera, pair.gt_pose);
  FeaturePyramid target = build_baseline_pyramid(pair.target_image, raw).pyramid;
  if (config.features.normalization == Normalization::kPerLevel) {
    for (int i = 0; i < kPyramidLevels; ++i) {
      for (int ch = 0; ch < reference.levels[i].channels(); ++ch) {
        double mean, stddev;
        detail::channel_stats(reference.levels[i], ch, mean, stddev);
        detail::apply_stats(reference.levels[i], ch, mean, stddev);
        detail::apply_stats(target.levels[i], ch, mean, stddev);
      }
    }
  }
  pair.reference = std::move(reference);
  pair.target = std::move(target);
  for (FeatureMap& m : pair.reference.levels) m.quantize_to_float();
  for (FeatureMap& m : pair.target.levels) m.quantize_to_float();
  return pair;
}

}  // namespace lmreloc
