// Levenberg-Marquardt direct alignment of sparse points between two feature
// pyramids.
//
// Energy of a pose on one level:
//
//   E = sum_valid rho(|F'(p') - F(p)|) + n_invalid * rho(outside_residual_norm)
//
// with the Huber cost rho(s) = s^2 for s <= gamma and 2 gamma s - gamma^2
// above, one weight per point over its D-channel residual block. Points that
// project outside the target margin are dropped from r and J and charged a
// constant cost, so a step cannot lower the energy by pushing points out of
// view.
#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/feature_map.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/parallel.hpp"

namespace lmreloc {

struct SparsePoint {
  Vec2 pixel = Vec2::Zero();  // level-4 (full resolution) coordinates
  double depth = 1.0;         // scene units, level independent
};

using SparsePointSet = std::vector<SparsePoint>;

enum class DampingMode { kLevenberg, kMarquardt };

struct LMConfig {
  double lambda_init = 0.1;
  double lambda_success_mult = 0.5;
  double lambda_fail_mult = 4.0;
  DampingMode damping = DampingMode::kMarquardt;
  double huber_gamma = 0.3;  // feature units
  int max_iters_per_level = 50;
  double step_norm_eps = 1e-7;
  int min_valid_points = 8;
  double lambda_max = 1e8;
  double max_condition = 1e12;
  // Residual norm whose Huber cost is charged for each point outside the
  // target image.
  double outside_residual_norm = 2.0;
  // Pyramid levels visited by align_coarse_to_fine, inclusive.
  int first_level = 1;
  int last_level = 4;
  int num_threads = 1;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw InvalidArgumentError(std::string("LMConfig: ") + name + " must be positive");
      }
    };
    positive(lambda_init, "lambda_init");
    positive(lambda_success_mult, "lambda_success_mult");
    positive(lambda_fail_mult, "lambda_fail_mult");
    positive(huber_gamma, "huber_gamma");
    positive(step_norm_eps, "step_norm_eps");
    positive(lambda_max, "lambda_max");
    positive(max_condition, "max_condition");
    positive(outside_residual_norm, "outside_residual_norm");
    if (max_iters_per_level <= 0) throw InvalidArgumentError("LMConfig: max_iters_per_level");
    if (min_valid_points <= 0) throw InvalidArgumentError("LMConfig: min_valid_points");
    if (first_level < 1 || last_level > 4 || first_level > last_level) {
      throw InvalidArgumentError("LMConfig: level range must satisfy 1 <= first <= last <= 4");
    }
  }
};

// ============================================================================
// Huber
// ============================================================================

[[nodiscard]] inline double huber_cost(double s, double gamma) {
  return s <= gamma ? s * s : 2.0 * gamma * s - gamma * gamma;
}

// IRLS weight of the Huber cost: 1 inside the knee, gamma / s outside.
[[nodiscard]] inline double huber_weight(double s, double gamma) {
  return s <= gamma ? 1.0 : gamma / s;
}

// One weight per point from the norms of its `channels`-long residual blocks.
[[nodiscard]] inline Eigen::VectorXd huber_weights(const Eigen::VectorXd& r, int channels,
                                                   double gamma) {
  if (!(gamma > 0.0)) throw InvalidArgumentError("huber_weights: gamma must be positive");
  const Eigen::Index n = r.size() / channels;
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w(i) = huber_weight(r.segment(i * channels, channels).norm(), gamma);
  }
  return w;
}

// ============================================================================
// Per-level problem
// ============================================================================

// Reference-side quantities that stay fixed while the pose changes.
struct LevelProblem {
  const FeatureMap* reference = nullptr;
  const FeatureMap* target = nullptr;
  CameraIntrinsics camera;
  std::vector<Vec3> points;          // reference camera frame
  std::vector<char> reference_ok;    // reference sample inside the margin
  Eigen::MatrixXd reference_values;  // D x n

  [[nodiscard]] int channels() const { return reference->channels(); }
  [[nodiscard]] std::size_t size() const { return points.size(); }
};

// `pixels` are in the coordinates of `reference` (already rescaled to the
// level), `camera` is the level's intrinsics.
[[nodiscard]] inline LevelProblem make_level_problem(const FeatureMap& reference,
                                                     const FeatureMap& target,
                                                     const std::vector<SparsePoint>& pixels,
                                                     const CameraIntrinsics& camera) {
  if (reference.channels() != target.channels()) {
    throw InvalidArgumentError("reference and target maps differ in channel count");
  }
  LevelProblem prob;
  prob.reference = &reference;
  prob.target = &target;
  prob.camera = camera;
  const int d = reference.channels();
  prob.points.reserve(pixels.size());
  prob.reference_ok.assign(pixels.size(), 0);
  prob.reference_values = Eigen::MatrixXd::Zero(d, static_cast<Eigen::Index>(pixels.size()));
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    prob.points.push_back(unproject(pixels[i].pixel, pixels[i].depth, camera));
    if (reference.in_sampling_bounds(pixels[i].pixel)) {
      prob.reference_ok[i] = 1;
      bilinear_sample_into(reference, pixels[i].pixel,
                           prob.reference_values.col(static_cast<Eigen::Index>(i)).data(),
                           nullptr, nullptr);
    }
  }
  return prob;
}

// Rescales level-4 points to `level` and builds the problem.
[[nodiscard]] inline LevelProblem make_level_problem(const FeaturePyramid& reference,
                                                     const FeaturePyramid& target,
                                                     const SparsePointSet& points,
                                                     const CameraIntrinsics& camera_full,
                                                     int level) {
  std::vector<SparsePoint> scaled;
  scaled.reserve(points.size());
  for (const SparsePoint& p : points) {
    scaled.push_back({CameraIntrinsics::pixel_to_level(p.pixel, level), p.depth});
  }
  return make_level_problem(reference.level(level), target.level(level), scaled,
                            camera_full.at_level(level));
}

struct ResidualResult {
  Eigen::VectorXd r;               // n*D, zero rows for invalid points
  std::vector<char> valid;         // per point
  std::vector<Vec2> projected;     // target pixel per point (meaningful when valid)
  std::vector<Vec3> transformed;   // point in target camera frame
  double energy = 0.0;
  int valid_count = 0;
};

namespace detail {

inline bool project_point(const LevelProblem& prob, std::size_t i, const SE3Pose& pose, Vec3& y,
                          Vec2& q) {
  if (!prob.reference_ok[i]) return false;
  y = pose * prob.points[i];
  if (!(y.z() > kMinDepth)) return false;
  q = Vec2(prob.camera.fx * y.x() / y.z() + prob.camera.cx,
           prob.camera.fy * y.y() / y.z() + prob.camera.cy);
  return prob.target->in_sampling_bounds(q);
}

}  // namespace detail

// Residual blocks F'(p') - F(p) at `pose`. Throws InsufficientOverlapError
// when fewer than min_valid_points project inside the target.
[[nodiscard]] inline ResidualResult compute_residuals(const LevelProblem& prob, const SE3Pose& pose,
                                                      const LMConfig& config) {
  const int d = prob.channels();
  const std::size_t n = prob.size();
  ResidualResult res;
  res.r = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n) * d);
  res.valid.assign(n, 0);
  res.projected.assign(n, Vec2::Zero());
  res.transformed.assign(n, Vec3::Zero());
  const double outside_cost = huber_cost(config.outside_residual_norm, config.huber_gamma);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 y;
    Vec2 q;
    if (!detail::project_point(prob, i, pose, y, q)) {
      res.energy += outside_cost;
      continue;
    }
    double* ri = res.r.data() + i * d;
    bilinear_sample_into(*prob.target, q, ri, nullptr, nullptr);
    double s2 = 0.0;
    for (int c = 0; c < d; ++c) {
      ri[c] -= prob.reference_values(c, static_cast<Eigen::Index>(i));
      s2 += ri[c] * ri[c];
    }
    res.energy += huber_cost(std::sqrt(s2), config.huber_gamma);
    res.valid[i] = 1;
    res.projected[i] = q;
    res.transformed[i] = y;
    ++res.valid_count;
  }
  if (res.valid_count < config.min_valid_points) {
    throw InsufficientOverlapError("only " + std::to_string(res.valid_count) + " of " +
                                   std::to_string(n) + " points project inside the target (need " +
                                   std::to_string(config.min_valid_points) + ")");
  }
  return res;
}

[[nodiscard]] inline ResidualResult compute_residuals(const FeatureMap& reference,
                                                      const FeatureMap& target,
                                                      const std::vector<SparsePoint>& points,
                                                      const SE3Pose& pose,
                                                      const CameraIntrinsics& camera,
                                                      const LMConfig& config) {
  return compute_residuals(make_level_problem(reference, target, points, camera), pose, config);
}

// Energy only; invalid points are charged like in compute_residuals but no
// overlap check is made.
[[nodiscard]] inline double evaluate_energy(const LevelProblem& prob, const SE3Pose& pose,
                                            const LMConfig& config) {
  const int d = prob.channels();
  const double outside_cost = huber_cost(config.outside_residual_norm, config.huber_gamma);
  double energy = 0.0;
  Eigen::VectorXd value(d);
  for (std::size_t i = 0; i < prob.size(); ++i) {
    Vec3 y;
    Vec2 q;
    if (!detail::project_point(prob, i, pose, y, q)) {
      energy += outside_cost;
      continue;
    }
    bilinear_sample_into(*prob.target, q, value.data(), nullptr, nullptr);
    const double s = (value - prob.reference_values.col(static_cast<Eigen::Index>(i))).norm();
    energy += huber_cost(s, config.huber_gamma);
  }
  return energy;
}

// d(pixel)/d(delta) for the left-composed twist at delta = 0, given the point
// y = pose * X in the target frame:
//
//   [fx/z   0   -fx x/z^2] * [I | -[y]x]
//   [ 0   fy/z  -fy y/z^2]
[[nodiscard]] inline Eigen::Matrix<double, 2, 6> projection_jacobian(const Vec3& y,
                                                                     const CameraIntrinsics& k) {
  const double zi = 1.0 / y.z();
  Eigen::Matrix<double, 2, 3> dproj;
  dproj << k.fx * zi, 0.0, -k.fx * y.x() * zi * zi, 0.0, k.fy * zi, -k.fy * y.y() * zi * zi;
  Eigen::Matrix<double, 3, 6> dy;
  dy.leftCols<3>().setIdentity();
  dy.rightCols<3>() = -skew(y);
  return dproj * dy;
}

// Stacked n*D x 6 Jacobian of the residual w.r.t. a left-composed twist;
// rows of invalid points are zero.
[[nodiscard]] inline Eigen::MatrixXd compute_jacobian(const LevelProblem& prob,
                                                      const ResidualResult& res) {
  const int d = prob.channels();
  const std::size_t n = prob.size();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * d, 6);
  Eigen::VectorXd value(d), du(d), dv(d);
  for (std::size_t i = 0; i < n; ++i) {
    if (!res.valid[i]) continue;
    bilinear_sample_into(*prob.target, res.projected[i], value.data(), du.data(), dv.data());
    const Eigen::Matrix<double, 2, 6> jp = projection_jacobian(res.transformed[i], prob.camera);
    for (int c = 0; c < d; ++c) {
      jac.row(static_cast<Eigen::Index>(i * d + c)) = du(c) * jp.row(0) + dv(c) * jp.row(1);
    }
  }
  return jac;
}

[[nodiscard]] inline Eigen::MatrixXd compute_jacobian(const LevelProblem& prob, const SE3Pose& pose,
                                                      const LMConfig& config) {
  return compute_jacobian(prob, compute_residuals(prob, pose, config));
}

struct NormalEquations {
  Mat6 H = Mat6::Zero();
  Vec6 b = Vec6::Zero();
};

// H = J^T W J, b = -J^T W r with one weight per `channels` rows. Partial sums
// are formed over fixed 64-point chunks and reduced in chunk order.
[[nodiscard]] inline NormalEquations build_normal_equations(const Eigen::MatrixXd& jac,
                                                            const Eigen::VectorXd& weights,
                                                            const Eigen::VectorXd& r, int channels,
                                                            int num_threads = 1) {
  if (jac.cols() != 6 || jac.rows() != r.size() || weights.size() * channels != r.size()) {
    throw InvalidArgumentError("build_normal_equations: inconsistent shapes");
  }
  constexpr std::size_t kChunk = 64;
  const auto n = static_cast<std::size_t>(weights.size());
  std::vector<NormalEquations> partial(chunk_count(n, kChunk));
  for_each_chunk(n, kChunk, num_threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
    NormalEquations& acc = partial[c];
    for (std::size_t i = begin; i < end; ++i) {
      const double w = weights(static_cast<Eigen::Index>(i));
      if (w == 0.0) continue;
      for (int ch = 0; ch < channels; ++ch) {
        const auto row = static_cast<Eigen::Index>(i * channels + ch);
        const Vec6 j = jac.row(row).transpose();
        acc.H.selfadjointView<Eigen::Upper>().rankUpdate(j, w);
        acc.b -= w * r(row) * j;
      }
    }
  });
  NormalEquations out;
  for (const NormalEquations& p : partial) {
    out.H += p.H;
    out.b += p.b;
  }
  out.H = out.H.selfadjointView<Eigen::Upper>();
  return out;
}

// Levenberg: H + lambda I. Marquardt: H + lambda diag(H), where diagonal
// entries below 1e-12 contribute lambda * 1e-12 instead.
[[nodiscard]] inline Mat6 damp(const Mat6& H, double lambda, DampingMode mode) {
  if (!(lambda >= 0.0)) throw InvalidArgumentError("damp: lambda must be non-negative");
  Mat6 out = H;
  for (int k = 0; k < 6; ++k) {
    if (mode == DampingMode::kLevenberg) {
      out(k, k) += lambda;
    } else {
      out(k, k) += lambda * std::max(H(k, k), 1e-12);
    }
  }
  return out;
}

// Solves H' delta = b. Throws DegenerateSystemError if H' is not positive
// definite or its condition number exceeds `max_condition`.
[[nodiscard]] inline TangentVec solve_step(const Mat6& H_damped, const Vec6& b,
                                           double max_condition = 1e12) {
  if (!H_damped.allFinite() || !b.allFinite()) {
    throw DegenerateSystemError("solve_step: non-finite system");
  }
  Eigen::SelfAdjointEigenSolver<Mat6> eig(H_damped, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > max_condition) {
    throw DegenerateSystemError("solve_step: system is singular or ill-conditioned (eigenvalues " +
                                std::to_string(lo) + " .. " + std::to_string(hi) + ")");
  }
  return H_damped.ldlt().solve(b);
}

// ============================================================================
// Per-level loop
// ============================================================================

enum class Termination { kNone, kSmallStep, kLambdaCap, kMaxIterations, kSkipped };

[[nodiscard]] inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::kSmallStep:
      return "small_step";
    case Termination::kLambdaCap:
      return "lambda_cap";
    case Termination::kMaxIterations:
      return "max_iterations";
    case Termination::kSkipped:
      return "skipped";
    case Termination::kNone:
      break;
  }
  return "none";
}

struct IterationTrace {
  int iteration = 0;
  double lambda = 0.0;  // damping used for this iteration's step
  double energy = 0.0;  // energy at the start of the iteration
  double candidate_energy = std::numeric_limits<double>::quiet_NaN();
  double step_norm = 0.0;
  bool accepted = false;
  std::string note;  // "degenerate", "insufficient_overlap", "small_step"
};

struct LevelStats {
  int level = 0;
  int iterations = 0;
  int accepted = 0;
  int rejected = 0;
  double initial_energy = 0.0;
  double final_energy = 0.0;
  double final_lambda = 0.0;
  int valid_points = 0;
  Termination termination = Termination::kNone;
  std::string failure_reason;  // non-empty when the level was skipped
  std::vector<IterationTrace> trace;
};

struct LevelResult {
  SE3Pose pose;
  LevelStats stats;
};

// LM on one level: build the system at the current pose, damp, solve, and
// accept the candidate delta [+] pose iff its energy is strictly lower
// (lambda *= 0.5), otherwise keep the pose (lambda *= 4).
[[nodiscard]] inline LevelResult align_level(const LevelProblem& prob, const SE3Pose& init_pose,
                                             const LMConfig& config) {
  config.validate();
  LevelResult out;
  out.pose = init_pose;
  LevelStats& st = out.stats;
  double lambda = config.lambda_init;
  st.final_lambda = lambda;

  ResidualResult cur;
  try {
    cur = compute_residuals(prob, init_pose, config);
  } catch (const InsufficientOverlapError& e) {
    st.termination = Termination::kSkipped;
    st.failure_reason = std::string("insufficient overlap at initial pose: ") + e.what();
    return out;
  }
  st.initial_energy = cur.energy;
  st.final_energy = cur.energy;
  st.valid_points = cur.valid_count;
  const int d = prob.channels();

  for (int it = 0; it < config.max_iters_per_level; ++it) {
    ++st.iterations;
    IterationTrace tr;
    tr.iteration = it;
    tr.lambda = lambda;
    tr.energy = cur.energy;

    auto fail = [&](const char* note) {
      tr.accepted = false;
      tr.note = note;
      ++st.rejected;
      lambda *= config.lambda_fail_mult;
    };

    const Eigen::MatrixXd jac = compute_jacobian(prob, cur);
    const Eigen::VectorXd w = huber_weights(cur.r, d, config.huber_gamma);
    const NormalEquations sys = build_normal_equations(jac, w, cur.r, d, config.num_threads);
    std::optional<TangentVec> delta;
    try {
      delta = solve_step(damp(sys.H, lambda, config.damping), sys.b, config.max_condition);
    } catch (const DegenerateSystemError&) {
      fail("degenerate");
    }
    if (delta) {
      tr.step_norm = delta->norm();
      if (tr.step_norm < config.step_norm_eps) {
        tr.note = "small_step";
        st.trace.push_back(tr);
        st.termination = Termination::kSmallStep;
        break;
      }
      const SE3Pose candidate = boxplus(*delta, out.pose);
      try {
        ResidualResult next = compute_residuals(prob, candidate, config);
        tr.candidate_energy = next.energy;
        if (next.energy < cur.energy) {
          tr.accepted = true;
          ++st.accepted;
          out.pose = candidate;
          cur = std::move(next);
          lambda *= config.lambda_success_mult;
        } else {
          fail("");
        }
      } catch (const InsufficientOverlapError&) {
        fail("insufficient_overlap");
      }
    }
    st.trace.push_back(tr);
    if (lambda > config.lambda_max) {
      st.termination = Termination::kLambdaCap;
      break;
    }
  }
  if (st.termination == Termination::kNone) st.termination = Termination::kMaxIterations;
  st.final_energy = cur.energy;
  st.final_lambda = lambda;
  st.valid_points = cur.valid_count;
  return out;
}

[[nodiscard]] inline LevelResult align_level(const FeatureMap& reference, const FeatureMap& target,
                                             const std::vector<SparsePoint>& points,
                                             const SE3Pose& init_pose,
                                             const CameraIntrinsics& camera,
                                             const LMConfig& config) {
  return align_level(make_level_problem(reference, target, points, camera), init_pose, config);
}

// ============================================================================
// Coarse-to-fine
// ============================================================================

struct AlignmentResult {
  SE3Pose pose;
  std::vector<LevelStats> levels;
  bool converged = false;
  std::string failure_reason;

  [[nodiscard]] int total_iterations() const {
    int n = 0;
    for (const auto& l : levels) n += l.iterations;
    return n;
  }
};

// Runs align_level on config.first_level .. config.last_level, each seeded
// with the previous result; lambda restarts at lambda_init on every level.
// The result counts as converged when the finest requested level ran.
[[nodiscard]] inline AlignmentResult align_coarse_to_fine(const FeaturePyramid& reference,
                                                          const FeaturePyramid& target,
                                                          const SparsePointSet& points,
                                                          const SE3Pose& init_pose,
                                                          const CameraIntrinsics& camera_full,
                                                          const LMConfig& config) {
  config.validate();
  camera_full.validate();
  if (reference.channels() != target.channels()) {
    throw InvalidArgumentError("reference and target pyramids differ in channel count");
  }
  AlignmentResult out;
  out.pose = init_pose;
  std::string reasons;
  for (int level = config.first_level; level <= config.last_level; ++level) {
    const LevelProblem prob = make_level_problem(reference, target, points, camera_full, level);
    LevelResult lr = align_level(prob, out.pose, config);
    lr.stats.level = level;
    if (lr.stats.termination == Termination::kSkipped) {
      if (!reasons.empty()) reasons += "; ";
      reasons += "level " + std::to_string(level) + ": " + lr.stats.failure_reason;
    } else {
      out.pose = lr.pose;
    }
    out.levels.push_back(std::move(lr.stats));
  }
  out.converged = !out.levels.empty() && out.levels.back().termination != Termination::kSkipped;
  if (!out.converged) out.failure_reason = reasons;
  return out;
}

}  // namespace lmreloc
