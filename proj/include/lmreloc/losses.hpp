// Feature-learning losses that shape the LM convergence basin, one per
// situation a point can be in during alignment:
//
//   E_pos  point at its true correspondence: residual should vanish
//   E_neg  point anywhere in the image: residual should exceed a margin
//   E_GD   point ~5 px off: a heavily damped 2x2 step should move it closer
//   E_GN   point within 1 px: the Gauss-Newton step should land on the truth
//
// Step sign: the 2x2 systems use b = J^T r and step DOWNHILL,
// p_after = p - (H + mu I)^-1 b, which is the same update as the pose solver
// (b_pose = -J^T W r, delta = +H'^-1 b_pose).
#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

#include <cmath>
#include <algorithm>
#include <array>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/feature_map.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/random.hpp"

namespace lmreloc {

struct LossWeights {
  double pos = 1.0;
  double neg = 1.0;
  double gd = 1.0;
  double gn = 1.0;
};

struct LossConfig {
  double margin = 1.0;     // M, squared feature units
  double lambda_f = 2.0;   // damping of the GD step
  double gd_margin = 0.1;  // delta, squared pixels
  double epsilon = 1e-6;   // regularizer of the GN step
  double gd_radius = 5.0;  // pixels
  double gn_radius = 1.0;  // pixels
  double det_floor = 1e-12;
  LossWeights weights;

  void validate() const {
    if (!(margin > 0.0) || !(lambda_f > 0.0) || !(gd_margin > 0.0) || !(epsilon > 0.0) ||
        !(gd_radius > 0.0) || !(gn_radius > 0.0) || !(det_floor > 0.0)) {
      throw InvalidArgumentError("LossConfig: all parameters must be positive");
    }
    if (!(epsilon < lambda_f / 1000.0)) {
      throw InvalidArgumentError("LossConfig: epsilon must be below lambda_f / 1000");
    }
  }
};

namespace detail {

inline Eigen::VectorXd sample_value(const FeatureMap& map, const Vec2& q) {
  if (!map.in_sampling_bounds(q)) {
    throw OutOfBoundsError("loss sample (" + std::to_string(q.x()) + ", " +
                           std::to_string(q.y()) + ") outside interpolation margin");
  }
  Eigen::VectorXd v(map.channels());
  bilinear_sample_into(map, q, v.data(), nullptr, nullptr);
  return v;
}

}  // namespace detail

// |F'(p'_gt) - F(p)|^2
[[nodiscard]] inline double e_pos(const FeatureMap& ref, const FeatureMap& target, const Vec2& p,
                                  const Vec2& p_gt) {
  return (detail::sample_value(target, p_gt) - detail::sample_value(ref, p)).squaredNorm();
}

// max(M - |F'(p'_neg) - F(p)|^2, 0)
[[nodiscard]] inline double e_neg(const FeatureMap& ref, const FeatureMap& target, const Vec2& p,
                                  const Vec2& p_neg, double margin) {
  const double d2 =
      (detail::sample_value(target, p_neg) - detail::sample_value(ref, p)).squaredNorm();
  return std::max(margin - d2, 0.0);
}

struct PointGNSystem {
  Eigen::VectorXd r;   // D
  Eigen::MatrixX2d J;  // D x 2
  Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
};

// r = F'(p') - F(p), J = dF'/dp' at p', H = J^T J, b = J^T r.
[[nodiscard]] inline PointGNSystem point_gn_system(const FeatureMap& ref,
                                                   const FeatureMap& target, const Vec2& p,
                                                   const Vec2& p_target) {
  const FeatureSample s = bilinear_sample(target, p_target);
  PointGNSystem sys;
  sys.r = s.value - detail::sample_value(ref, p);
  sys.J = s.grad;
  sys.H = sys.J.transpose() * sys.J;
  sys.b = sys.J.transpose() * sys.r;
  return sys;
}

// p' - (H + mu I)^-1 b
[[nodiscard]] inline Vec2 damped_point_step(const PointGNSystem& sys, const Vec2& p_target,
                                            double mu) {
  const Eigen::Matrix2d hd = sys.H + mu * Eigen::Matrix2d::Identity();
  return p_target - hd.inverse() * sys.b;
}

[[nodiscard]] inline double gd_hinge(const Vec2& p_after, const Vec2& p_start, const Vec2& p_gt,
                                     double gd_margin) {
  return std::max((p_after - p_gt).squaredNorm() - (p_start - p_gt).squaredNorm() + gd_margin,
                  0.0);
}

// Zero iff the lambda_f-damped step from p'_grad reduces the squared distance
// to p'_gt by at least gd_margin.
[[nodiscard]] inline double e_gd(const FeatureMap& ref, const FeatureMap& target, const Vec2& p,
                                 const Vec2& p_grad, const Vec2& p_gt, const LossConfig& config) {
  const PointGNSystem sys = point_gn_system(ref, target, p, p_grad);
  return gd_hinge(damped_point_step(sys, p_grad, config.lambda_f), p_grad, p_gt, config.gd_margin);
}

// 1/2 e^T H e + log(2 pi) - 1/2 log|H| with e = p_after - p_gt; |H| is the
// undamped determinant, floored at det_floor.
[[nodiscard]] inline double gn_loss_value(const Eigen::Matrix2d& H, const Vec2& p_after,
                                          const Vec2& p_gt, double det_floor) {
  const Vec2 e = p_after - p_gt;
  return 0.5 * e.dot(H * e) + std::log(2.0 * std::numbers::pi) -
         0.5 * std::log(std::max(H.determinant(), det_floor));
}

[[nodiscard]] inline double e_gn(const FeatureMap& ref, const FeatureMap& target, const Vec2& p,
                                 const Vec2& p_gn, const Vec2& p_gt, const LossConfig& config) {
  const PointGNSystem sys = point_gn_system(ref, target, p, p_gn);
  return gn_loss_value(sys.H, damped_point_step(sys, p_gn, config.epsilon), p_gt,
                       config.det_floor);
}

// ============================================================================
// Correspondence sampling
// ============================================================================

struct Correspondence {
  Vec2 p;     // on the reference map
  Vec2 p_gt;  // on the target map
};

struct CorrespondenceSample {
  Vec2 p;
  Vec2 p_gt;
  Vec2 p_neg;   // uniform over the target
  Vec2 p_grad;  // on the gd_radius ring around p_gt
  Vec2 p_gn;    // within gn_radius of p_gt
};

struct CorrespondenceBatch {
  std::vector<CorrespondenceSample> samples;
  std::uint64_t seed = 0;
};

// Draws one negative of each kind per ground-truth correspondence. Pairs
// whose p or p_gt violate the interpolation margin, or whose ring does not fit
// in the image at any tried angle, are skipped.
[[nodiscard]] inline CorrespondenceBatch sample_batch(std::uint64_t seed,
                                                      const std::vector<Correspondence>& gt,
                                                      int ref_width, int ref_height,
                                                      int target_width, int target_height,
                                                      const LossConfig& config) {
  config.validate();
  if (gt.empty()) throw InvalidArgumentError("sample_batch: no ground-truth correspondences");
  const double lo = kInterpolationMargin;
  const double hi_x = target_width - 1 - kInterpolationMargin;
  const double hi_y = target_height - 1 - kInterpolationMargin;
  if (hi_x - lo < 2.0 * config.gd_radius || hi_y - lo < 2.0 * config.gd_radius) {
    throw InvalidArgumentError("sample_batch: target image too small for the sampling radii");
  }
  auto inside_target = [&](const Vec2& q) {
    return q.x() >= lo && q.y() >= lo && q.x() <= hi_x && q.y() <= hi_y;
  };
  auto inside_ref = [&](const Vec2& q) {
    return q.x() >= lo && q.y() >= lo && q.x() <= ref_width - 1 - lo &&
           q.y() <= ref_height - 1 - lo;
  };
  CorrespondenceBatch batch;
  batch.seed = seed;
  Rng rng(seed);
  constexpr int kTries = 64;
  for (const Correspondence& c : gt) {
    if (!inside_ref(c.p) || !inside_target(c.p_gt)) continue;
    CorrespondenceSample s{c.p, c.p_gt, Vec2::Zero(), Vec2::Zero(), Vec2::Zero()};
    s.p_neg = Vec2(uniform(rng, lo, hi_x), uniform(rng, lo, hi_y));
    bool ring_ok = false;
    for (int k = 0; k < kTries && !ring_ok; ++k) {
      const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      s.p_grad = c.p_gt + config.gd_radius * Vec2(std::cos(angle), std::sin(angle));
      ring_ok = inside_target(s.p_grad);
    }
    bool gn_ok = false;
    for (int k = 0; k < kTries && !gn_ok; ++k) {
      const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const double radius = config.gn_radius * std::sqrt(uniform01(rng));
      s.p_gn = c.p_gt + radius * Vec2(std::cos(angle), std::sin(angle));
      gn_ok = inside_target(s.p_gn);
    }
    if (ring_ok && gn_ok) batch.samples.push_back(s);
  }
  if (batch.samples.empty()) {
    throw InvalidArgumentError("sample_batch: no correspondence admits all sampling regimes");
  }
  return batch;
}

// ============================================================================
// Total loss
// ============================================================================

struct SampleLosses {
  double pos = 0.0;
  double neg = 0.0;
  double gd = 0.0;
  double gn = 0.0;
};

struct LossBreakdown {
  double pos = 0.0;  // term means over the batch
  double neg = 0.0;
  double gd = 0.0;
  double gn = 0.0;
  double total = 0.0;
  std::vector<SampleLosses> per_sample;
};

[[nodiscard]] inline SampleLosses sample_losses(const FeatureMap& ref, const FeatureMap& target,
                                                const CorrespondenceSample& s,
                                                const LossConfig& config) {
  return {e_pos(ref, target, s.p, s.p_gt), e_neg(ref, target, s.p, s.p_neg, config.margin),
          e_gd(ref, target, s.p, s.p_grad, s.p_gt, config),
          e_gn(ref, target, s.p, s.p_gn, s.p_gt, config)};
}

// Weighted sum of the four per-term means.
[[nodiscard]] inline LossBreakdown total_loss(const FeatureMap& ref, const FeatureMap& target,
                                              const CorrespondenceBatch& batch,
                                              const LossConfig& config) {
  config.validate();
  if (ref.channels() != target.channels()) {
    throw InvalidArgumentError("total_loss: channel counts differ");
  }
  LossBreakdown out;
  if (batch.samples.empty()) return out;
  out.per_sample.reserve(batch.samples.size());
  for (const CorrespondenceSample& s : batch.samples) {
    const SampleLosses l = sample_losses(ref, target, s, config);
    out.pos += l.pos;
    out.neg += l.neg;
    out.gd += l.gd;
    out.gn += l.gn;
    out.per_sample.push_back(l);
  }
  const double n = static_cast<double>(batch.samples.size());
  out.pos /= n;
  out.neg /= n;
  out.gd /= n;
  out.gn /= n;
  const LossWeights& w = config.weights;
  out.total = w.pos * out.pos + w.neg * out.neg + w.gd * out.gd + w.gn * out.gn;
  return out;
}

// ============================================================================
// Finite-difference gradients
// ============================================================================

enum class MapSide { kReference, kTarget };

inline constexpr std::size_t kMaxFdEntries = 10000;

// Central differences of total_loss with respect to the listed entries
// (indices into the map's data()) of one map, recomputing the full loss per
// evaluation.
[[nodiscard]] inline std::vector<double> loss_gradient_fd(const FeatureMap& ref,
                                                          const FeatureMap& target,
                                                          const CorrespondenceBatch& batch,
                                                          const LossConfig& config, MapSide side,
                                                          const std::vector<std::size_t>& entries,
                                                          double step = 1e-4) {
  if (entries.size() > kMaxFdEntries) {
    throw InvalidArgumentError("loss_gradient_fd: at most 10^4 entries per call");
  }
  FeatureMap r = ref;
  FeatureMap t = target;
  FeatureMap& m = side == MapSide::kReference ? r : t;
  std::vector<double> grad(entries.size());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    double& x = m.data().at(entries[k]);
    const double x0 = x;
    x = x0 + step;
    const double up = total_loss(r, t, batch, config).total;
    x = x0 - step;
    const double down = total_loss(r, t, batch, config).total;
    x = x0;
    grad[k] = (up - down) / (2.0 * step);
  }
  return grad;
}

namespace detail {

// Data indices of the bilinear cell used when sampling `map` at q.
inline std::array<std::size_t, 4> cell_pixels(const FeatureMap& map, const Vec2& q) {
  int x0 = static_cast<int>(std::floor(q.x()));
  int y0 = static_cast<int>(std::floor(q.y()));
  x0 = std::min(x0, map.width() - 2);
  y0 = std::min(y0, map.height() - 2);
  return {map.index(y0, x0), map.index(y0, x0 + 1), map.index(y0 + 1, x0),
          map.index(y0 + 1, x0 + 1)};
}

}  // namespace detail

struct LossGradient {
  std::vector<double> reference;  // same layout as ref.data()
  std::vector<double> target;
};

// kTied treats the target map as the only parameters: before every
// evaluation the reference pixel of each sample is rewritten with the target
// features at its ground-truth correspondence, F(p) = F'(p'_gt). Sample
// reference pixels must then be integer.
enum class GradientMode { kIndependent, kTied };

// Writes F'(p'_gt) into the reference pixel of every sample.
inline void tie_reference(FeatureMap& ref, const FeatureMap& target,
                          const CorrespondenceBatch& batch) {
  for (const CorrespondenceSample& s : batch.samples) {
    const int c = static_cast<int>(s.p.x());
    const int r = static_cast<int>(s.p.y());
    if (c != s.p.x() || r != s.p.y()) {
      throw InvalidArgumentError("tie_reference: reference pixels must be integer");
    }
    bilinear_sample_into(target, s.p_gt, &ref.at(r, c, 0), nullptr, nullptr);
  }
}

// Central-difference gradient of total_loss with respect to every entry of
// both maps (kIndependent) or of the target map alone (kTied). Each term of
// each sample depends only on the bilinear cells it samples, so an entry is
// differenced through the terms that touch it rather than through the whole
// batch; entries touched by no sample get 0.
[[nodiscard]] inline LossGradient sparse_loss_gradient(FeatureMap& ref, FeatureMap& target,
                                                       const CorrespondenceBatch& batch,
                                                       const LossConfig& config,
                                                       GradientMode mode = GradientMode::kIndependent,
                                                       double step = 1e-4) {
  config.validate();
  LossGradient g;
  g.reference.assign(ref.size(), 0.0);
  g.target.assign(target.size(), 0.0);
  if (batch.samples.empty()) return g;
  const bool tied = mode == GradientMode::kTied;
  if (tied) tie_reference(ref, target, batch);
  const double n = static_cast<double>(batch.samples.size());
  const int d = ref.channels();
  const LossWeights& w = config.weights;

  for (const CorrespondenceSample& s : batch.samples) {
    struct Term {
      double weight;
      Vec2 q;
      int kind;
    };
    const std::array<Term, 4> terms{{{w.pos, s.p_gt, 0},
                                     {w.neg, s.p_neg, 1},
                                     {w.gd, s.p_grad, 2},
                                     {w.gn, s.p_gn, 3}}};
    const int pr = static_cast<int>(s.p.y());
    const int pc = static_cast<int>(s.p.x());
    for (const Term& term : terms) {
      if (term.weight == 0.0) continue;
      auto eval = [&]() {
        if (tied) bilinear_sample_into(target, s.p_gt, &ref.at(pr, pc, 0), nullptr, nullptr);
        switch (term.kind) {
          case 0:
            return e_pos(ref, target, s.p, s.p_gt);
          case 1:
            return e_neg(ref, target, s.p, s.p_neg, config.margin);
          case 2:
            return e_gd(ref, target, s.p, s.p_grad, s.p_gt, config);
          default:
            return e_gn(ref, target, s.p, s.p_gn, s.p_gt, config);
        }
      };
      const double scale = term.weight / (n * 2.0 * step);
      auto difference = [&](std::vector<double>& data, std::vector<double>& out,
                            const std::vector<std::size_t>& pixels) {
        for (std::size_t base : pixels) {
          for (int c = 0; c < d; ++c) {
            double& x = data[base + c];
            const double x0 = x;
            x = x0 + step;
            const double up = eval();
            x = x0 - step;
            const double down = eval();
            x = x0;
            out[base + c] += scale * (up - down);
          }
        }
      };
      const auto qcell = detail::cell_pixels(target, term.q);
      std::vector<std::size_t> target_pixels(qcell.begin(), qcell.end());
      if (tied) {
        const auto gcell = detail::cell_pixels(target, s.p_gt);
        target_pixels.insert(target_pixels.end(), gcell.begin(), gcell.end());
        std::sort(target_pixels.begin(), target_pixels.end());
        target_pixels.erase(std::unique(target_pixels.begin(), target_pixels.end()),
                            target_pixels.end());
      } else {
        const auto rcell = detail::cell_pixels(ref, s.p);
        difference(ref.data(), g.reference, {rcell.begin(), rcell.end()});
      }
      difference(target.data(), g.target, target_pixels);
      if (tied) bilinear_sample_into(target, s.p_gt, &ref.at(pr, pc, 0), nullptr, nullptr);
    }
  }
  return g;
}

}  // namespace lmreloc
