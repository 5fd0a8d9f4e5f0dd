// Toy feature learning: per-pixel D-channel maps of small synthetic pairs are
// optimized directly with the four-part loss, and alignment success from
// perturbed initial poses is tracked per epoch.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/feature_map.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/lm_align.hpp"
#include "lmreloc/losses.hpp"
#include "lmreloc/parallel.hpp"
#include "lmreloc/random.hpp"
#include "lmreloc/synth.hpp"

namespace lmreloc {

struct ToyPair {
  FeatureMap reference;
  FeatureMap target;
  CameraIntrinsics camera;
  SE3Pose gt_pose;
  SparsePointSet points;
  std::vector<Correspondence> correspondences;
};

struct ToyPairConfig {
  int size = 64;
  double focal = 64.0;
  double texture_cell = 12.0;
  int num_points = 150;
  int point_border = 8;
  MagnitudeClass magnitude = MagnitudeClass::kSmall;
};

// Level-4 baseline features of synthetic pairs; pair i uses
// derive_seed(seed, i).
[[nodiscard]] inline std::vector<ToyPair> make_toy_pairs(std::uint64_t seed, int count,
                                                         const ToyPairConfig& config = {}) {
  PairConfig pc;
  pc.scene.width = config.size;
  pc.scene.height = config.size;
  pc.scene.fx = config.focal;
  pc.scene.fy = config.focal;
  pc.scene.texture_cell = config.texture_cell;
  pc.scene.canvas_margin = 16;
  pc.magnitude = config.magnitude;
  pc.num_points = config.num_points;
  pc.point_border = config.point_border;
  std::vector<ToyPair> pairs;
  for (int i = 0; i < count; ++i) {
    BenchmarkPair bp = make_benchmark_pair(derive_seed(seed, static_cast<std::uint64_t>(i)), pc);
    ToyPair tp;
    tp.reference = std::move(bp.reference.level(4));
    tp.target = std::move(bp.target.level(4));
    tp.camera = bp.camera;
    tp.gt_pose = bp.gt_pose;
    tp.points = bp.points;
    for (const SparsePoint& p : bp.points) {
      const auto idx = static_cast<std::size_t>(p.pixel.y()) * bp.camera.width +
                       static_cast<std::size_t>(p.pixel.x());
      tp.correspondences.push_back({p.pixel, bp.correspondence[idx]});
    }
    pairs.push_back(std::move(tp));
  }
  return pairs;
}

// Mean image displacement of the pair's points between two poses.
[[nodiscard]] inline double mean_reprojection_distance(const ToyPair& pair, const SE3Pose& a,
                                                       const SE3Pose& b) {
  if (pair.points.empty()) return 0.0;
  double sum = 0.0;
  for (const SparsePoint& p : pair.points) {
    const Vec3 x = unproject(p.pixel, p.depth, pair.camera);
    const Vec3 ya = a * x;
    const Vec3 yb = b * x;
    if (!(ya.z() > kMinDepth) || !(yb.z() > kMinDepth)) {
      return std::numeric_limits<double>::infinity();
    }
    sum += (project(ya, pair.camera) - project(yb, pair.camera)).norm();
  }
  return sum / static_cast<double>(pair.points.size());
}

// exp(s * xi) * gt with a random unit-box twist direction xi, scaled so the
// points move `pixels` on average.
[[nodiscard]] inline SE3Pose perturb_by_pixels(Rng& rng, const ToyPair& pair, double pixels) {
  TangentVec xi;
  for (int k = 0; k < 3; ++k) xi(k) = uniform(rng, -0.1, 0.1);
  for (int k = 3; k < 6; ++k) xi(k) = uniform(rng, -0.02, 0.02);
  double s = 1.0;
  for (int it = 0; it < 20; ++it) {
    const double d = mean_reprojection_distance(pair, boxplus(s * xi, pair.gt_pose), pair.gt_pose);
    if (!std::isfinite(d) || d <= 0.0) {
      s *= 0.5;
      continue;
    }
    if (std::abs(d - pixels) < 1e-3 * pixels) break;
    s *= pixels / d;
  }
  return boxplus(s * xi, pair.gt_pose);
}

struct ToyTrainConfig {
  int epochs = 200;
  double learning_rate = 0.003;  // Adam step size
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  LossConfig loss;
  LMConfig lm;
  int trials_per_pair = 16;
  double perturbation_px = 5.0;
  double success_px = 1.0;  // mean reprojection error of a successful alignment
  // Gaussian noise added to the target features seen by the evaluation
  // alignment (not by training); with exact features every success would
  // converge to the ground truth and accuracy would not discriminate.
  double eval_noise_sigma = 0.05;
  int eval_every = 1;       // epochs between success evaluations; the last epoch always runs
  double divergence_factor = 10.0;
  bool standardize = true;  // re-standardize each target channel after every step
  std::uint64_t seed = 0;
  int num_threads = 1;
};

struct ToyEpoch {
  int epoch = 0;
  double total = 0.0;  // losses: mean over pairs of each pair's batch loss
  double pos = 0.0;
  double neg = 0.0;
  double gd = 0.0;
  double gn = 0.0;
  double success_rate = std::numeric_limits<double>::quiet_NaN();
  double mean_t_error = std::numeric_limits<double>::quiet_NaN();  // over successes
};

struct ToyTrainingResult {
  std::vector<FeatureMap> reference;
  std::vector<FeatureMap> target;
  std::vector<ToyEpoch> trace;
  bool aborted = false;
  std::string abort_reason;
};

struct ToyEvaluation {
  double success_rate = 0.0;
  double mean_t_error = std::numeric_limits<double>::quiet_NaN();
};

// Single-level LM from `trials_per_pair` perturbed poses per pair against a
// noisy copy of each target map. Perturbations and noise depend only on
// config.seed, so every epoch sees the same ones.
[[nodiscard]] inline ToyEvaluation evaluate_toy_alignment(const std::vector<ToyPair>& pairs,
                                                          const std::vector<FeatureMap>& ref,
                                                          const std::vector<FeatureMap>& target,
                                                          const ToyTrainConfig& config) {
  const std::size_t n = pairs.size();
  const auto trials = static_cast<std::size_t>(std::max(config.trials_per_pair, 0));
  std::vector<char> ok(n * trials, 0);
  std::vector<double> terr(n * trials, 0.0);
  for_each_chunk(n, 1, config.num_threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(derive_seed(config.seed, 0xE7A1), i));
      FeatureMap noisy = target[i];
      Rng noise_rng(derive_seed(derive_seed(config.seed, 0x4015E), i));
      for (double& v : noisy.data()) v += config.eval_noise_sigma * standard_normal(noise_rng);
      const LevelProblem prob = make_level_problem(ref[i], noisy, pairs[i].points,
                                                   pairs[i].camera);
      for (std::size_t k = 0; k < trials; ++k) {
        const SE3Pose init = perturb_by_pixels(rng, pairs[i], config.perturbation_px);
        const LevelResult lr = align_level(prob, init, config.lm);
        const bool ran = lr.stats.termination != Termination::kSkipped;
        const double err = mean_reprojection_distance(pairs[i], lr.pose, pairs[i].gt_pose);
        ok[i * trials + k] = ran && err < config.success_px;
        terr[i * trials + k] = translation_error(lr.pose.translation, pairs[i].gt_pose.translation);
      }
    }
  });
  ToyEvaluation ev;
  int successes = 0;
  double sum = 0.0;
  for (std::size_t j = 0; j < ok.size(); ++j) {
    if (ok[j]) {
      ++successes;
      sum += terr[j];
    }
  }
  ev.success_rate = ok.empty() ? 0.0 : static_cast<double>(successes) / static_cast<double>(ok.size());
  if (successes > 0) ev.mean_t_error = sum / successes;
  return ev;
}

// Adam on every entry of every target map, with a fresh batch per pair and
// epoch. Reference features at the points are tied to the target,
// F(p) = F'(p'_gt), so E_pos vanishes by construction and the parameters
// shape only the target's landscape around each correspondence. The trace reports losses on one fixed batch per pair and
// the success rate, both after the epoch's update; epoch 0 is the untrained
// state.
[[nodiscard]] inline ToyTrainingResult train_toy_features(const std::vector<ToyPair>& pairs,
                                                          const ToyTrainConfig& config) {
  if (pairs.size() < 4) throw InvalidArgumentError("train_toy_features: need at least 4 pairs");
  if (config.epochs < 0 || !(config.learning_rate >= 0.0) || config.eval_every < 1) {
    throw InvalidArgumentError("train_toy_features: invalid schedule");
  }
  config.loss.validate();
  ToyTrainingResult out;
  const std::size_t n = pairs.size();
  for (const ToyPair& p : pairs) {
    out.reference.push_back(p.reference);
    out.target.push_back(p.target);
  }
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<Moments> moments(n);
  for (std::size_t i = 0; i < n; ++i) {
    moments[i] = {std::vector<double>(pairs[i].target.size(), 0.0),
                  std::vector<double>(pairs[i].target.size(), 0.0)};
  }
  std::vector<CorrespondenceBatch> all_points(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const Correspondence& c : pairs[i].correspondences) {
      if (out.target[i].in_sampling_bounds(c.p_gt)) {
        all_points[i].samples.push_back({c.p, c.p_gt, c.p_gt, c.p_gt, c.p_gt});
      }
    }
  }
  auto retie = [&](std::size_t i) { tie_reference(out.reference[i], out.target[i], all_points[i]); };
  for (std::size_t i = 0; i < n; ++i) retie(i);

  auto batch_for = [&](std::uint64_t stream, std::size_t i) {
    const FeatureMap& r = out.reference[i];
    const FeatureMap& t = out.target[i];
    return sample_batch(derive_seed(derive_seed(config.seed, stream), i),
                        pairs[i].correspondences, r.width(), r.height(), t.width(), t.height(),
                        config.loss);
  };
  constexpr std::uint64_t kTraceStream = 0x7ACE;
  std::vector<CorrespondenceBatch> trace_batches;
  for (std::size_t i = 0; i < n; ++i) trace_batches.push_back(batch_for(kTraceStream, i));
  auto record_losses = [&](ToyEpoch& row) {
    std::vector<LossBreakdown> losses(n);
    for (std::size_t i = 0; i < n; ++i) {
      losses[i] = total_loss(out.reference[i], out.target[i], trace_batches[i], config.loss);
    }
    for (const LossBreakdown& l : losses) {
      row.total += l.total;
      row.pos += l.pos;
      row.neg += l.neg;
      row.gd += l.gd;
      row.gn += l.gn;
    }
    const double k = static_cast<double>(losses.size());
    row.total /= k;
    row.pos /= k;
    row.neg /= k;
    row.gd /= k;
    row.gn /= k;
  };
  auto evaluate_into = [&](ToyEpoch& row) {
    const ToyEvaluation ev = evaluate_toy_alignment(pairs, out.reference, out.target, config);
    row.success_rate = ev.success_rate;
    row.mean_t_error = ev.mean_t_error;
  };

  {
    ToyEpoch row;
    record_losses(row);
    evaluate_into(row);
    out.trace.push_back(row);
  }
  const double initial_total = out.trace.front().total;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    ToyEpoch row;
    row.epoch = epoch;
    const double bc1 = 1.0 - std::pow(config.adam_beta1, epoch);
    const double bc2 = 1.0 - std::pow(config.adam_beta2, epoch);
    for_each_chunk(n, 1, config.num_threads, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const CorrespondenceBatch batch = batch_for(static_cast<std::uint64_t>(epoch), i);
        const LossGradient g = sparse_loss_gradient(out.reference[i], out.target[i], batch,
                                                    config.loss, GradientMode::kTied);
        std::vector<double>& x = out.target[i].data();
        Moments& mo = moments[i];
        for (std::size_t k = 0; k < x.size(); ++k) {
          mo.m[k] = config.adam_beta1 * mo.m[k] + (1.0 - config.adam_beta1) * g.target[k];
          mo.v[k] = config.adam_beta2 * mo.v[k] + (1.0 - config.adam_beta2) * g.target[k] * g.target[k];
          x[k] -= config.learning_rate * (mo.m[k] / bc1) / (std::sqrt(mo.v[k] / bc2) + config.adam_eps);
        }
        if (config.standardize) {
          for (int ch = 0; ch < out.target[i].channels(); ++ch) {
            double mean, stddev;
            detail::channel_stats(out.target[i], ch, mean, stddev);
            detail::apply_stats(out.target[i], ch, mean, stddev);
          }
        }
        retie(i);
      }
    });
    record_losses(row);
    if (!std::isfinite(row.total) ||
        row.total > config.divergence_factor * std::max(initial_total, 1e-12)) {
      out.trace.push_back(row);
      out.aborted = true;
      out.abort_reason = "loss diverged at epoch " + std::to_string(epoch);
      return out;
    }
    if (epoch % config.eval_every == 0 || epoch == config.epochs) evaluate_into(row);
    out.trace.push_back(row);
  }
  return out;
}

}  // namespace lmreloc
