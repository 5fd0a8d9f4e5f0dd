// Pose-error metrics, cumulative error curves and their AUC, the benchmark
// runner and report comparison.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "lmreloc/dataset.hpp"
#include "lmreloc/errors.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/init.hpp"
#include "lmreloc/io.hpp"
#include "lmreloc/lm_align.hpp"
#include "lmreloc/parallel.hpp"

namespace lmreloc {

// ============================================================================
// Cumulative curves
// ============================================================================

inline constexpr int kCurveBins = 500;

struct CumulativeCurve {
  std::vector<double> thresholds;  // k * max / 500, k = 0..500
  std::vector<double> fraction;    // share of errors <= threshold
};

// Errors may be +inf (non-converged trials); NaN counts as +inf.
[[nodiscard]] inline CumulativeCurve cumulative_curve(const std::vector<double>& errors,
                                                      double max_threshold) {
  if (errors.empty()) throw InvalidArgumentError("cumulative_curve: no errors");
  if (!(max_threshold > 0.0)) {
    throw InvalidArgumentError("cumulative_curve: max_threshold must be positive");
  }
  std::vector<double> sorted;
  sorted.reserve(errors.size());
  for (double e : errors) {
    if (e < 0.0) throw InvalidArgumentError("cumulative_curve: negative error");
    sorted.push_back(std::isnan(e) ? std::numeric_limits<double>::infinity() : e);
  }
  std::sort(sorted.begin(), sorted.end());
  CumulativeCurve c;
  const double n = static_cast<double>(sorted.size());
  for (int k = 0; k <= kCurveBins; ++k) {
    const double t = k * max_threshold / kCurveBins;
    c.thresholds.push_back(t);
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    c.fraction.push_back(static_cast<double>(count) / n);
  }
  return c;
}

// Trapezoidal area under the cumulative curve, normalized by max_threshold,
// in percent.
[[nodiscard]] inline double auc(const std::vector<double>& errors, double max_threshold) {
  const CumulativeCurve c = cumulative_curve(errors, max_threshold);
  double area = 0.0;
  for (int k = 0; k < kCurveBins; ++k) {
    area += 0.5 * (c.fraction[k] + c.fraction[k + 1]) * (c.thresholds[k + 1] - c.thresholds[k]);
  }
  return 100.0 * area / max_threshold;
}

// ============================================================================
// Benchmark
// ============================================================================

enum class InitMode { kIdentity, kCorr };

[[nodiscard]] inline InitMode parse_init_mode(const std::string& s) {
  if (s == "identity") return InitMode::kIdentity;
  if (s == "corr") return InitMode::kCorr;
  throw InvalidArgumentError("init must be identity or corr, got '" + s + "'");
}

[[nodiscard]] inline const char* to_string(InitMode m) {
  return m == InitMode::kIdentity ? "identity" : "corr";
}

struct TrialRecord {
  std::string pair_id;
  std::string magnitude;
  std::string photometric;
  std::uint64_t seed = 0;
  SE3Pose init_pose;
  SE3Pose estimate;
  SE3Pose gt_pose;
  double t_error = std::numeric_limits<double>::infinity();      // scene units
  double r_error_deg = std::numeric_limits<double>::infinity();  // degrees
  bool converged = false;
  int iterations = 0;
  double wall_time = 0.0;  // seconds
  std::string failure;     // hard error or skipped-level reason

  // Error entering the cumulative curves: infinite unless converged.
  [[nodiscard]] double curve_t_error() const {
    return converged ? t_error : std::numeric_limits<double>::infinity();
  }
  [[nodiscard]] double curve_r_error() const {
    return converged ? r_error_deg : std::numeric_limits<double>::infinity();
  }
};

struct BenchmarkOptions {
  InitMode init = InitMode::kIdentity;
  InitConfig init_config;
  double t_max = 0.5;
  double r_max_deg = 0.5;
  int num_threads = 1;
  bool include_timing = false;  // wall times in the JSON report
};

struct ClassSummary {
  int trials = 0;
  int converged = 0;
  double t_auc = 0.0;
  double r_auc = 0.0;
};

struct BenchmarkReport {
  int schema_version = 1;
  std::string init_mode;
  double t_max = 0.5;
  double r_max_deg = 0.5;
  std::vector<TrialRecord> trials;
  double t_auc = 0.0;
  double r_auc = 0.0;
  int hard_failures = 0;  // pairs that raised an error
  std::map<std::string, ClassSummary> per_class;
};

inline void summarize(BenchmarkReport& report) {
  report.per_class.clear();
  report.hard_failures = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_class;
  std::vector<double> te, re;
  for (const TrialRecord& t : report.trials) {
    te.push_back(t.curve_t_error());
    re.push_back(t.curve_r_error());
    auto& [ct, cr] = by_class[t.magnitude];
    ct.push_back(t.curve_t_error());
    cr.push_back(t.curve_r_error());
    ClassSummary& s = report.per_class[t.magnitude];
    ++s.trials;
    if (t.converged) ++s.converged;
    if (t.failure.rfind("error: ", 0) == 0) ++report.hard_failures;
  }
  if (!te.empty()) {
    report.t_auc = auc(te, report.t_max);
    report.r_auc = auc(re, report.r_max_deg);
  }
  for (auto& [cls, errs] : by_class) {
    report.per_class[cls].t_auc = auc(errs.first, report.t_max);
    report.per_class[cls].r_auc = auc(errs.second, report.r_max_deg);
  }
}

// Aligns one pair; errors are caught and recorded, never thrown.
[[nodiscard]] inline TrialRecord run_trial(const Manifest& manifest, std::size_t i,
                                           const LMConfig& lm, const BenchmarkOptions& options) {
  const ManifestPair& mp = manifest.pairs[i];
  TrialRecord rec;
  rec.pair_id = mp.id;
  rec.magnitude = to_string(mp.magnitude);
  rec.photometric = mp.photometric;
  rec.seed = mp.seed;
  rec.gt_pose = mp.gt_pose;
  const auto start = std::chrono::steady_clock::now();
  try {
    const LoadedPair pair = load_manifest_pair(manifest, i);
    if (options.init == InitMode::kCorr) {
      rec.init_pose = corr_pose_init(pair.reference, pair.target, pair.points.points,
                                     pair.points.camera, lm, options.init_config)
                          .pose;
    }
    const AlignmentResult res = align_coarse_to_fine(pair.reference, pair.target,
                                                     pair.points.points, rec.init_pose,
                                                     pair.points.camera, lm);
    rec.estimate = res.pose;
    rec.converged = res.converged;
    rec.iterations = res.total_iterations();
    rec.failure = res.failure_reason;
    rec.t_error = translation_error(res.pose.translation, mp.gt_pose.translation);
    rec.r_error_deg = rotation_error(res.pose.rotation, mp.gt_pose.rotation);
  } catch (const std::exception& e) {
    rec.converged = false;
    rec.failure = std::string("error: ") + e.what();
  }
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

// Pairs run in parallel; each writes only its own record, so the report does
// not depend on the thread count.
[[nodiscard]] inline BenchmarkReport run_benchmark(const Manifest& manifest, const LMConfig& lm,
                                                   const BenchmarkOptions& options) {
  lm.validate();
  if (!(options.t_max > 0.0) || !(options.r_max_deg > 0.0)) {
    throw InvalidArgumentError("benchmark: AUC thresholds must be positive");
  }
  BenchmarkReport report;
  report.init_mode = to_string(options.init);
  report.t_max = options.t_max;
  report.r_max_deg = options.r_max_deg;
  report.trials.resize(manifest.pairs.size());
  for_each_chunk(manifest.pairs.size(), 1, options.num_threads,
                 [&](std::size_t, std::size_t begin, std::size_t end) {
                   for (std::size_t i = begin; i < end; ++i) {
                     report.trials[i] = run_trial(manifest, i, lm, options);
                   }
                 });
  summarize(report);
  return report;
}

// ============================================================================
// Report files
// ============================================================================

// Fixed CSV columns, one row per trial. No timing, so the file is a pure
// function of the manifest and configs.
inline constexpr const char* kReportCsvHeader =
    "pair_id,class,photometric,seed,converged,iterations,t_error,r_error_deg,failure";

[[nodiscard]] inline std::string report_to_csv(const BenchmarkReport& report) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const TrialRecord& t : report.trials) {
    std::string failure = t.failure;
    std::replace(failure.begin(), failure.end(), '"', '\'');
    std::replace(failure.begin(), failure.end(), '\n', ' ');
    out += t.pair_id + "," + t.magnitude + "," + t.photometric + "," + std::to_string(t.seed) +
           "," + (t.converged ? "1" : "0") + "," + std::to_string(t.iterations) + "," +
           format_double(t.t_error) + "," + format_double(t.r_error_deg) + ",\"" + failure +
           "\"\n";
  }
  return out;
}

[[nodiscard]] inline nlohmann::json report_to_json(const BenchmarkReport& report,
                                                   bool include_timing = false) {
  nlohmann::json trials = nlohmann::json::array();
  for (const TrialRecord& t : report.trials) {
    nlohmann::json j = {{"pair_id", t.pair_id},
                        {"class", t.magnitude},
                        {"photometric", t.photometric},
                        {"seed", t.seed},
                        {"init_pose", format_pose(t.init_pose)},
                        {"estimate", format_pose(t.estimate)},
                        {"gt_pose", format_pose(t.gt_pose)},
                        {"t_error", json_number(t.t_error)},
                        {"r_error_deg", json_number(t.r_error_deg)},
                        {"converged", t.converged},
                        {"iterations", t.iterations},
                        {"failure", t.failure}};
    if (include_timing) j["wall_time"] = t.wall_time;
    trials.push_back(j);
  }
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [cls, s] : report.per_class) {
    classes[cls] = {{"trials", s.trials},
                    {"converged", s.converged},
                    {"t_auc", s.t_auc},
                    {"r_auc", s.r_auc}};
  }
  return {{"schema_version", report.schema_version},
          {"init", report.init_mode},
          {"t_max", report.t_max},
          {"r_max_deg", report.r_max_deg},
          {"t_auc", report.t_auc},
          {"r_auc", report.r_auc},
          {"hard_failures", report.hard_failures},
          {"classes", classes},
          {"trials", trials}};
}

[[nodiscard]] inline BenchmarkReport report_from_json(const nlohmann::json& j) {
  BenchmarkReport r;
  try {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1) throw FormatError("report: unsupported schema version");
    r.init_mode = j.at("init").get<std::string>();
    r.t_max = j.at("t_max").get<double>();
    r.r_max_deg = j.at("r_max_deg").get<double>();
    auto number = [](const nlohmann::json& v) {
      return v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
    };
    for (const auto& t : j.at("trials")) {
      TrialRecord rec;
      rec.pair_id = t.at("pair_id").get<std::string>();
      rec.magnitude = t.at("class").get<std::string>();
      rec.photometric = t.at("photometric").get<std::string>();
      rec.seed = t.at("seed").get<std::uint64_t>();
      rec.init_pose = parse_pose(t.at("init_pose").get<std::string>());
      rec.estimate = parse_pose(t.at("estimate").get<std::string>());
      rec.gt_pose = parse_pose(t.at("gt_pose").get<std::string>());
      rec.t_error = number(t.at("t_error"));
      rec.r_error_deg = number(t.at("r_error_deg"));
      rec.converged = t.at("converged").get<bool>();
      rec.iterations = t.at("iterations").get<int>();
      rec.failure = t.at("failure").get<std::string>();
      rec.wall_time = t.value("wall_time", 0.0);
      r.trials.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  summarize(r);
  return r;
}

[[nodiscard]] inline BenchmarkReport load_report(const std::string& path) {
  try {
    return report_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ============================================================================
// Comparison
// ============================================================================

struct DeltaRow {
  std::string scope;  // "all" or a class label
  std::string metric;
  double a = 0.0;
  double b = 0.0;
  double delta = 0.0;  // b - a
};

// Per-metric deltas (b - a) overall and per class. Both reports must cover
// the same pair ids in the same order.
[[nodiscard]] inline std::vector<DeltaRow> compare_reports(const BenchmarkReport& a,
                                                           const BenchmarkReport& b) {
  if (a.trials.size() != b.trials.size()) {
    throw InvalidArgumentError("compare: reports have different trial counts");
  }
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    if (a.trials[i].pair_id != b.trials[i].pair_id) {
      throw InvalidArgumentError("compare: pair id mismatch at row " + std::to_string(i) + " ('" +
                                 a.trials[i].pair_id + "' vs '" + b.trials[i].pair_id + "')");
    }
  }
  std::vector<DeltaRow> rows;
  auto add = [&](const std::string& scope, const std::string& metric, double x, double y) {
    rows.push_back({scope, metric, x, y, y - x});
  };
  auto rate = [](int k, int n) { return n == 0 ? 0.0 : static_cast<double>(k) / n; };
  int ca = 0, cb = 0;
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    ca += a.trials[i].converged;
    cb += b.trials[i].converged;
  }
  const int n = static_cast<int>(a.trials.size());
  add("all", "t_auc", a.t_auc, b.t_auc);
  add("all", "r_auc", a.r_auc, b.r_auc);
  add("all", "converged_rate", rate(ca, n), rate(cb, n));
  for (const auto& [cls, sa] : a.per_class) {
    const ClassSummary& sb = b.per_class.at(cls);
    add(cls, "t_auc", sa.t_auc, sb.t_auc);
    add(cls, "r_auc", sa.r_auc, sb.r_auc);
    add(cls, "converged_rate", rate(sa.converged, sa.trials), rate(sb.converged, sb.trials));
  }
  return rows;
}

[[nodiscard]] inline std::string format_delta_table(const std::vector<DeltaRow>& rows) {
  std::string out = "scope,metric,a,b,delta\n";
  for (const DeltaRow& r : rows) {
    out += r.scope + "," + r.metric + "," + format_double(r.a) + "," + format_double(r.b) + "," +
           format_double(r.delta) + "\n";
  }
  return out;
}

}  // namespace lmreloc
