#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "lmreloc/dataset.hpp"
#include "lmreloc/eval.hpp"
#include "lmreloc/random.hpp"

using namespace lmreloc;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

TrialRecord row(const std::string& id, const std::string& cls, double t, double r, bool ok) {
  TrialRecord rec;
  rec.pair_id = id;
  rec.magnitude = cls;
  rec.photometric = "clean";
  rec.t_error = t;
  rec.r_error_deg = r;
  rec.converged = ok;
  return rec;
}

BenchmarkReport report_of(std::vector<TrialRecord> trials) {
  BenchmarkReport r;
  r.trials = std::move(trials);
  summarize(r);
  return r;
}

// Small on-disk dataset shared by the benchmark tests.
class BenchmarkTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "lmreloc_eval_ds";
    fs::remove_all(dir_);
    DatasetConfig dc;
    dc.seed = 3;
    dc.pairs_zero = 2;
    dc.pairs_small = 2;
    dc.pairs_medium = 1;
    dc.pairs_large = 1;
    (void)build_dataset(dc, dir_.string());
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static Manifest manifest() { return load_manifest((dir_ / "manifest.json").string()); }

  static inline fs::path dir_;
};

}  // namespace

TEST(Curve, AllZeroErrorsGiveConstantOne) {
  const CumulativeCurve c = cumulative_curve({0.0, 0.0, 0.0}, 0.5);
  ASSERT_EQ(c.fraction.size(), 501u);
  for (double f : c.fraction) EXPECT_EQ(f, 1.0);
  EXPECT_EQ(auc({0.0, 0.0}, 0.5), 100.0);
}

TEST(Curve, ErrorsBeyondMaxGiveConstantZero) {
  const CumulativeCurve c = cumulative_curve({0.6, kInf, 3.0}, 0.5);
  for (double f : c.fraction) EXPECT_EQ(f, 0.0);
  EXPECT_EQ(auc({0.6, 0.7}, 0.5), 0.0);
}

TEST(Curve, TwoPointSteps) {
  const CumulativeCurve c = cumulative_curve({0.1, 0.3}, 0.5);
  EXPECT_EQ(c.thresholds[100], 0.1);
  EXPECT_EQ(c.fraction[99], 0.0);
  EXPECT_EQ(c.fraction[100], 0.5);
  EXPECT_EQ(c.fraction[299], 0.5);
  EXPECT_EQ(c.fraction[300], 1.0);
  EXPECT_EQ(c.fraction.back(), 1.0);
  // Step integral 0.3 plus a quarter bin (0.25 * 0.001) of trapezoid
  // overshoot at each step: 0.3005 / 0.5 = 60.1 %.
  EXPECT_NEAR(auc({0.1, 0.3}, 0.5), 60.1, 1e-9);
}

TEST(Curve, UniformErrorsGiveHalfArea) {
  Rng rng(12);
  std::vector<double> e(100000);
  for (double& v : e) v = uniform(rng, 0.0, 2.0);
  EXPECT_NEAR(auc(e, 2.0), 50.0, 0.5);
}

TEST(Curve, NonConvergedAndNanCountAsInfinite) {
  EXPECT_EQ(cumulative_curve({std::nan(""), 0.0}, 1.0).fraction.back(), 0.5);
  const TrialRecord r = row("a", "small", 0.0, 0.0, false);
  EXPECT_EQ(r.curve_t_error(), kInf);
  const BenchmarkReport rep = report_of({r, row("b", "small", 0.0, 0.0, true)});
  EXPECT_NEAR(rep.t_auc, 50.0, 1e-12);
}

TEST(Curve, MonotoneAndBounded) {
  Rng rng(13);
  std::vector<double> e(50);
  for (double& v : e) v = uniform(rng, 0.0, 0.6);
  double prev = auc(e, 0.5);
  for (int i = 0; i < 50; ++i) {
    e[i] += 0.05;
    const double now = auc(e, 0.5);
    EXPECT_LE(now, prev);
    EXPECT_GE(now, 0.0);
    EXPECT_LE(now, 100.0);
    prev = now;
  }
}

TEST(Curve, Errors) {
  EXPECT_THROW((void)cumulative_curve({}, 0.5), InvalidArgumentError);
  EXPECT_THROW((void)auc({0.1}, 0.0), InvalidArgumentError);
  EXPECT_THROW((void)auc({-0.1}, 1.0), InvalidArgumentError);
}

TEST(Compare, ReportAgainstItselfIsAllZero) {
  const BenchmarkReport r = report_of({row("a", "small", 0.1, 0.2, true),
                                       row("b", "large", 0.3, 0.05, true)});
  for (const DeltaRow& d : compare_reports(r, r)) EXPECT_EQ(d.delta, 0.0) << d.metric;
}

TEST(Compare, HandComputedDeltas) {
  // a: errors {0.1 ok, fail}, b: {0.1 ok, 0.3 ok}, max 0.5.
  const BenchmarkReport a =
      report_of({row("p0", "small", 0.1, 0.1, true), row("p1", "small", 0.3, 0.3, false)});
  const BenchmarkReport b =
      report_of({row("p0", "small", 0.1, 0.1, true), row("p1", "small", 0.3, 0.3, true)});
  const std::vector<DeltaRow> rows = compare_reports(a, b);
  // AUC(a) = 0.5 * (0.4 + 0.5 * 0.001) / 0.5 * 100 = 40.05; AUC(b) = 60.1.
  for (const DeltaRow& d : rows) {
    if (d.metric == "converged_rate") {
      EXPECT_DOUBLE_EQ(d.delta, 0.5);
    } else {
      EXPECT_NEAR(d.a, 40.05, 1e-9);
      EXPECT_NEAR(d.b, 60.1, 1e-9);
      EXPECT_NEAR(d.delta, 20.05, 1e-9);
    }
  }
  EXPECT_EQ(rows.size(), 6u);
  const std::string table = format_delta_table(rows);
  EXPECT_EQ(table.rfind("scope,metric,a,b,delta\n", 0), 0u);
}

TEST(Compare, StrictlyBetterIsOneSigned) {
  const BenchmarkReport a =
      report_of({row("p0", "small", 0.2, 0.3, false), row("p1", "large", 0.4, 0.4, false)});
  const BenchmarkReport b =
      report_of({row("p0", "small", 0.1, 0.1, true), row("p1", "large", 0.2, 0.2, true)});
  for (const DeltaRow& d : compare_reports(a, b)) EXPECT_GT(d.delta, 0.0) << d.scope << d.metric;
}

TEST(Compare, IdMismatchThrows) {
  const BenchmarkReport a = report_of({row("p0", "small", 0.1, 0.1, true)});
  const BenchmarkReport b = report_of({row("q0", "small", 0.1, 0.1, true)});
  EXPECT_THROW((void)compare_reports(a, b), InvalidArgumentError);
  const BenchmarkReport c = report_of({});
  EXPECT_THROW((void)compare_reports(a, c), InvalidArgumentError);
}

TEST(Report, CsvHeaderAndJsonRoundTrip) {
  BenchmarkReport r = report_of({row("p0", "small", 0.1, 0.2, true),
                                 row("p1", "large", kInf, kInf, false)});
  r.trials[1].failure = "error: \"bad\"\nfile";
  const std::string csv = report_to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kReportCsvHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const BenchmarkReport back = report_from_json(report_to_json(r));
  EXPECT_EQ(report_to_csv(back), csv);
  EXPECT_EQ(back.trials[1].t_error, kInf);
  EXPECT_EQ(back.hard_failures, 1);
  EXPECT_FALSE(report_to_json(r).at("trials")[0].contains("wall_time"));
  EXPECT_TRUE(report_to_json(r, true).at("trials")[0].contains("wall_time"));
}

TEST_F(BenchmarkTest, IdentityPairsScoreFullArea) {
  Manifest m = manifest();
  m.pairs.resize(2);  // the zero-class pairs
  const BenchmarkReport r = run_benchmark(m, LMConfig{}, {});
  for (const TrialRecord& t : r.trials) {
    EXPECT_TRUE(t.converged) << t.failure;
    EXPECT_EQ(t.t_error, 0.0);
    EXPECT_EQ(t.r_error_deg, 0.0);
  }
  EXPECT_EQ(r.t_auc, 100.0);
  EXPECT_EQ(r.r_auc, 100.0);
}

TEST_F(BenchmarkTest, RunsAreBitIdenticalAcrossRunsAndThreads) {
  const Manifest m = manifest();
  BenchmarkOptions one, three;
  three.num_threads = 3;
  const std::string a = report_to_csv(run_benchmark(m, LMConfig{}, one));
  const std::string b = report_to_csv(run_benchmark(m, LMConfig{}, one));
  const std::string c = report_to_csv(run_benchmark(m, LMConfig{}, three));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  const BenchmarkReport r = run_benchmark(m, LMConfig{}, one);
  EXPECT_EQ(r.per_class.size(), 4u);
  EXPECT_EQ(r.per_class.at("small").trials, 2);
}

TEST_F(BenchmarkTest, CorrInitRunsAndIsRecorded) {
  BenchmarkOptions opt;
  opt.init = InitMode::kCorr;
  const BenchmarkReport r = run_benchmark(manifest(), LMConfig{}, opt);
  EXPECT_EQ(r.init_mode, "corr");
  EXPECT_EQ(r.hard_failures, 0);
}

TEST_F(BenchmarkTest, MissingFileIsRecordedAndRunContinues) {
  const fs::path copy = fs::temp_directory_path() / "lmreloc_eval_ds_broken";
  fs::remove_all(copy);
  fs::copy(dir_, copy);
  fs::remove(copy / "pair_0001_target.fmap");
  const BenchmarkReport r =
      run_benchmark(load_manifest((copy / "manifest.json").string()), LMConfig{}, {});
  EXPECT_EQ(r.hard_failures, 1);
  EXPECT_EQ(r.trials[1].failure.rfind("error: ", 0), 0u);
  EXPECT_NE(r.trials[1].failure.find("pair_0001_target.fmap"), std::string::npos);
  EXPECT_FALSE(r.trials[1].converged);
  EXPECT_TRUE(r.trials[0].converged);
  fs::remove_all(copy);
}

TEST_F(BenchmarkTest, RejectsBadOptions) {
  BenchmarkOptions opt;
  opt.t_max = 0.0;
  EXPECT_THROW((void)run_benchmark(manifest(), LMConfig{}, opt), InvalidArgumentError);
  EXPECT_THROW((void)parse_init_mode("posenet"), InvalidArgumentError);
}
