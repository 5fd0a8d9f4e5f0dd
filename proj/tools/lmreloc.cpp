// lmreloc command-line tool.
//
// Exit status: 0 on success, 1 on a hard error, 2 when a benchmark finished
// but some pairs failed.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "lmreloc/dataset.hpp"
#include "lmreloc/eval.hpp"
#include "lmreloc/init.hpp"
#include "lmreloc/io.hpp"
#include "lmreloc/lm_align.hpp"
#include "lmreloc/losses.hpp"
#include "lmreloc/toy_training.hpp"

namespace {

using namespace lmreloc;

KeyValueConfig load_config(const std::string& path) {
  return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_text_file(path, text);
  }
}

struct AlignArgs {
  std::string ref, target, points, init = "identity", damping, config, out, gt;
  bool trace = false;
};

int run_align(const AlignArgs& a) {
  KeyValueConfig kv = load_config(a.config);
  LMConfig lm;
  InitConfig ic;
  apply_config(kv, lm);
  apply_config(kv, ic);
  kv.require_all_used();
  if (!a.damping.empty()) lm.damping = parse_damping(a.damping);
  const InitMode mode = parse_init_mode(a.init);

  const FeaturePyramid ref = load_feature_pyramid(a.ref);
  const FeaturePyramid target = load_feature_pyramid(a.target);
  const PointsFile pts = load_points(a.points);
  nlohmann::json j;
  SE3Pose init;
  if (mode == InitMode::kCorr) {
    const InitResult ir = corr_pose_init(ref, target, pts.points, pts.camera, lm, ic);
    init = ir.pose;
    j["init"] = {{"mode", "corr"},
                 {"pose", format_pose(ir.pose)},
                 {"identity_energy", json_number(ir.identity_energy)},
                 {"energy", json_number(ir.energy)},
                 {"candidates", ir.candidates},
                 {"used_identity", ir.used_identity}};
  } else {
    j["init"] = {{"mode", "identity"}, {"pose", format_pose(init)}};
  }
  const AlignmentResult res =
      align_coarse_to_fine(ref, target, pts.points, init, pts.camera, lm);
  j["result"] = alignment_to_json(res, a.trace);
  j["damping"] = to_string(lm.damping);
  if (!a.gt.empty()) {
    const SE3Pose gt = load_pose(a.gt);
    j["t_error"] = translation_error(res.pose.translation, gt.translation);
    j["r_error_deg"] = rotation_error(res.pose.rotation, gt.rotation);
  }
  emit(j.dump(2) + "\n", a.out);
  return 0;
}

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
  KeyValueConfig kv = load_config(a.config);
  DatasetConfig dc;
  apply_config(kv, dc);
  kv.require_all_used();
  if (a.seed) dc.seed = *a.seed;
  const Manifest m = build_dataset(dc, a.out);
  std::cout << "wrote " << m.pairs.size() << " pairs to "
            << (std::filesystem::path(a.out) / "manifest.json").string() << "\n";
  return 0;
}

struct EvalLossArgs {
  std::string ref, target, points, gt, config, csv;
  int level = 4;
  std::uint64_t seed = 0;
};

int run_eval_loss(const EvalLossArgs& a) {
  KeyValueConfig kv = load_config(a.config);
  LossConfig lc;
  apply_config(kv, lc);
  kv.require_all_used();
  if (a.level < 1 || a.level > kPyramidLevels) throw InvalidArgumentError("--level must be 1..4");
  const FeaturePyramid ref = load_feature_pyramid(a.ref);
  const FeaturePyramid target = load_feature_pyramid(a.target);
  const PointsFile pts = load_points(a.points);
  const SE3Pose gt = load_pose(a.gt);
  const CameraIntrinsics k = pts.camera.at_level(a.level);
  std::vector<Correspondence> corr;
  for (const SparsePoint& p : pts.points) {
    const Vec2 pl = CameraIntrinsics::pixel_to_level(p.pixel, a.level);
    const WarpResult w = warp_point(pl, p.depth, gt, k, k);
    if (w.valid) corr.push_back({pl, w.pixel});
  }
  const FeatureMap& f = ref.level(a.level);
  const FeatureMap& ft = target.level(a.level);
  const CorrespondenceBatch batch =
      sample_batch(a.seed, corr, f.width(), f.height(), ft.width(), ft.height(), lc);
  const LossBreakdown l = total_loss(f, ft, batch, lc);
  if (!a.csv.empty()) {
    std::string csv = "p_u,p_v,gt_u,gt_v,e_pos,e_neg,e_gd,e_gn\n";
    for (std::size_t i = 0; i < batch.samples.size(); ++i) {
      const CorrespondenceSample& s = batch.samples[i];
      const SampleLosses& v = l.per_sample[i];
      csv += format_double(s.p.x()) + "," + format_double(s.p.y()) + "," +
             format_double(s.p_gt.x()) + "," + format_double(s.p_gt.y()) + "," +
             format_double(v.pos) + "," + format_double(v.neg) + "," + format_double(v.gd) +
             "," + format_double(v.gn) + "\n";
    }
    write_text_file(a.csv, csv);
  }
  const nlohmann::json j = {{"level", a.level},
                            {"samples", batch.samples.size()},
                            {"seed", a.seed},
                            {"e_pos", l.pos},
                            {"e_neg", l.neg},
                            {"e_gd", l.gd},
                            {"e_gn", l.gn},
                            {"total", l.total}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, out;
  int pairs = 8;
  std::uint64_t seed = 0;
  bool no_gd = false, no_gn = false, no_neg = false;
};

int run_train_toy(const TrainArgs& a) {
  KeyValueConfig kv = load_config(a.config);
  ToyPairConfig pc;
  ToyTrainConfig tc;
  apply_config(kv, pc, tc);
  kv.require_all_used();
  tc.seed = a.seed;
  if (a.no_gd) tc.loss.weights.gd = 0.0;
  if (a.no_gn) tc.loss.weights.gn = 0.0;
  if (a.no_neg) tc.loss.weights.neg = 0.0;
  const std::vector<ToyPair> pairs = make_toy_pairs(a.seed, a.pairs, pc);
  const ToyTrainingResult r = train_toy_features(pairs, tc);
  std::string csv = "epoch,total,e_pos,e_neg,e_gd,e_gn,success_rate,mean_t_error\n";
  for (const ToyEpoch& e : r.trace) {
    auto cell = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
    csv += std::to_string(e.epoch) + "," + format_double(e.total) + "," + format_double(e.pos) +
           "," + format_double(e.neg) + "," + format_double(e.gd) + "," + format_double(e.gn) +
           "," + cell(e.success_rate) + "," + cell(e.mean_t_error) + "\n";
  }
  if (!a.out.empty()) write_text_file(a.out, csv);
  const ToyEpoch& first = r.trace.front();
  const ToyEpoch& last = r.trace.back();
  const nlohmann::json j = {{"epochs", last.epoch},
                            {"aborted", r.aborted},
                            {"abort_reason", r.abort_reason},
                            {"initial_loss", first.total},
                            {"final_loss", last.total},
                            {"initial_success_rate", json_number(first.success_rate)},
                            {"final_success_rate", json_number(last.success_rate)},
                            {"final_mean_t_error", json_number(last.mean_t_error)}};
  std::cout << j.dump(2) << "\n";
  return r.aborted ? 1 : 0;
}

struct BenchArgs {
  std::string manifest, config, out = "report", init = "identity", damping;
  int threads = 1;
  double t_max = 0.5, r_max = 0.5;
  bool timing = false;
  std::uint64_t seed = 0;
};

int run_benchmark_cmd(const BenchArgs& a) {
  KeyValueConfig kv = load_config(a.config);
  LMConfig lm;
  BenchmarkOptions opt;
  apply_config(kv, lm);
  apply_config(kv, opt.init_config);
  kv.get("eval.t_max", opt.t_max);
  kv.get("eval.r_max_deg", opt.r_max_deg);
  kv.require_all_used();
  if (!a.damping.empty()) lm.damping = parse_damping(a.damping);
  if (a.t_max > 0.0) opt.t_max = a.t_max;
  if (a.r_max > 0.0) opt.r_max_deg = a.r_max;
  opt.init = parse_init_mode(a.init);
  opt.num_threads = a.threads;
  opt.include_timing = a.timing;
  const Manifest m = load_manifest(a.manifest);
  const BenchmarkReport r = run_benchmark(m, lm, opt);
  write_text_file(a.out + ".json", report_to_json(r, a.timing).dump(2) + "\n");
  write_text_file(a.out + ".csv", report_to_csv(r));
  std::printf("pairs %zu  t_AUC %.2f  R_AUC %.2f  hard failures %d\n", r.trials.size(), r.t_auc,
              r.r_auc, r.hard_failures);
  return r.hard_failures > 0 ? 2 : 0;
}

int run_compare(const std::string& a, const std::string& b, const std::string& out) {
  emit(format_delta_table(compare_reports(load_report(a), load_report(b))), out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-metric direct image alignment"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Build a synthetic dataset");
  s->add_option("--config", synth.config, "Key-value config file");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Dataset seed (overrides dataset.seed)");

  AlignArgs align;
  std::uint64_t align_seed = 0;
  auto* al = app.add_subcommand("align", "Align one pair");
  al->add_option("--ref", align.ref, "Reference FMAP")->required();
  al->add_option("--target", align.target, "Target FMAP")->required();
  al->add_option("--points", align.points, "Points file")->required();
  al->add_option("--init", align.init, "identity or corr")
      ->check(CLI::IsMember({"identity", "corr"}));
  al->add_option("--damping", align.damping, "levenberg or marquardt")
      ->check(CLI::IsMember({"levenberg", "marquardt"}));
  al->add_flag("--trace", align.trace, "Include per-iteration traces");
  al->add_option("--config", align.config, "Key-value config file");
  al->add_option("--gt", align.gt, "Ground-truth pose file; adds error fields");
  al->add_option("--out", align.out, "Output JSON (default stdout)");
  al->add_option("--seed", align_seed, "Unused; alignment is deterministic");

  EvalLossArgs el;
  auto* ev = app.add_subcommand("eval-loss", "Loss breakdown on a stored pair");
  ev->add_option("--ref", el.ref, "Reference FMAP")->required();
  ev->add_option("--target", el.target, "Target FMAP")->required();
  ev->add_option("--points", el.points, "Points file")->required();
  ev->add_option("--gt", el.gt, "Ground-truth pose file")->required();
  ev->add_option("--level", el.level, "Pyramid level 1..4");
  ev->add_option("--config", el.config, "Key-value config file");
  ev->add_option("--csv", el.csv, "Per-sample CSV output");
  ev->add_option("--seed", el.seed, "Batch sampling seed");

  TrainArgs tr;
  auto* tt = app.add_subcommand("train-toy", "Toy feature training");
  tt->add_option("--config", tr.config, "Key-value config file");
  tt->add_option("--pairs", tr.pairs, "Number of training pairs");
  tt->add_option("--seed", tr.seed, "Seed for pairs, batches and evaluation");
  tt->add_option("--out", tr.out, "Per-epoch trace CSV");
  tt->add_flag("--no-gd", tr.no_gd, "Zero the GD-term weight");
  tt->add_flag("--no-gn", tr.no_gn, "Zero the GN-term weight");
  tt->add_flag("--no-neg", tr.no_neg, "Zero the negative-term weight");

  BenchArgs bench;
  auto* bm = app.add_subcommand("benchmark", "Run a manifest and write reports");
  bm->add_option("--manifest", bench.manifest, "manifest.json")->required();
  bm->add_option("--config", bench.config, "Key-value config file");
  bm->add_option("--out", bench.out, "Report path prefix (.json and .csv are appended)");
  bm->add_option("--init", bench.init, "identity or corr")
      ->check(CLI::IsMember({"identity", "corr"}));
  bm->add_option("--damping", bench.damping, "levenberg or marquardt")
      ->check(CLI::IsMember({"levenberg", "marquardt"}));
  bm->add_option("--threads", bench.threads, "Worker threads");
  bm->add_option("--t-max", bench.t_max, "Translation AUC threshold");
  bm->add_option("--r-max", bench.r_max, "Rotation AUC threshold, degrees");
  bm->add_flag("--timing", bench.timing, "Record wall times in the JSON report");
  bm->add_option("--seed", bench.seed, "Unused; runs are deterministic");

  std::string cmp_a, cmp_b, cmp_out;
  auto* cp = app.add_subcommand("compare", "Delta table between two JSON reports");
  cp->add_option("a", cmp_a, "Baseline report")->required();
  cp->add_option("b", cmp_b, "Candidate report")->required();
  cp->add_option("--out", cmp_out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*s) return run_synth(synth);
    if (*al) return run_align(align);
    if (*ev) return run_eval_loss(el);
    if (*tt) return run_train_toy(tr);
    if (*bm) return run_benchmark_cmd(bench);
    if (*cp) return run_compare(cmp_a, cmp_b, cmp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
