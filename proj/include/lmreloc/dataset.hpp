// Synthetic benchmark datasets on disk: a JSON manifest plus, per pair, two
// FMAP pyramids, a points file and the ground-truth pose as text.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/feature_map.hpp"
#include "lmreloc/io.hpp"
#include "lmreloc/parallel.hpp"
#include "lmreloc/random.hpp"
#include "lmreloc/synth.hpp"

namespace lmreloc {

inline constexpr int kManifestSchemaVersion = 1;

struct DatasetConfig {
  std::uint64_t seed = 0;
  int pairs_zero = 0;
  int pairs_small = 4;
  int pairs_medium = 4;
  int pairs_large = 4;
  // "clean", "perturbed", or "alternate" (odd-numbered pairs perturbed).
  std::string photometric = "clean";
  PhotometricParams perturbation{1.1, 0.02, 0.005, 0.95, 0};
  PairConfig pair;
  int num_threads = 1;
};

inline void apply_config(KeyValueConfig& kv, DatasetConfig& c) {
  kv.get("dataset.seed", c.seed);
  kv.get("dataset.pairs_zero", c.pairs_zero);
  kv.get("dataset.pairs_small", c.pairs_small);
  kv.get("dataset.pairs_medium", c.pairs_medium);
  kv.get("dataset.pairs_large", c.pairs_large);
  kv.get("dataset.photometric", c.photometric);
  kv.get("dataset.photometric_gain", c.perturbation.gain);
  kv.get("dataset.photometric_offset", c.perturbation.offset);
  kv.get("dataset.photometric_noise_sigma", c.perturbation.noise_sigma);
  kv.get("dataset.photometric_gamma", c.perturbation.gamma);
  kv.get("dataset.num_points", c.pair.num_points);
  kv.get("dataset.channels", c.pair.features.channels);
  kv.get("dataset.num_threads", c.num_threads);
  apply_config(kv, c.pair.scene);
  if (c.pairs_zero < 0 || c.pairs_small < 0 || c.pairs_medium < 0 || c.pairs_large < 0) {
    throw InvalidArgumentError("dataset pair counts must be non-negative");
  }
  if (c.photometric != "clean" && c.photometric != "perturbed" && c.photometric != "alternate") {
    throw InvalidArgumentError("dataset.photometric must be clean, perturbed or alternate");
  }
}

struct ManifestPair {
  std::string id;
  std::uint64_t seed = 0;
  MagnitudeClass magnitude = MagnitudeClass::kSmall;
  std::string photometric = "clean";
  std::string reference;  // paths relative to the manifest directory
  std::string target;
  std::string points;
  SE3Pose gt_pose;
  double mean_flow = 0.0;
  bool points_insufficient = false;
};

struct Manifest {
  int schema_version = kManifestSchemaVersion;
  std::uint64_t seed = 0;
  CameraIntrinsics camera;
  std::vector<ManifestPair> pairs;
  std::string directory;  // set by load_manifest
};

[[nodiscard]] inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const ManifestPair& p : m.pairs) {
    pairs.push_back({{"id", p.id},
                     {"seed", p.seed},
                     {"class", to_string(p.magnitude)},
                     {"photometric", p.photometric},
                     {"reference", p.reference},
                     {"target", p.target},
                     {"points", p.points},
                     {"gt_pose", format_pose(p.gt_pose)},
                     {"mean_flow", p.mean_flow},
                     {"points_insufficient", p.points_insufficient}});
  }
  return {{"schema_version", m.schema_version},
          {"seed", m.seed},
          {"camera", camera_to_json(m.camera)},
          {"pairs", pairs}};
}

[[nodiscard]] inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kManifestSchemaVersion) {
      throw FormatError("manifest: unsupported schema version " +
                        std::to_string(m.schema_version));
    }
    m.seed = j.at("seed").get<std::uint64_t>();
    m.camera = camera_from_json(j.at("camera"));
    for (const auto& p : j.at("pairs")) {
      ManifestPair mp;
      mp.id = p.at("id").get<std::string>();
      mp.seed = p.at("seed").get<std::uint64_t>();
      mp.magnitude = parse_magnitude_class(p.at("class").get<std::string>());
      mp.photometric = p.at("photometric").get<std::string>();
      mp.reference = p.at("reference").get<std::string>();
      mp.target = p.at("target").get<std::string>();
      mp.points = p.at("points").get<std::string>();
      mp.gt_pose = parse_pose(p.at("gt_pose").get<std::string>());
      mp.mean_flow = p.value("mean_flow", 0.0);
      mp.points_insufficient = p.value("points_insufficient", false);
      m.pairs.push_back(std::move(mp));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

[[nodiscard]] inline Manifest load_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  Manifest m = manifest_from_json(j);
  m.directory = std::filesystem::path(path).parent_path().string();
  return m;
}

struct LoadedPair {
  FeaturePyramid reference;
  FeaturePyramid target;
  PointsFile points;
};

[[nodiscard]] inline LoadedPair load_manifest_pair(const Manifest& m, std::size_t i) {
  const std::filesystem::path dir = m.directory.empty() ? "." : m.directory;
  const ManifestPair& p = m.pairs.at(i);
  return {load_feature_pyramid((dir / p.reference).string()),
          load_feature_pyramid((dir / p.target).string()),
          load_points((dir / p.points).string())};
}

// Generates every pair from derive_seed(config.seed, index), writes the
// files into `directory` and returns the manifest (also written as
// manifest.json). Rebuilding from the same config is bit-identical.
inline Manifest build_dataset(const DatasetConfig& config, const std::string& directory) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(directory, ec);
  if (ec) throw Error("cannot create " + directory + ": " + ec.message());

  struct Job {
    MagnitudeClass magnitude;
    bool perturbed;
  };
  std::vector<Job> jobs;
  const std::pair<MagnitudeClass, int> counts[] = {{MagnitudeClass::kZero, config.pairs_zero},
                                                   {MagnitudeClass::kSmall, config.pairs_small},
                                                   {MagnitudeClass::kMedium, config.pairs_medium},
                                                   {MagnitudeClass::kLarge, config.pairs_large}};
  for (const auto& [cls, n] : counts) {
    for (int k = 0; k < n; ++k) {
      const std::size_t i = jobs.size();
      const bool perturbed = config.photometric == "perturbed" ||
                             (config.photometric == "alternate" && i % 2 == 1);
      jobs.push_back({cls, perturbed});
    }
  }

  Manifest manifest;
  manifest.seed = config.seed;
  manifest.camera = config.pair.scene.camera();
  std::vector<BenchmarkPair> pairs(jobs.size());
  for_each_chunk(jobs.size(), 1, config.num_threads,
                 [&](std::size_t, std::size_t begin, std::size_t end) {
                   for (std::size_t i = begin; i < end; ++i) {
                     PairConfig pc = config.pair;
                     pc.magnitude = jobs[i].magnitude;
                     pc.photometric = jobs[i].perturbed ? config.perturbation : PhotometricParams{};
                     pairs[i] = make_benchmark_pair(derive_seed(config.seed, i), pc);
                   }
                 });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "pair_%04zu", i);
    ManifestPair mp;
    mp.id = id;
    mp.seed = pairs[i].seed;
    mp.magnitude = jobs[i].magnitude;
    mp.photometric = jobs[i].perturbed ? "perturbed" : "clean";
    mp.reference = mp.id + "_ref.fmap";
    mp.target = mp.id + "_target.fmap";
    mp.points = mp.id + "_points.txt";
    mp.gt_pose = pairs[i].gt_pose;
    mp.mean_flow = pairs[i].mean_flow;
    mp.points_insufficient = pairs[i].points_insufficient;
    const fs::path dir(directory);
    save_feature_pyramid((dir / mp.reference).string(), pairs[i].reference);
    save_feature_pyramid((dir / mp.target).string(), pairs[i].target);
    write_text_file((dir / mp.points).string(), format_points(pairs[i].camera, pairs[i].points));
    // Convenience copy of the manifest pose for `align --gt` and `eval-loss`.
    save_pose((dir / (mp.id + "_gt.txt")).string(), mp.gt_pose);
    manifest.pairs.push_back(std::move(mp));
  }
  write_text_file((fs::path(directory) / "manifest.json").string(),
                  manifest_to_json(manifest).dump(2) + "\n");
  manifest.directory = directory;
  return manifest;
}

}  // namespace lmreloc
