// Text formats shared by the library and the command-line tool.
//
// Key-value config files hold one `key = value` per line; `#` starts a
// comment, blank lines are ignored, keys are dotted (`lm.lambda_init`).
// Every key must be consumed by some apply_* call, so typos are reported
// rather than silently ignored.
//
// Points files hold a camera line followed by one point per line:
//
//   camera fx fy cx cy width height
//   u v depth
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/geometry.hpp"
#include "lmreloc/init.hpp"
#include "lmreloc/lm_align.hpp"
#include "lmreloc/losses.hpp"
#include "lmreloc/synth.hpp"
#include "lmreloc/toy_training.hpp"

namespace lmreloc {

[[nodiscard]] inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

[[nodiscard]] inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ============================================================================
// Key-value config
// ============================================================================

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  [[nodiscard]] static KeyValueConfig parse(const std::string& text,
                                            const std::string& origin = "config") {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (cfg.values_.count(key)) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      cfg.values_[key] = value;
    }
    cfg.origin_ = origin;
    return cfg;
  }

  [[nodiscard]] static KeyValueConfig load(const std::string& path) {
    return parse(read_text_file(path), path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) > 0; }

  void get(const std::string& key, double& out) {
    if (const std::string* v = take(key)) out = to_double(key, *v);
  }
  void get(const std::string& key, int& out) {
    if (const std::string* v = take(key)) {
      const double d = to_double(key, *v);
      if (d != std::floor(d) || std::abs(d) > 1e9) fail(key, "expected an integer");
      out = static_cast<int>(d);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const std::string* v = take(key)) {
      // stoull wraps "-1" around instead of rejecting it.
      if (v->find('-') != std::string::npos) fail(key, "expected an unsigned integer");
      try {
        std::size_t used = 0;
        out = std::stoull(*v, &used);
        if (used != v->size()) fail(key, "expected an unsigned integer");
      } catch (const std::logic_error&) {
        fail(key, "expected an unsigned integer");
      }
    }
  }
  void get(const std::string& key, bool& out) {
    if (const std::string* v = take(key)) {
      if (*v == "true" || *v == "1") {
        out = true;
      } else if (*v == "false" || *v == "0") {
        out = false;
      } else {
        fail(key, "expected true or false");
      }
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const std::string* v = take(key)) out = *v;
  }

  // Throws if any key was never read.
  void require_all_used() const {
    std::string unknown;
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    }
    if (!unknown.empty()) throw FormatError(origin_ + ": unknown keys: " + unknown);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }
  const std::string* take(const std::string& key) {
    const auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw FormatError(origin_ + ": " + key + ": " + what);
  }
  double to_double(const std::string& key, const std::string& v) const {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size() || !std::isfinite(d)) fail(key, "expected a finite number");
      return d;
    } catch (const std::logic_error&) {
      fail(key, "expected a number, got '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
  std::string origin_ = "config";
};

[[nodiscard]] inline DampingMode parse_damping(const std::string& s) {
  if (s == "levenberg") return DampingMode::kLevenberg;
  if (s == "marquardt") return DampingMode::kMarquardt;
  throw InvalidArgumentError("damping must be levenberg or marquardt, got '" + s + "'");
}

[[nodiscard]] inline const char* to_string(DampingMode m) {
  return m == DampingMode::kLevenberg ? "levenberg" : "marquardt";
}

inline void apply_config(KeyValueConfig& kv, LMConfig& c) {
  kv.get("lm.lambda_init", c.lambda_init);
  kv.get("lm.lambda_success_mult", c.lambda_success_mult);
  kv.get("lm.lambda_fail_mult", c.lambda_fail_mult);
  std::string damping = to_string(c.damping);
  kv.get("lm.damping", damping);
  c.damping = parse_damping(damping);
  kv.get("lm.huber_gamma", c.huber_gamma);
  kv.get("lm.max_iters_per_level", c.max_iters_per_level);
  kv.get("lm.step_norm_eps", c.step_norm_eps);
  kv.get("lm.min_valid_points", c.min_valid_points);
  kv.get("lm.lambda_max", c.lambda_max);
  kv.get("lm.max_condition", c.max_condition);
  kv.get("lm.outside_residual_norm", c.outside_residual_norm);
  kv.get("lm.first_level", c.first_level);
  kv.get("lm.last_level", c.last_level);
  kv.get("lm.num_threads", c.num_threads);
  c.validate();
}

inline void apply_config(KeyValueConfig& kv, InitConfig& c) {
  kv.get("init.yaw_pitch_range_deg", c.yaw_pitch_range_deg);
  kv.get("init.yaw_pitch_step_deg", c.yaw_pitch_step_deg);
  kv.get("init.translation_range", c.translation_range);
  kv.get("init.translation_steps", c.translation_steps);
  kv.get("init.context_radius", c.context_radius);
  kv.get("init.num_threads", c.num_threads);
  if (!(c.yaw_pitch_step_deg > 0.0) || c.yaw_pitch_range_deg < 0.0 || c.translation_range < 0.0 ||
      c.translation_steps < 1) {
    throw InvalidArgumentError("InitConfig: invalid grid");
  }
}

inline void apply_config(KeyValueConfig& kv, LossConfig& c) {
  kv.get("loss.margin", c.margin);
  kv.get("loss.lambda_f", c.lambda_f);
  kv.get("loss.gd_margin", c.gd_margin);
  kv.get("loss.epsilon", c.epsilon);
  kv.get("loss.gd_radius", c.gd_radius);
  kv.get("loss.gn_radius", c.gn_radius);
  kv.get("loss.det_floor", c.det_floor);
  kv.get("loss.weight_pos", c.weights.pos);
  kv.get("loss.weight_neg", c.weights.neg);
  kv.get("loss.weight_gd", c.weights.gd);
  kv.get("loss.weight_gn", c.weights.gn);
  c.validate();
}

inline void apply_config(KeyValueConfig& kv, SceneConfig& c) {
  kv.get("scene.width", c.width);
  kv.get("scene.height", c.height);
  kv.get("scene.fx", c.fx);
  kv.get("scene.fy", c.fy);
  kv.get("scene.cx", c.cx);
  kv.get("scene.cy", c.cy);
  kv.get("scene.depth_min", c.depth_min);
  kv.get("scene.depth_max", c.depth_max);
  kv.get("scene.texture_cell", c.texture_cell);
  kv.get("scene.texture_octaves", c.texture_octaves);
  kv.get("scene.texture_persistence", c.texture_persistence);
  kv.get("scene.constant_texture", c.constant_texture);
  kv.get("scene.depth_discontinuity", c.depth_discontinuity);
  kv.get("scene.canvas_margin", c.canvas_margin);
  kv.get("scene.gradient_threshold", c.gradient_threshold);
  kv.get("scene.min_gradient_coverage", c.min_gradient_coverage);
}

inline void apply_config(KeyValueConfig& kv, ToyPairConfig& pc, ToyTrainConfig& c) {
  kv.get("toy.size", pc.size);
  kv.get("toy.focal", pc.focal);
  kv.get("toy.texture_cell", pc.texture_cell);
  kv.get("toy.num_points", pc.num_points);
  kv.get("toy.epochs", c.epochs);
  kv.get("toy.learning_rate", c.learning_rate);
  kv.get("toy.trials_per_pair", c.trials_per_pair);
  kv.get("toy.perturbation_px", c.perturbation_px);
  kv.get("toy.success_px", c.success_px);
  kv.get("toy.eval_noise_sigma", c.eval_noise_sigma);
  kv.get("toy.eval_every", c.eval_every);
  kv.get("toy.standardize", c.standardize);
  kv.get("toy.num_threads", c.num_threads);
  apply_config(kv, c.loss);
  apply_config(kv, c.lm);
}

// ============================================================================
// Points file
// ============================================================================

struct PointsFile {
  CameraIntrinsics camera;
  SparsePointSet points;
};

[[nodiscard]] inline std::string format_points(const CameraIntrinsics& k,
                                               const SparsePointSet& points) {
  std::string out = "camera " + format_double(k.fx) + " " + format_double(k.fy) + " " +
                    format_double(k.cx) + " " + format_double(k.cy) + " " +
                    std::to_string(k.width) + " " + std::to_string(k.height) + "\n";
  for (const SparsePoint& p : points) {
    out += format_double(p.pixel.x()) + " " + format_double(p.pixel.y()) + " " +
           format_double(p.depth) + "\n";
  }
  return out;
}

[[nodiscard]] inline PointsFile parse_points(const std::string& text,
                                             const std::string& origin = "points") {
  PointsFile out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_camera = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (!have_camera) {
      if (first != "camera" ||
          !(ls >> out.camera.fx >> out.camera.fy >> out.camera.cx >> out.camera.cy >>
            out.camera.width >> out.camera.height)) {
        throw FormatError(where + ": expected 'camera fx fy cx cy width height'");
      }
      out.camera.validate();
      have_camera = true;
      continue;
    }
    SparsePoint p;
    double v = 0.0;
    try {
      p.pixel.x() = std::stod(first);
    } catch (const std::logic_error&) {
      throw FormatError(where + ": expected 'u v depth'");
    }
    if (!(ls >> v >> p.depth)) throw FormatError(where + ": expected 'u v depth'");
    p.pixel.y() = v;
    std::string extra;
    if (ls >> extra) throw FormatError(where + ": trailing data");
    if (!(p.depth > 0.0) || !std::isfinite(p.depth)) {
      throw InvalidDepthError(where + ": depth must be positive");
    }
    out.points.push_back(p);
  }
  if (!have_camera) throw FormatError(origin + ": missing camera line");
  return out;
}

[[nodiscard]] inline PointsFile load_points(const std::string& path) {
  return parse_points(read_text_file(path), path);
}

// ============================================================================
// JSON
// ============================================================================

[[nodiscard]] inline nlohmann::json camera_to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx},
          {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

[[nodiscard]] inline CameraIntrinsics camera_from_json(const nlohmann::json& j) {
  CameraIntrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  k.validate();
  return k;
}

// NaN and infinities become null.
[[nodiscard]] inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

[[nodiscard]] inline nlohmann::json alignment_to_json(const AlignmentResult& r, bool trace) {
  nlohmann::json levels = nlohmann::json::array();
  for (const LevelStats& s : r.levels) {
    nlohmann::json l = {{"level", s.level},
                        {"iterations", s.iterations},
                        {"accepted", s.accepted},
                        {"rejected", s.rejected},
                        {"initial_energy", json_number(s.initial_energy)},
                        {"final_energy", json_number(s.final_energy)},
                        {"final_lambda", json_number(s.final_lambda)},
                        {"valid_points", s.valid_points},
                        {"termination", to_string(s.termination)}};
    if (!s.failure_reason.empty()) l["failure_reason"] = s.failure_reason;
    if (trace) {
      nlohmann::json t = nlohmann::json::array();
      for (const IterationTrace& it : s.trace) {
        nlohmann::json row = {{"iteration", it.iteration},
                              {"lambda", json_number(it.lambda)},
                              {"energy", json_number(it.energy)},
                              {"candidate_energy", json_number(it.candidate_energy)},
                              {"step_norm", json_number(it.step_norm)},
                              {"accepted", it.accepted}};
        if (!it.note.empty()) row["note"] = it.note;
        t.push_back(row);
      }
      l["trace"] = t;
    }
    levels.push_back(l);
  }
  nlohmann::json j = {{"pose", format_pose(r.pose)},
                      {"converged", r.converged},
                      {"total_iterations", r.total_iterations()},
                      {"levels", levels}};
  if (!r.failure_reason.empty()) j["failure_reason"] = r.failure_reason;
  return j;
}

}  // namespace lmreloc
