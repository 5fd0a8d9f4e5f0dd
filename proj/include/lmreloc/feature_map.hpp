// Dense D-channel feature maps, bilinear sampling with analytic derivatives,
// 4-level pyramids, and the FMAP binary file format.
#pragma once

#include <Eigen/Core>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "lmreloc/errors.hpp"
#include "lmreloc/geometry.hpp"

namespace lmreloc {

// Row-major (row, col, channel) storage.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int height, int width, int channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels) {
    if (height <= 0 || width <= 0 || channels <= 0) {
      throw InvalidArgumentError("feature map dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] bool empty() const { return data_.empty(); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::size_t index(int row, int col, int ch = 0) const {
    return (static_cast<std::size_t>(row) * width_ + col) * channels_ + ch;
  }

  [[nodiscard]] double& at(int row, int col, int ch = 0) { return data_[index(row, col, ch)]; }
  [[nodiscard]] double at(int row, int col, int ch = 0) const {
    return data_[index(row, col, ch)];
  }

  [[nodiscard]] const double* pixel(int row, int col) const { return &data_[index(row, col)]; }

  [[nodiscard]] std::vector<double>& data() { return data_; }
  [[nodiscard]] const std::vector<double>& data() const { return data_; }

  [[nodiscard]] bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Single-channel copy of channel `ch`.
  [[nodiscard]] FeatureMap channel(int ch) const {
    FeatureMap out(height_, width_, 1);
    for (int r = 0; r < height_; ++r) {
      for (int c = 0; c < width_; ++c) out.at(r, c) = at(r, c, ch);
    }
    return out;
  }

  // Rounds every value through float32, the on-disk precision.
  void quantize_to_float() {
    for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
  }

  [[nodiscard]] bool in_sampling_bounds(const Vec2& q) const {
    return q.x() >= kInterpolationMargin && q.y() >= kInterpolationMargin &&
           q.x() <= width_ - 1 - kInterpolationMargin &&
           q.y() <= height_ - 1 - kInterpolationMargin;
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

struct FeatureSample {
  Eigen::VectorXd value;
  Eigen::MatrixX2d grad;  // column 0: dF/du, column 1: dF/dv
};

// Non-allocating core of bilinear_sample. `value`, `du` and `dv` point to D
// doubles each; `du`/`dv` may be null. No bounds check.
inline void bilinear_sample_into(const FeatureMap& map, const Vec2& q, double* value, double* du,
                                 double* dv) {
  int x0 = static_cast<int>(std::floor(q.x()));
  int y0 = static_cast<int>(std::floor(q.y()));
  x0 = std::min(x0, map.width() - 2);
  y0 = std::min(y0, map.height() - 2);
  const double a = q.x() - x0;
  const double b = q.y() - y0;
  const int d = map.channels();
  const double* f00 = map.pixel(y0, x0);
  const double* f10 = map.pixel(y0, x0 + 1);
  const double* f01 = map.pixel(y0 + 1, x0);
  const double* f11 = map.pixel(y0 + 1, x0 + 1);
  const double w00 = (1.0 - a) * (1.0 - b);
  const double w10 = a * (1.0 - b);
  const double w01 = (1.0 - a) * b;
  const double w11 = a * b;
  for (int c = 0; c < d; ++c) {
    value[c] = w00 * f00[c] + w10 * f10[c] + w01 * f01[c] + w11 * f11[c];
    if (du != nullptr) du[c] = (1.0 - b) * (f10[c] - f00[c]) + b * (f11[c] - f01[c]);
    if (dv != nullptr) dv[c] = (1.0 - a) * (f01[c] - f00[c]) + a * (f11[c] - f10[c]);
  }
}

// Bilinear interpolation at sub-pixel q = (u, v) with the exact derivative of
// the interpolant (constant within each unit cell along the other axis).
// Requires q within [1, w-2] x [1, h-2].
[[nodiscard]] inline FeatureSample bilinear_sample(const FeatureMap& map, const Vec2& q) {
  if (!map.in_sampling_bounds(q)) {
    throw OutOfBoundsError("bilinear_sample: query (" + std::to_string(q.x()) + ", " +
                           std::to_string(q.y()) + ") outside interpolation margin of " +
                           std::to_string(map.width()) + "x" + std::to_string(map.height()) +
                           " map");
  }
  const int d = map.channels();
  FeatureSample s{Eigen::VectorXd(d), Eigen::MatrixX2d(d, 2)};
  Eigen::VectorXd du(d), dv(d);
  bilinear_sample_into(map, q, s.value.data(), du.data(), dv.data());
  s.grad.col(0) = du;
  s.grad.col(1) = dv;
  return s;
}

// ============================================================================
// Pyramids
// ============================================================================

inline constexpr int kPyramidLevels = 4;

// levels[0] is level 1 (1/8 resolution), levels[3] is level 4 (full).
struct FeaturePyramid {
  std::array<FeatureMap, kPyramidLevels> levels;

  [[nodiscard]] const FeatureMap& level(int l) const { return levels.at(l - 1); }
  [[nodiscard]] FeatureMap& level(int l) { return levels.at(l - 1); }
  [[nodiscard]] int channels() const { return levels[3].channels(); }

  friend bool operator==(const FeaturePyramid&, const FeaturePyramid&) = default;
};

// Checks the dimension contract: level l is full resolution / 2^(4-l) and all
// levels share the channel count. Returns an empty string when consistent.
[[nodiscard]] inline std::string pyramid_contract_violation(const FeaturePyramid& pyr) {
  const FeatureMap& full = pyr.levels[3];
  if (full.empty()) return "level 4 is empty";
  if (full.width() % 8 != 0 || full.height() % 8 != 0) {
    return "level 4 size " + std::to_string(full.width()) + "x" + std::to_string(full.height()) +
           " is not a multiple of 8";
  }
  for (int l = 1; l <= kPyramidLevels; ++l) {
    const FeatureMap& m = pyr.level(l);
    const int s = 1 << (4 - l);
    if (m.width() != full.width() / s || m.height() != full.height() / s) {
      return "level " + std::to_string(l) + " has size " + std::to_string(m.width()) + "x" +
             std::to_string(m.height()) + ", expected " + std::to_string(full.width() / s) + "x" +
             std::to_string(full.height() / s);
    }
    if (m.channels() != full.channels()) {
      return "level " + std::to_string(l) + " has " + std::to_string(m.channels()) +
             " channels, expected " + std::to_string(full.channels());
    }
  }
  return {};
}

// 2x2 box average; input dimensions must be even.
[[nodiscard]] inline FeatureMap downsample_area(const FeatureMap& in) {
  FeatureMap out(in.height() / 2, in.width() / 2, in.channels());
  for (int r = 0; r < out.height(); ++r) {
    for (int c = 0; c < out.width(); ++c) {
      for (int ch = 0; ch < in.channels(); ++ch) {
        out.at(r, c, ch) = 0.25 * (in.at(2 * r, 2 * c, ch) + in.at(2 * r, 2 * c + 1, ch) +
                                   in.at(2 * r + 1, 2 * c, ch) + in.at(2 * r + 1, 2 * c + 1, ch));
      }
    }
  }
  return out;
}

// Pads right/bottom by mirror reflection (edge not repeated) up to multiples
// of 8.
[[nodiscard]] inline FeatureMap pad_reflect_to_multiple_of_8(const FeatureMap& in) {
  const int h = (in.height() + 7) / 8 * 8;
  const int w = (in.width() + 7) / 8 * 8;
  if (h == in.height() && w == in.width()) return in;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  FeatureMap out(h, w, in.channels());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < in.channels(); ++ch) {
        out.at(r, c, ch) = in.at(reflect(r, in.height()), reflect(c, in.width()), ch);
      }
    }
  }
  return out;
}

// Central-difference gradient magnitude, one-sided at the border.
[[nodiscard]] inline FeatureMap gradient_magnitude(const FeatureMap& img) {
  const int h = img.height();
  const int w = img.width();
  FeatureMap out(h, w, 1);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int cl = std::max(c - 1, 0), cr = std::min(c + 1, w - 1);
      const int ru = std::max(r - 1, 0), rd = std::min(r + 1, h - 1);
      const double gx = (img.at(r, cr) - img.at(r, cl)) / std::max(cr - cl, 1);
      const double gy = (img.at(rd, c) - img.at(ru, c)) / std::max(rd - ru, 1);
      out.at(r, c) = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

enum class Normalization { kNone, kPerLevel };

struct BaselinePyramidConfig {
  // 1: intensity only; 2: intensity and gradient magnitude.
  int channels = 2;
  Normalization normalization = Normalization::kPerLevel;
};

// Per level, per channel affine normalization x -> (x - mean) / stddev.
struct PyramidStats {
  std::array<std::vector<double>, kPyramidLevels> mean;
  std::array<std::vector<double>, kPyramidLevels> stddev;
};

struct BaselinePyramid {
  FeaturePyramid pyramid;
  PyramidStats stats;
};

namespace detail {

inline void channel_stats(const FeatureMap& m, int ch, double& mean, double& stddev) {
  const double n = static_cast<double>(m.height()) * m.width();
  double sum = 0.0;
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) sum += m.at(r, c, ch);
  }
  mean = sum / n;
  double var = 0.0;
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      const double d = m.at(r, c, ch) - mean;
      var += d * d;
    }
  }
  stddev = std::sqrt(var / n);
}

inline void apply_stats(FeatureMap& m, int ch, double mean, double stddev) {
  // Flat channels are only centered.
  const double scale = stddev > 1e-12 ? 1.0 / stddev : 1.0;
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) m.at(r, c, ch) = (m.at(r, c, ch) - mean) * scale;
  }
}

}  // namespace detail

// Hand-crafted stand-in for learned features: intensity (and optionally its
// gradient magnitude) at four scales via 2x area downsampling. When `shared`
// is given, its statistics normalize this pyramid instead of its own, which
// keeps a reference/target pair on one common scale.
[[nodiscard]] inline BaselinePyramid build_baseline_pyramid(const FeatureMap& image,
                                                            const BaselinePyramidConfig& config,
                                                            const PyramidStats* shared = nullptr) {
  if (image.channels() != 1) {
    throw InvalidArgumentError("baseline pyramid expects a single-channel image");
  }
  if (image.height() < 8 || image.width() < 8) {
    throw InvalidArgumentError("image must be at least 8x8 to build a 4-level pyramid");
  }
  if (config.channels != 1 && config.channels != 2) {
    throw InvalidArgumentError("baseline pyramid supports 1 or 2 channels");
  }
  std::array<FeatureMap, kPyramidLevels> intensity;
  intensity[3] = pad_reflect_to_multiple_of_8(image);
  for (int i = 2; i >= 0; --i) intensity[i] = downsample_area(intensity[i + 1]);

  BaselinePyramid out;
  for (int i = 0; i < kPyramidLevels; ++i) {
    const FeatureMap& level_img = intensity[i];
    FeatureMap m(level_img.height(), level_img.width(), config.channels);
    const FeatureMap grad = config.channels == 2 ? gradient_magnitude(level_img) : FeatureMap();
    for (int r = 0; r < m.height(); ++r) {
      for (int c = 0; c < m.width(); ++c) {
        m.at(r, c, 0) = level_img.at(r, c);
        if (config.channels == 2) m.at(r, c, 1) = grad.at(r, c);
      }
    }
    out.stats.mean[i].assign(config.channels, 0.0);
    out.stats.stddev[i].assign(config.channels, 1.0);
    if (config.normalization == Normalization::kPerLevel) {
      for (int ch = 0; ch < config.channels; ++ch) {
        double mean, stddev;
        if (shared != nullptr) {
          mean = shared->mean[i].at(ch);
          stddev = shared->stddev[i].at(ch);
        } else {
          detail::channel_stats(m, ch, mean, stddev);
        }
        detail::apply_stats(m, ch, mean, stddev);
        out.stats.mean[i][ch] = mean;
        out.stats.stddev[i][ch] = stddev;
      }
    }
    out.pyramid.levels[i] = std::move(m);
  }
  return out;
}

// ============================================================================
// FMAP file format
//
//   "FMAP" | u32 version = 1 | u32 level_count |
//   per level: u32 h | u32 w | u32 d | h*w*d float32, row-major (row, col, ch)
//
// All integers and floats little-endian.
// ============================================================================

inline constexpr std::uint32_t kFmapVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

[[nodiscard]] inline std::string encode_fmap(const FeaturePyramid& pyr) {
  const std::string violation = pyramid_contract_violation(pyr);
  if (!violation.empty()) throw FormatError("FMAP encode: " + violation);
  std::string out = "FMAP";
  detail::put_u32(out, kFmapVersion);
  detail::put_u32(out, kPyramidLevels);
  for (const FeatureMap& m : pyr.levels) {
    detail::put_u32(out, static_cast<std::uint32_t>(m.height()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.width()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.channels()));
    for (double v : m.data()) {
      detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

[[nodiscard]] inline FeaturePyramid decode_fmap(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  std::size_t pos = 0;
  auto need = [&](std::size_t k, const char* what) {
    if (n - pos < k) {
      throw FormatError(std::string("FMAP: truncated file while reading ") + what);
    }
  };
  need(12, "header");
  if (std::memcmp(p, "FMAP", 4) != 0) throw FormatError("FMAP: bad magic bytes");
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kFmapVersion) {
    throw FormatError("FMAP: unsupported version " + std::to_string(version));
  }
  const std::uint32_t level_count = detail::get_u32(p + 8);
  if (level_count != kPyramidLevels) {
    throw FormatError("FMAP: expected 4 levels, found " + std::to_string(level_count));
  }
  pos = 12;
  FeaturePyramid pyr;
  for (int i = 0; i < kPyramidLevels; ++i) {
    need(12, "level header");
    const std::uint32_t h = detail::get_u32(p + pos);
    const std::uint32_t w = detail::get_u32(p + pos + 4);
    const std::uint32_t d = detail::get_u32(p + pos + 8);
    pos += 12;
    if (h == 0 || w == 0 || d == 0 || h > (1u << 16) || w > (1u << 16) || d > 4096) {
      throw FormatError("FMAP: level " + std::to_string(i + 1) + " has invalid dimensions");
    }
    const std::size_t count = static_cast<std::size_t>(h) * w * d;
    need(count * 4, "level data");
    FeatureMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d));
    for (std::size_t k = 0; k < count; ++k) {
      const float f = std::bit_cast<float>(detail::get_u32(p + pos + 4 * k));
      if (!std::isfinite(f)) {
        throw FormatError("FMAP: non-finite value in level " + std::to_string(i + 1));
      }
      m.data()[k] = f;
    }
    pos += count * 4;
    pyr.levels[i] = std::move(m);
  }
  if (pos != n) throw FormatError("FMAP: trailing bytes after level 4");
  const std::string violation = pyramid_contract_violation(pyr);
  if (!violation.empty()) throw FormatError("FMAP: " + violation);
  return pyr;
}

inline void save_feature_pyramid(const std::string& path, const FeaturePyramid& pyr) {
  const std::string bytes = encode_fmap(pyr);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

[[nodiscard]] inline FeaturePyramid load_feature_pyramid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature map file " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_fmap(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace lmreloc
