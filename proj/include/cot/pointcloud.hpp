#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cot/errors.hpp"

namespace cot {

using Point3 = std::array<float, 3>;

enum class Domain : std::uint8_t { kSource, kTarget };

inline const char* domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw ContractError("unknown domain '" + s + "'");
}

struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;
  Domain domain = Domain::kSource;

  std::size_t size() const noexcept { return points.size(); }
};

inline void validate(const PointCloud& cloud) {
  require(!cloud.points.empty(), "point cloud must contain at least one point");
  for (const auto& p : cloud.points)
    for (float v : p) require(std::isfinite(v), "point cloud contains a non-finite coordinate");
}

inline double sq_distance(const Point3& a, const Point3& b) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double d = static_cast<double>(a[c]) - b[c];
    s += d * d;
  }
  return s;
}

/// Centers on the centroid and scales so the farthest point has norm 1. A cloud
/// whose points all coincide maps to the origin.
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  validate(cloud);
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
  for (const auto& p : cloud.points)
    for (int c = 0; c < 3; ++c) centroid[c] += p[c];
  for (auto& c : centroid) c /= static_cast<double>(cloud.size());
  double max_norm = 0.0;
  for (const auto& p : cloud.points) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += (p[c] - centroid[c]) * (p[c] - centroid[c]);
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  PointCloud out = cloud;
  const double inv = max_norm > 0.0 ? 1.0 / max_norm : 0.0;
  for (auto& p : out.points)
    for (int c = 0; c < 3; ++c) p[c] = static_cast<float>((p[c] - centroid[c]) * inv);
  return out;
}

/// Greedy max-min selection of n_out points starting at `start`. Returned in
/// selection order; distance ties go to the lowest index.
inline std::vector<std::size_t> farthest_point_indices(const std::vector<Point3>& points, std::size_t n_out,
                                                       std::size_t start) {
  require(!points.empty(), "farthest_point_sample: empty cloud");
  require(n_out >= 1 && n_out <= points.size(), "farthest_point_sample: need 1 <= n_out <= n");
  require(start < points.size(), "farthest_point_sample: start index out of range");
  std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
  std::vector<char> taken(points.size(), 0);
  std::vector<std::size_t> picked;
  picked.reserve(n_out);
  std::size_t current = start;
  for (std::size_t step = 0; step < n_out; ++step) {
    picked.push_back(current);
    taken[current] = 1;
    std::size_t next = points.size();
    double best = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (taken[i]) continue;
      dist[i] = std::min(dist[i], sq_distance(points[i], points[current]));
      if (dist[i] > best) {
        best = dist[i];
        next = i;
      }
    }
    current = next;
  }
  return picked;
}

inline PointCloud farthest_point_sample(const PointCloud& cloud, std::size_t n_out, std::size_t start = 0) {
  PointCloud out = cloud;
  out.points.clear();
  for (std::size_t i : farthest_point_indices(cloud.points, n_out, start)) out.points.push_back(cloud.points[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Random geometric transformation family. Components with degenerate ranges
/// are skipped entirely, so a zero-width spec is the identity bit-for-bit.
struct AugmentationSpec {
  double scale_lo = 1.0;
  double scale_hi = 1.0;
  double rotate_z_max = 0.0;  // angle drawn from [0, rotate_z_max)
  double tilt_max = 0.0;      // random-axis rotation angle in [-tilt_max, tilt_max]
  double translation = 0.0;   // per-axis uniform in [-translation, translation]
  double jitter_sigma = 0.0;
  double jitter_clip = 0.0;
  double dropout_max_ratio = 0.0;
  // Probability that each of scale / rotate / translate is applied on a draw.
  double component_probability = 1.0;

  static AugmentationSpec identity() { return {}; }

  /// Spatial augmentations for the two contrastive views.
  static AugmentationSpec contrastive() {
    AugmentationSpec s;
    s.scale_lo = 0.8;
    s.scale_hi = 1.2;
    s.rotate_z_max = 2.0 * std::numbers::pi;
    s.tilt_max = 15.0 * std::numbers::pi / 180.0;
    s.translation = 0.1;
    s.jitter_sigma = 0.01;
    s.jitter_clip = 0.05;
    s.dropout_max_ratio = 0.2;
    s.component_probability = 0.8;
    return s;
  }

  /// Classifier branch: jitter plus rotation about Z only.
  static AugmentationSpec classifier_branch() {
    AugmentationSpec s;
    s.rotate_z_max = 2.0 * std::numbers::pi;
    s.jitter_sigma = 0.01;
    s.jitter_clip = 0.05;
    return s;
  }
};

inline void validate(const AugmentationSpec& s) {
  require(s.scale_lo > 0.0 && s.scale_hi >= s.scale_lo, "augmentation scale range must satisfy 0 < lo <= hi");
  require(s.rotate_z_max >= 0.0 && s.tilt_max >= 0.0, "augmentation angles must be nonnegative");
  require(s.translation >= 0.0, "augmentation translation must be nonnegative");
  require(s.jitter_sigma >= 0.0 && s.jitter_clip >= 0.0, "jitter parameters must be nonnegative");
  require(s.dropout_max_ratio >= 0.0 && s.dropout_max_ratio < 1.0, "dropout_max_ratio must be in [0, 1)");
  require(s.component_probability >= 0.0 && s.component_probability <= 1.0,
          "component_probability must be in [0, 1]");
}

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 rotation_z(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {{{c, -s, 0.0}, {s, c, 0.0}, {0.0, 0.0, 1.0}}};
}

/// Rodrigues rotation about a unit axis.
inline Mat3 rotation_axis(const std::array<double, 3>& u, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  return {{{t * u[0] * u[0] + c, t * u[0] * u[1] - s * u[2], t * u[0] * u[2] + s * u[1]},
           {t * u[0] * u[1] + s * u[2], t * u[1] * u[1] + c, t * u[1] * u[2] - s * u[0]},
           {t * u[0] * u[2] - s * u[1], t * u[1] * u[2] + s * u[0], t * u[2] * u[2] + c}}};
}

inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

inline void apply_rotation(const Mat3& m, std::vector<Point3>& points) {
  for (auto& p : points) {
    const double x = p[0], y = p[1], z = p[2];
    for (int i = 0; i < 3; ++i) p[i] = static_cast<float>(m[i][0] * x + m[i][1] * y + m[i][2] * z);
  }
}

/// scale -> rotate -> translate -> jitter -> dropout, all drawn from `seed`.
inline PointCloud augment(const PointCloud& cloud, const AugmentationSpec& spec, std::uint64_t seed) {
  validate(cloud);
  validate(spec);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto chosen = [&] { return spec.component_probability >= 1.0 || unit(rng) < spec.component_probability; };
  PointCloud out = cloud;

  if (spec.scale_hi > spec.scale_lo || spec.scale_lo != 1.0) {
    if (chosen()) {
      std::uniform_real_distribution<double> sdist(spec.scale_lo, spec.scale_hi);
      const std::array<double, 3> s{sdist(rng), sdist(rng), sdist(rng)};
      for (auto& p : out.points)
        for (int c = 0; c < 3; ++c) p[c] = static_cast<float>(p[c] * s[c]);
    }
  }
  if (spec.rotate_z_max > 0.0 || spec.tilt_max > 0.0) {
    if (chosen()) {
      Mat3 r = rotation_z(spec.rotate_z_max > 0.0 ? unit(rng) * spec.rotate_z_max : 0.0);
      if (spec.tilt_max > 0.0) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::array<double, 3> axis{gauss(rng), gauss(rng), gauss(rng)};
        const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
        if (n > 0.0) {
          for (auto& a : axis) a /= n;
          r = matmul3(rotation_axis(axis, (2.0 * unit(rng) - 1.0) * spec.tilt_max), r);
        }
      }
      apply_rotation(r, out.points);
    }
  }
  if (spec.translation > 0.0) {
    if (chosen()) {
      std::uniform_real_distribution<double> tdist(-spec.translation, spec.translation);
      const std::array<double, 3> t{tdist(rng), tdist(rng), tdist(rng)};
      for (auto& p : out.points)
        for (int c = 0; c < 3; ++c) p[c] = static_cast<float>(p[c] + t[c]);
    }
  }
  if (spec.jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.jitter_sigma);
    const double clip = spec.jitter_clip > 0.0 ? spec.jitter_clip : std::numeric_limits<double>::infinity();
    for (auto& p : out.points)
      for (int c = 0; c < 3; ++c) p[c] = static_cast<float>(p[c] + std::clamp(noise(rng), -clip, clip));
  }
  if (spec.dropout_max_ratio > 0.0) {
    const double ratio = unit(rng) * spec.dropout_max_ratio;
    const std::size_t n = out.points.size();
    const std::size_t drop = std::min(n - 1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n))));
    if (drop > 0) {
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      for (std::size_t i = 0; i < drop; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(order[i], order[pick(rng)]);
      }
      std::vector<char> removed(n, 0);
      for (std::size_t i = 0; i < drop; ++i) removed[order[i]] = 1;
      std::vector<Point3> kept;
      kept.reserve(n - drop);
      for (std::size_t i = 0; i < n; ++i)
        if (!removed[i]) kept.push_back(out.points[i]);
      out.points = std::move(kept);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text formats
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_float(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  return std::string(buf, res.ptr);
}

inline float parse_float(std::string_view s) {
  float v = 0.0f;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IoError("malformed float '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

/// One point per line: "x y z\n" with shortest round-trip decimal values.
inline void write_xyz(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& p : cloud.points)
    out << detail::format_float(p[0]) << ' ' << detail::format_float(p[1]) << ' ' << detail::format_float(p[2])
        << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline PointCloud read_xyz(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<std::string_view, 3> fields;
    std::string_view rest(line);
    for (int c = 0; c < 3; ++c) {
      const auto sp = rest.find(' ');
      if (c < 2 && sp == std::string_view::npos)
        throw IoError(path + ":" + std::to_string(lineno) + ": expected three space-separated values");
      fields[c] = c < 2 ? rest.substr(0, sp) : rest;
      if (c < 2) rest.remove_prefix(sp + 1);
    }
    cloud.points.push_back({detail::parse_float(fields[0]), detail::parse_float(fields[1]),
                            detail::parse_float(fields[2])});
  }
  if (cloud.points.empty()) throw IoError("'" + path + "' contains no points");
  return cloud;
}

struct ManifestRow {
  std::string path;
  int label = -1;  // -1 when unlabeled
  Domain domain = Domain::kSource;
  std::string split;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "path,label,domain,split\n";
  for (const auto& r : rows) out << r.path << ',' << r.label << ',' << domain_name(r.domain) << ',' << r.split << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "path,label,domain,split")
    throw IoError("'" + path + "': expected header path,label,domain,split");
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4) throw IoError("'" + path + "': malformed row '" + line + "'");
    ManifestRow r;
    r.path = cells[0];
    try {
      r.label = std::stoi(cells[1]);
      r.domain = parse_domain(cells[2]);
    } catch (const std::exception&) {
      throw IoError("'" + path + "': malformed row '" + line + "'");
    }
    r.split = cells[3];
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace cot
