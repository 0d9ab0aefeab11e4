#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cot/dataset.hpp"
#include "cot/pointcloud.hpp"
#include "cot/rng.hpp"

namespace cot {

inline constexpr int kShapeClasses = 5;

inline const char* shape_name(int class_id) {
  static constexpr const char* names[] = {"sphere", "box", "cylinder", "cone", "torus"};
  require(class_id >= 0 && class_id < kShapeClasses, "unknown shape class " + std::to_string(class_id));
  return names[class_id];
}

/// Per-seed shape parameters. Meaning by class:
/// sphere {radius}, box {x, y, z}, cylinder {radius, height},
/// cone {radius, height}, torus {major, minor}.
struct ShapeParams {
  int class_id = 0;
  std::array<double, 3> p{0.0, 0.0, 0.0};
};

/// Acquisition conditions of one domain.
struct DomainSpec {
  double shift_noise_sigma = 0.0;
  double crop_fraction = 0.0;  // share of the full turn removed as one azimuth sector
  std::size_t density = 64;    // points per cloud
  double sampling_bias = 0.0;  // in [0, 1): thins points toward the bottom of the shape

  bool operator==(const DomainSpec&) const = default;
};

inline void validate(const DomainSpec& s) {
  require(s.shift_noise_sigma >= 0.0, "shift_noise_sigma must be >= 0");
  require(s.crop_fraction >= 0.0 && s.crop_fraction <= 0.5, "crop_fraction must be in [0, 0.5]");
  require(s.density >= 32, "density must be >= 32");
  require(s.sampling_bias >= 0.0 && s.sampling_bias < 1.0, "sampling_bias must be in [0, 1)");
}

namespace detail {

inline ShapeParams draw_params(int class_id, std::mt19937_64& rng) {
  shape_name(class_id);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  ShapeParams s{class_id, {}};
  switch (class_id) {
    case 0: s.p = {u(0.8, 1.2), 0.0, 0.0}; break;
    case 1: s.p = {u(0.6, 1.4), u(0.6, 1.4), u(0.6, 1.4)}; break;
    case 2: s.p = {u(0.3, 0.6), u(1.0, 2.0), 0.0}; break;
    case 3: s.p = {u(0.4, 0.8), u(0.8, 1.6), 0.0}; break;
    default: s.p = {u(0.7, 1.0), u(0.15, 0.35), 0.0}; break;
  }
  return s;
}

// One uniform-by-area surface sample of the shape, in its canonical frame
// (centered on the origin, axis along z).
inline Point3 surface_point(const ShapeParams& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  auto pt = [](double x, double y, double z) {
    return Point3{static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)};
  };
  switch (s.class_id) {
    case 0: {
      std::normal_distribution<double> g(0.0, 1.0);
      double x = 0, y = 0, z = 0, n = 0;
      while (n < 1e-12) {
        x = g(rng);
        y = g(rng);
        z = g(rng);
        n = std::sqrt(x * x + y * y + z * z);
      }
      const double r = s.p[0] / n;
      return pt(x * r, y * r, z * r);
    }
    case 1: {
      const double a = s.p[0], b = s.p[1], c = s.p[2];
      const double areas[3] = {b * c, a * c, a * b};  // faces normal to x, y, z
      double pick = unit(rng) * (areas[0] + areas[1] + areas[2]);
      const int axis = pick < areas[0] ? 0 : (pick < areas[0] + areas[1] ? 1 : 2);
      const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      std::array<double, 3> half{a / 2, b / 2, c / 2};
      std::array<double, 3> q{};
      for (int k = 0; k < 3; ++k) q[k] = (2.0 * unit(rng) - 1.0) * half[k];
      q[axis] = sign * half[axis];
      return pt(q[0], q[1], q[2]);
    }
    case 2: {
      const double r = s.p[0], h = s.p[1];
      const double side = two_pi * r * h, cap = std::numbers::pi * r * r;
      const double pick = unit(rng) * (side + 2.0 * cap);
      const double theta = two_pi * unit(rng);
      if (pick < side) return pt(r * std::cos(theta), r * std::sin(theta), (unit(rng) - 0.5) * h);
      const double rho = r * std::sqrt(unit(rng));
      return pt(rho * std::cos(theta), rho * std::sin(theta), pick < side + cap ? h / 2 : -h / 2);
    }
    case 3: {
      // apex at +h/2, base disc at -h/2
      const double r = s.p[0], h = s.p[1];
      const double side = std::numbers::pi * r * std::hypot(r, h), base = std::numbers::pi * r * r;
      const double theta = two_pi * unit(rng);
      if (unit(rng) * (side + base) < side) {
        const double t = std::sqrt(unit(rng));  // distance from apex, area-uniform
        return pt(r * t * std::cos(theta), r * t * std::sin(theta), h / 2 - t * h);
      }
      const double rho = r * std::sqrt(unit(rng));
      return pt(rho * std::cos(theta), rho * std::sin(theta), -h / 2);
    }
    default: {
      const double R = s.p[0], r = s.p[1];
      for (;;) {
        const double a = two_pi * unit(rng), b = two_pi * unit(rng);
        // area element is proportional to R + r cos(b)
        if (unit(rng) * (R + r) <= R + r * std::cos(b))
          return pt((R + r * std::cos(b)) * std::cos(a), (R + r * std::cos(b)) * std::sin(a), r * std::sin(b));
      }
    }
  }
}

inline std::vector<Point3> sample_surface(const ShapeParams& s, std::size_t n, double bias, std::mt19937_64& rng) {
  // Height range of the canonical shape, for the bias weighting.
  double zlo = 0, zhi = 0;
  switch (s.class_id) {
    case 0: zlo = -s.p[0], zhi = s.p[0]; break;
    case 1: zlo = -s.p[2] / 2, zhi = s.p[2] / 2; break;
    case 2:
    case 3: zlo = -s.p[1] / 2, zhi = s.p[1] / 2; break;
    default: zlo = -s.p[1], zhi = s.p[1]; break;
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Point3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const Point3 p = surface_point(s, rng);
    if (bias > 0.0) {
      const double t = (p[2] - zlo) / (zhi - zlo);
      if (unit(rng) > 1.0 - bias * (1.0 - std::clamp(t, 0.0, 1.0))) continue;
    }
    pts.push_back(p);
  }
  return pts;
}

}  // namespace detail

/// Parameters generate_shape uses for (class_id, seed).
inline ShapeParams shape_params(int class_id, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return detail::draw_params(class_id, rng);
}

/// Area-uniform surface samples of a jittered parametric shape, normalized
/// to the unit sphere and labeled with its class.
inline PointCloud generate_shape(int class_id, std::size_t n, std::uint64_t seed, double sampling_bias = 0.0) {
  require(n >= 1, "generate_shape: n must be >= 1");
  require(sampling_bias >= 0.0 && sampling_bias < 1.0, "sampling_bias must be in [0, 1)");
  std::mt19937_64 rng(seed);
  const auto params = detail::draw_params(class_id, rng);
  PointCloud c;
  c.points = detail::sample_surface(params, n, sampling_bias, rng);
  c.label = class_id;
  return normalize_unit_sphere(c);
}

/// Azimuth sector emptied by the crop, in the final cloud's frame: every
/// point's angle about (apex_x, apex_y) lies outside center +- width/2.
struct CropSector {
  double apex_x = 0.0;
  double apex_y = 0.0;
  double center = 0.0;
  double width = 0.0;
};

struct ShiftedCloud {
  PointCloud cloud;
  std::optional<CropSector> sector;
};

inline double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0) a += two_pi;
  return a - std::numbers::pi;
}

/// One sample of a domain: shape -> noise -> sector crop -> resample to the
/// domain density -> renormalize.
inline ShiftedCloud generate_domain_sample(int class_id, const DomainSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::mt19937_64 rng(derive_seed(seed, {1}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double width = spec.crop_fraction * 2.0 * std::numbers::pi;
  const double center = wrap_angle(2.0 * std::numbers::pi * unit(rng));

  std::size_t raw_n = spec.density;
  if (spec.crop_fraction > 0.0)
    raw_n = static_cast<std::size_t>(std::ceil(static_cast<double>(spec.density) / (1.0 - spec.crop_fraction) * 1.5));
  for (std::uint64_t attempt = 0;; ++attempt) {
    PointCloud c = generate_shape(class_id, raw_n, derive_seed(seed, {2, attempt}), spec.sampling_bias);
    if (spec.shift_noise_sigma > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.shift_noise_sigma);
      for (auto& p : c.points)
        for (auto& v : p) v = static_cast<float>(v + noise(rng));
    }
    std::vector<Point3> kept;
    if (width > 0.0) {
      for (const auto& p : c.points)
        if (std::abs(wrap_angle(std::atan2(double(p[1]), double(p[0])) - center)) >= width / 2) kept.push_back(p);
    } else {
      kept = c.points;
    }
    if (kept.size() < spec.density) {
      raw_n *= 2;
      continue;
    }
    // uniform subset, original order preserved
    std::vector<std::size_t> idx(kept.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < spec.density; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(spec.density);
    std::sort(idx.begin(), idx.end());
    PointCloud out;
    out.label = class_id;
    for (auto i : idx) out.points.push_back(kept[i]);

    // same transform as normalize_unit_sphere, applied to the crop apex too
    std::array<double, 3> centroid{0, 0, 0};
    for (const auto& p : out.points)
      for (int k = 0; k < 3; ++k) centroid[k] += p[k];
    for (auto& v : centroid) v /= static_cast<double>(out.size());
    double max_norm = 0.0;
    for (const auto& p : out.points) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += (p[k] - centroid[k]) * (p[k] - centroid[k]);
      max_norm = std::max(max_norm, std::sqrt(s));
    }
    ShiftedCloud result{normalize_unit_sphere(out), std::nullopt};
    if (width > 0.0) {
      const double inv = max_norm > 0.0 ? 1.0 / max_norm : 0.0;
      result.sector = CropSector{-centroid[0] * inv, -centroid[1] * inv, center, width};
    }
    return result;
  }
}

struct DomainPair {
  Dataset source;
  Dataset target;
};

/// Class-balanced source and target splits with per_class samples of every
/// class. Domains and splits draw from disjoint seed streams.
inline DomainPair generate_domain_pair(const DomainSpec& spec_s, const DomainSpec& spec_t, std::size_t per_class,
                                       std::uint64_t seed, int num_classes = kShapeClasses,
                                       const std::string& split = "train") {
  validate(spec_s);
  validate(spec_t);
  require(num_classes >= 1 && num_classes <= kShapeClasses, "num_classes must be in [1, 5]");
  require(per_class >= 1, "per_class must be >= 1");
  const std::uint64_t split_tag = split == "train" ? 0 : (split == "test" ? 1 : 2 + std::hash<std::string>{}(split));
  auto build = [&](Domain domain, const DomainSpec& spec) {
    std::vector<std::string> ids;
    std::vector<PointCloud> clouds;
    for (std::size_t i = 0; i < per_class; ++i)
      for (int c = 0; c < num_classes; ++c) {
        const auto s = derive_seed(seed, {static_cast<std::uint64_t>(domain) + 11, split_tag, i,
                                          static_cast<std::uint64_t>(c)});
        auto sample = generate_domain_sample(c, spec, s).cloud;
        sample.domain = domain;
        char id[64];
        std::snprintf(id, sizeof(id), "%s_%s_%05zu", domain_name(domain), split.c_str(), clouds.size());
        ids.emplace_back(id);
        clouds.push_back(std::move(sample));
      }
    return make_dataset(domain, split, std::move(ids), std::move(clouds));
  };
  return {build(Domain::kSource, spec_s), build(Domain::kTarget, spec_t)};
}

/// Train and test splits for both domains.
inline Benchmark generate_benchmark(const DomainSpec& spec_s, const DomainSpec& spec_t, std::size_t per_class,
                                    std::size_t test_per_class, std::uint64_t seed, int num_classes = kShapeClasses) {
  auto train = generate_domain_pair(spec_s, spec_t, per_class, seed, num_classes, "train");
  auto test = generate_domain_pair(spec_s, spec_t, test_per_class, seed, num_classes, "test");
  return {std::move(train.source), std::move(test.source), std::move(train.target), std::move(test.target)};
}

}  // namespace cot
