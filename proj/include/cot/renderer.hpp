#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "cot/parallel.hpp"
#include "cot/pointcloud.hpp"

namespace cot {

struct RenderParams {
  double point_radius = 0.008;
  std::size_t points_per_pixel = 2;
  std::size_t image_size = 32;

  bool operator==(const RenderParams&) const = default;
};

/// Equatorial-by-default ring of m orthographic cameras around the Z axis.
struct CameraRig {
  std::size_t views = 12;
  double elevation = 0.0;

  /// View k sits at azimuth 2*pi*k/m.
  double azimuth(std::size_t k) const { return 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(views); }
};

/// Single-channel image, row-major, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  bool operator==(const Image&) const = default;
};

struct ImageStack {
  std::vector<Image> views;
  RenderParams render_params;
};

namespace detail {

// sin/cos with exact values at multiples of pi/2, so quarter-turn views of
// symmetric clouds agree bit-for-bit.
inline std::pair<double, double> exact_sincos(double angle) {
  const double quarter = angle / (std::numbers::pi / 2.0);
  const double r = std::round(quarter);
  if (std::abs(quarter - r) < 1e-12) {
    const long q = ((static_cast<long>(r) % 4) + 4) % 4;
    constexpr std::array<double, 4> s{0.0, 1.0, 0.0, -1.0};
    constexpr std::array<double, 4> c{1.0, 0.0, -1.0, 0.0};
    return {s[q], c[q]};
  }
  return {std::sin(angle), std::cos(angle)};
}

// Area of the disc (cx, cy, r) inside [x0,x1]x[y0,y1] by 32-slice midpoint
// integration along x.
inline double disc_rect_overlap(double cx, double cy, double r, double x0, double x1, double y0, double y1) {
  const double lo = std::max(x0, cx - r), hi = std::min(x1, cx + r);
  if (hi <= lo) return 0.0;
  constexpr int kSlices = 32;
  const double step = (hi - lo) / kSlices;
  double area = 0.0;
  for (int s = 0; s < kSlices; ++s) {
    const double x = lo + (s + 0.5) * step;
    const double h2 = r * r - (x - cx) * (x - cx);
    if (h2 <= 0.0) continue;
    const double h = std::sqrt(h2);
    const double len = std::min(y1, cy + h) - std::max(y0, cy - h);
    if (len > 0.0) area += len * step;
  }
  return area;
}

}  // namespace detail

/// Orthographic render of one view. The cloud is rotated by `azimuth` about Z
/// and by `elevation` about X, then projected onto the x/z plane covering
/// [-1,1]^2 (image up = +z); depth is +y, nearer points have smaller depth.
/// Each pixel keeps the points_per_pixel nearest splats (ties by point index)
/// and stores min(1, sum of their covered pixel fractions).
inline Image render_view(const PointCloud& cloud, double azimuth, double elevation, const RenderParams& params) {
  require(params.image_size > 0, "image_size must be positive");
  require(params.points_per_pixel > 0, "points_per_pixel must be positive");
  require(params.point_radius > 0.0, "point_radius must be positive");
  const std::size_t size = params.image_size;
  const std::size_t keep = params.points_per_pixel;
  const double pixel = 2.0 / static_cast<double>(size);
  const double pixel_area = pixel * pixel;
  const double r = params.point_radius;
  const auto [sa, ca] = detail::exact_sincos(azimuth);
  const auto [se, ce] = detail::exact_sincos(elevation);

  struct Hit {
    double depth;
    std::size_t index;
    double coverage;
  };
  const Hit empty{std::numeric_limits<double>::infinity(), std::numeric_limits<std::size_t>::max(), 0.0};
  std::vector<Hit> hits(size * size * keep, empty);

  for (std::size_t idx = 0; idx < cloud.points.size(); ++idx) {
    const auto& p = cloud.points[idx];
    const double x1 = ca * p[0] - sa * p[1];
    const double y1 = sa * p[0] + ca * p[1];
    const double z1 = p[2];
    const double u = x1;
    const double depth = ce * y1 - se * z1;
    const double v = se * y1 + ce * z1;
    if (u + r <= -1.0 || u - r >= 1.0 || v + r <= -1.0 || v - r >= 1.0) continue;
    const auto col_lo = static_cast<long>(std::floor((u - r + 1.0) / pixel));
    const auto col_hi = static_cast<long>(std::floor((u + r + 1.0) / pixel));
    const auto row_lo = static_cast<long>(std::floor((1.0 - (v + r)) / pixel));
    const auto row_hi = static_cast<long>(std::floor((1.0 - (v - r)) / pixel));
    for (long row = std::max(0L, row_lo); row <= std::min<long>(static_cast<long>(size) - 1, row_hi); ++row) {
      const double ytop = 1.0 - static_cast<double>(row) * pixel;
      for (long col = std::max(0L, col_lo); col <= std::min<long>(static_cast<long>(size) - 1, col_hi); ++col) {
        const double xl = -1.0 + static_cast<double>(col) * pixel;
        const double cov = detail::disc_rect_overlap(u, v, r, xl, xl + pixel, ytop - pixel, ytop) / pixel_area;
        if (cov <= 0.0) continue;
        Hit* slot = &hits[(static_cast<std::size_t>(row) * size + static_cast<std::size_t>(col)) * keep];
        Hit h{depth, idx, cov};
        // insertion into the sorted (depth, index) list of length `keep`
        for (std::size_t k = 0; k < keep; ++k) {
          const bool nearer = h.depth < slot[k].depth || (h.depth == slot[k].depth && h.index < slot[k].index);
          if (nearer) std::swap(h, slot[k]);
        }
      }
    }
  }

  Image img;
  img.height = size;
  img.width = size;
  img.pixels.assign(size * size, 0.0f);
  for (std::size_t px = 0; px < size * size; ++px) {
    double total = 0.0;
    for (std::size_t k = 0; k < keep; ++k) total += hits[px * keep + k].coverage;
    img.pixels[px] = static_cast<float>(std::min(1.0, total));
  }
  return img;
}

/// Renders every rig view in azimuth order; views are independent and run in
/// parallel without affecting the output.
inline ImageStack render_multiview(const PointCloud& cloud, const CameraRig& rig, const RenderParams& params) {
  require(rig.views >= 1, "camera rig needs at least one view");
  ImageStack stack;
  stack.render_params = params;
  stack.views.resize(rig.views);
  parallel_for(0, rig.views, 1, [&](std::size_t k) {
    stack.views[k] = render_view(cloud, rig.azimuth(k), rig.elevation, params);
  });
  return stack;
}

inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (float v : img.pixels) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    bytes.push_back(static_cast<std::uint8_t>(std::lround(clamped * 255.0)));
  }
  return bytes;
}

inline void write_pgm(const std::string& path, const Image& img) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace cot
