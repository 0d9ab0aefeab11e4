#pragma once

#include <cstdint>
#include <vector>

#include "cot/ot.hpp"
#include "cot/pointcloud.hpp"

namespace cot {

struct MixedCloud {
  PointCloud cloud;
  std::vector<float> soft_label;  // length num_classes, on the simplex
};

/// Point-cloud mixup: interpolates a and b under a point-to-point pairing and
/// mixes their one-hot labels with weight lambda on b.
///
/// Clouds of up to 64 points are paired by an exact minimum squared-distance
/// assignment. Larger clouds are first reduced to 64 points each by farthest
/// point sampling (start index drawn from `seed`) and paired in selection
/// order.
inline MixedCloud pcm_mixup(const PointCloud& a, const PointCloud& b, double lambda, int num_classes,
                            std::uint64_t seed) {
  validate(a);
  validate(b);
  require(a.label.has_value() && b.label.has_value(), "pcm_mixup needs labeled inputs");
  require(a.size() == b.size(), "pcm_mixup needs clouds of equal cardinality");
  require(lambda >= 0.0 && lambda <= 1.0, "pcm_mixup: lambda must be in [0, 1]");
  require(num_classes > 0 && *a.label >= 0 && *a.label < num_classes && *b.label >= 0 && *b.label < num_classes,
          "pcm_mixup: label out of range");
  constexpr std::size_t kExactLimit = 64;

  std::vector<Point3> pa = a.points, pb = b.points;
  std::vector<std::size_t> pairing(pa.size());
  if (pa.size() <= kExactLimit) {
    Matrix cost(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::size_t j = 0; j < pb.size(); ++j) cost(i, j) = sq_distance(pa[i], pb[j]);
    pairing = solve_assignment(cost);
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> start(0, pa.size() - 1);
    const auto ia = farthest_point_indices(pa, kExactLimit, start(rng));
    const auto ib = farthest_point_indices(pb, kExactLimit, start(rng));
    std::vector<Point3> sa, sb;
    for (std::size_t k = 0; k < kExactLimit; ++k) {
      sa.push_back(pa[ia[k]]);
      sb.push_back(pb[ib[k]]);
    }
    pa = std::move(sa);
    pb = std::move(sb);
    pairing.resize(kExactLimit);
    for (std::size_t k = 0; k < kExactLimit; ++k) pairing[k] = k;
  }

  MixedCloud out;
  out.cloud.domain = a.domain;
  out.cloud.label = lambda < 0.5 ? a.label : b.label;
  out.cloud.points.resize(pa.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (int c = 0; c < 3; ++c)
      out.cloud.points[i][c] =
          static_cast<float>((1.0 - lambda) * pa[i][c] + lambda * static_cast<double>(pb[pairing[i]][c]));
  out.soft_label.assign(static_cast<std::size_t>(num_classes), 0.0f);
  out.soft_label[static_cast<std::size_t>(*a.label)] += static_cast<float>(1.0 - lambda);
  out.soft_label[static_cast<std::size_t>(*b.label)] += static_cast<float>(lambda);
  return out;
}

}  // namespace cot
