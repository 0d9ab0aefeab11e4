#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "cot/mixup.hpp"
#include "cot/pointcloud.hpp"

using namespace cot;

namespace {

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, int label = 0) {
  std::normal_distribution<double> g(0.0, 1.0);
  PointCloud c;
  c.label = label;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({static_cast<float>(g(rng)), static_cast<float>(g(rng)), static_cast<float>(g(rng))});
  return c;
}

double max_norm(const PointCloud& c) {
  double m = 0.0;
  for (const auto& p : c.points) m = std::max(m, std::sqrt(sq_distance(p, {0, 0, 0})));
  return m;
}

// Textbook greedy max-min selection: recompute each candidate's distance to
// the whole selected set at every step.
std::vector<std::size_t> greedy_oracle(const std::vector<Point3>& pts, std::size_t n_out, std::size_t start) {
  std::vector<std::size_t> sel{start};
  while (sel.size() < n_out) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double dmin = std::numeric_limits<double>::infinity();
      for (auto s : sel) {
        double d = 0.0;
        for (int c = 0; c < 3; ++c) d += (double(pts[i][c]) - pts[s][c]) * (double(pts[i][c]) - pts[s][c]);
        dmin = std::min(dmin, d);
      }
      if (dmin > best) {
        best = dmin;
        arg = i;
      }
    }
    sel.push_back(arg);
  }
  return sel;
}

}  // namespace

TEST(Normalize, SymmetricPair) {
  PointCloud c{{{2, 0, 0}, {-2, 0, 0}}, std::nullopt, Domain::kSource};
  auto n = normalize_unit_sphere(c);
  EXPECT_EQ(n.points[0], (Point3{1, 0, 0}));
  EXPECT_EQ(n.points[1], (Point3{-1, 0, 0}));
}

TEST(Normalize, SinglePointGoesToOrigin) {
  PointCloud c{{{5, 5, 5}}, std::nullopt, Domain::kSource};
  EXPECT_EQ(normalize_unit_sphere(c).points[0], (Point3{0, 0, 0}));
}

TEST(Normalize, EmptyCloudIsContractError) { EXPECT_THROW(normalize_unit_sphere(PointCloud{}), ContractError); }

TEST(Normalize, CubeCornersReachUnitNorm) {
  PointCloud c;
  for (int i = 0; i < 8; ++i) c.points.push_back({float(i & 1), float((i >> 1) & 1), float((i >> 2) & 1)});
  auto n = normalize_unit_sphere(c);
  // centroid (0.5,0.5,0.5); every corner at distance sqrt(3)/2 before scaling.
  for (std::size_t i = 0; i < 8; ++i)
    for (int k = 0; k < 3; ++k)
      EXPECT_NEAR(n.points[i][k], (c.points[i][k] - 0.5) / (std::sqrt(3.0) / 2.0), 1e-6);
  EXPECT_NEAR(max_norm(n), 1.0, 1e-6);
}

TEST(Normalize, InvariantsAndIdempotence) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    auto c = normalize_unit_sphere(random_cloud(1 + t * 3, rng));
    std::array<double, 3> centroid{};
    for (const auto& p : c.points)
      for (int k = 0; k < 3; ++k) centroid[k] += p[k] / double(c.size());
    if (c.size() > 1) {
      for (double v : centroid) EXPECT_NEAR(v, 0.0, 1e-5);
      EXPECT_LE(max_norm(c), 1.0 + 1e-6);
      EXPECT_GE(max_norm(c), 1.0 - 1e-5);
    }
    auto again = normalize_unit_sphere(c);
    for (std::size_t i = 0; i < c.size(); ++i)
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(again.points[i][k], c.points[i][k], 1e-5);
  }
}

TEST(Fps, SquareCorners) {
  PointCloud c{{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}}, std::nullopt, Domain::kSource};
  auto s = farthest_point_sample(c, 2, 0);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.points[0], (Point3{0, 0, 0}));
  EXPECT_EQ(s.points[1], (Point3{1, 1, 0}));
}

TEST(Fps, CollinearTieGoesToLowestIndex) {
  PointCloud c{{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}}, std::nullopt, Domain::kSource};
  auto idx = farthest_point_indices(c.points, 3, 0);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 3, 1}));
  EXPECT_EQ(idx, greedy_oracle(c.points, 3, 0));
}

TEST(Fps, FullSampleIsPermutation) {
  std::mt19937_64 rng(3);
  auto c = random_cloud(20, rng);
  auto idx = farthest_point_indices(c.points, 20, 5);
  std::set<std::size_t> uniq(idx.begin(), idx.end());
  EXPECT_EQ(uniq.size(), 20u);
}

TEST(Fps, MatchesGreedyOracle) {
  std::mt19937_64 rng(11);
  for (std::size_t n = 1; n <= 32; ++n) {
    auto c = random_cloud(n, rng);
    // also plant exact duplicates and grid ties
    if (n > 4) c.points[n - 1] = c.points[0];
    for (std::size_t out = 1; out <= n; out += 3) {
      const std::size_t start = (n * 7 + out) % n;
      EXPECT_EQ(farthest_point_indices(c.points, out, start), greedy_oracle(c.points, out, start)) << n;
    }
  }
  PointCloud grid;
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 4; ++y) grid.points.push_back({float(x), float(y), 0});
  for (std::size_t out = 1; out <= 16; ++out)
    EXPECT_EQ(farthest_point_indices(grid.points, out, 0), greedy_oracle(grid.points, out, 0));
}

TEST(Fps, TooManyIsContractError) {
  PointCloud c{{{0, 0, 0}}, std::nullopt, Domain::kSource};
  EXPECT_THROW(farthest_point_sample(c, 2), ContractError);
}

TEST(Augment, ZeroWidthSpecIsIdentity) {
  std::mt19937_64 rng(1);
  auto c = random_cloud(64, rng);
  for (std::uint64_t seed = 0; seed < 5; ++seed) EXPECT_EQ(augment(c, AugmentationSpec::identity(), seed).points, c.points);
}

TEST(Augment, RotationIsIsometry) {
  std::mt19937_64 rng(2);
  auto c = normalize_unit_sphere(random_cloud(40, rng));
  AugmentationSpec spec;
  spec.rotate_z_max = 2.0 * std::numbers::pi;
  spec.tilt_max = 0.3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto r = augment(c, spec, seed);
    ASSERT_EQ(r.size(), c.size());
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = i + 1; j < c.size(); ++j)
        EXPECT_NEAR(std::sqrt(sq_distance(r.points[i], r.points[j])), std::sqrt(sq_distance(c.points[i], c.points[j])),
                    1e-5);
  }
}

TEST(Augment, DropoutKeepsSubset) {
  std::mt19937_64 rng(3);
  auto c = random_cloud(100, rng);
  AugmentationSpec spec;
  spec.dropout_max_ratio = 0.5;
  bool saw_drop = false;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto d = augment(c, spec, seed);
    EXPECT_GE(d.size(), 50u);
    EXPECT_LE(d.size(), 100u);
    saw_drop |= d.size() < 100;
    // survivors keep their relative order, so they form a subsequence
    std::size_t j = 0;
    for (const auto& p : d.points) {
      while (j < c.size() && c.points[j] != p) ++j;
      ASSERT_LT(j, c.size());
      ++j;
    }
    EXPECT_EQ(augment(c, spec, seed).points, d.points);
  }
  EXPECT_TRUE(saw_drop);
}

TEST(Augment, DropoutNeverEmpties) {
  PointCloud c{{{1, 2, 3}}, std::nullopt, Domain::kSource};
  AugmentationSpec spec;
  spec.dropout_max_ratio = 0.99;
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_EQ(augment(c, spec, seed).size(), 1u);
}

TEST(Augment, JitterIsClamped) {
  std::mt19937_64 rng(4);
  auto c = random_cloud(200, rng);
  AugmentationSpec spec;
  spec.jitter_sigma = 0.5;
  spec.jitter_clip = 0.05;
  auto j = augment(c, spec, 9);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(j.points[i][k] - c.points[i][k]), 0.05 + 1e-6);
}

TEST(Augment, SeedDeterminism) {
  std::mt19937_64 rng(5);
  auto c = random_cloud(50, rng);
  auto spec = AugmentationSpec::contrastive();
  EXPECT_EQ(augment(c, spec, 77).points, augment(c, spec, 77).points);
  EXPECT_NE(augment(c, spec, 77).points, augment(c, spec, 78).points);
}

TEST(Augment, InvalidSpecRejected) {
  AugmentationSpec spec;
  spec.scale_lo = 0.0;
  PointCloud c{{{0, 0, 0}}, std::nullopt, Domain::kSource};
  EXPECT_THROW(augment(c, spec, 0), ContractError);
}

TEST(Mixup, Endpoints) {
  std::mt19937_64 rng(6);
  auto a = random_cloud(30, rng, 1);
  auto b = random_cloud(30, rng, 3);
  auto m0 = pcm_mixup(a, b, 0.0, 5, 1);
  EXPECT_EQ(m0.cloud.points, a.points);
  EXPECT_EQ(m0.soft_label, (std::vector<float>{0, 1, 0, 0, 0}));
  auto m1 = pcm_mixup(a, b, 1.0, 5, 1);
  auto sorted = [](std::vector<Point3> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  EXPECT_EQ(sorted(m1.cloud.points), sorted(b.points));
  EXPECT_EQ(m1.soft_label, (std::vector<float>{0, 0, 0, 1, 0}));
}

TEST(Mixup, IdenticalInputsUnchanged) {
  std::mt19937_64 rng(7);
  auto a = random_cloud(25, rng, 2);
  for (double lam : {0.1, 0.5, 0.9}) {
    auto m = pcm_mixup(a, a, lam, 4, 3);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(m.cloud.points[i][k], a.points[i][k], 1e-6);
    EXPECT_FLOAT_EQ(m.soft_label[2], 1.0f);
  }
}

TEST(Mixup, SoftLabelOnSimplex) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 30; ++t) {
    auto a = random_cloud(100, rng, t % 5);  // large clouds take the FPS route
    auto b = random_cloud(100, rng, (t * 3) % 5);
    auto m = pcm_mixup(a, b, u(rng), 5, t);
    EXPECT_EQ(m.cloud.size(), 64u);
    double s = 0.0;
    for (float v : m.soft_label) {
      EXPECT_GE(v, 0.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Mixup, AssignmentMinimizesTotalDistance) {
  // For lambda=1/2 the midpoints pair each a-point with its assigned b-point;
  // compare the pairing cost with all permutations on a tiny instance.
  std::mt19937_64 rng(9);
  auto a = random_cloud(5, rng, 0);
  auto b = random_cloud(5, rng, 1);
  auto m = pcm_mixup(a, b, 1.0, 2, 0);
  double chosen = 0.0;
  for (std::size_t i = 0; i < 5; ++i) chosen += sq_distance(a.points[i], m.cloud.points[i]);
  std::vector<std::size_t> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += sq_distance(a.points[i], b.points[perm[i]]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_NEAR(chosen, best, 1e-5);
}

TEST(Mixup, UnlabeledIsContractError) {
  std::mt19937_64 rng(10);
  auto a = random_cloud(5, rng, 0);
  auto b = random_cloud(5, rng, 1);
  b.label.reset();
  EXPECT_THROW(pcm_mixup(a, b, 0.5, 2, 0), ContractError);
}

TEST(Formats, XyzRoundTrip) {
  std::mt19937_64 rng(12);
  auto c = random_cloud(33, rng);
  const auto path = (std::filesystem::temp_directory_path() / "cot_test_roundtrip.xyz").string();
  write_xyz(path, c);
  EXPECT_EQ(read_xyz(path).points, c.points);
  std::ifstream in(path, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 33);
  EXPECT_EQ(text.find('\r'), std::string::npos);
  std::filesystem::remove(path);
}

TEST(Formats, XyzMissingFileIsIoError) { EXPECT_THROW(read_xyz("/nonexistent/cot.xyz"), IoError); }

TEST(Formats, ManifestRoundTrip) {
  std::vector<ManifestRow> rows{{"a/0.xyz", 3, Domain::kSource, "train"}, {"b/1.xyz", -1, Domain::kTarget, "test"}};
  const auto path = (std::filesystem::temp_directory_path() / "cot_test_manifest.csv").string();
  write_manifest(path, rows);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "path,label,domain,split");
  auto back = read_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].path, "b/1.xyz");
  EXPECT_EQ(back[1].label, -1);
  EXPECT_EQ(back[1].domain, Domain::kTarget);
  EXPECT_EQ(back[0].split, "train");
  std::filesystem::remove(path);
}
