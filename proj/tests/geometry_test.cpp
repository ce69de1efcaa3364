// Copyright 2026 The RobustPrompt3D Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "rpd/error.hpp"
#include "rpd/geometry.hpp"
#include "rpd/gradcheck.hpp"
#include "test_util.hpp"

namespace rpd::geo {
namespace {

using rpd::testing::random_cloud;

PointCloud cloud(std::initializer_list<Vec3> pts) {
  PointCloud pc;
  pc.points = pts;
  return pc;
}

template <typename Fn>
void expect_error(ErrorCode code, Fn&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Brute-force oracles, written independently of the library kernels.
double oracle_chamfer(const PointCloud& a, const PointCloud& b) {
  auto one_way = [](const PointCloud& x, const PointCloud& y) {
    double total = 0;
    for (const auto& p : x.points) {
      double best = 1e300;
      for (const auto& q : y.points) {
        double d = 0;
        for (int c = 0; c < 3; ++c) d += (double(p[c]) - q[c]) * (double(p[c]) - q[c]);
        best = std::min(best, d);
      }
      total += best;
    }
    return total / x.size();
  };
  return one_way(a, b) + one_way(b, a);
}

std::vector<double> oracle_knn(const PointCloud& pc, std::size_t k) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < pc.size(); ++j) {
      if (i == j) continue;
      double s = 0;
      for (int c = 0; c < 3; ++c) s += (double(pc.points[i][c]) - pc.points[j][c]) * (double(pc.points[i][c]) - pc.points[j][c]);
      d.push_back(std::sqrt(s));
    }
    std::sort(d.begin(), d.end());
    out.push_back(std::accumulate(d.begin(), d.begin() + long(k), 0.0) / double(k));
  }
  return out;
}

double radius(const Vec3& p) { return std::sqrt(double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]); }

TEST(Normalize, CenteredPair) {
  auto out = normalize_to_unit_sphere(cloud({{2, 0, 0}, {-2, 0, 0}}));
  EXPECT_EQ(out.points[0], (Vec3{1, 0, 0}));
  EXPECT_EQ(out.points[1], (Vec3{-1, 0, 0}));
}

TEST(Normalize, Idempotent) {
  std::mt19937_64 rng(1);
  auto once = normalize_to_unit_sphere(random_cloud(50, rng, -3, 5));
  auto twice = normalize_to_unit_sphere(once);
  for (std::size_t i = 0; i < once.size(); ++i) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(once.points[i][c], twice.points[i][c], 1e-5);
  }
}

TEST(Normalize, CentroidAndRadius) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto out = normalize_to_unit_sphere(random_cloud(64, rng, -10, 3));
    double cx = 0, cy = 0, cz = 0, rmax = 0;
    for (const auto& p : out.points) {
      cx += p[0];
      cy += p[1];
      cz += p[2];
      rmax = std::max(rmax, radius(p));
    }
    EXPECT_NEAR(cx / 64, 0.0, 1e-5);
    EXPECT_NEAR(cy / 64, 0.0, 1e-5);
    EXPECT_NEAR(cz / 64, 0.0, 1e-5);
    EXPECT_NEAR(rmax, 1.0, 1e-5);
  }
}

TEST(Normalize, SinglePointIsDegenerate) {
  expect_error(ErrorCode::DegenerateCloud, [] { normalize_to_unit_sphere(cloud({{5, 5, 5}})); });
}

TEST(FarthestPointSample, Collinear) {
  auto pc = cloud({{0, 0, 0}, {0.5f, 0, 0}, {1, 0, 0}});
  EXPECT_EQ(farthest_point_indices(pc, 2, 0), (std::vector<std::size_t>{0, 2}));
}

TEST(FarthestPointSample, FullCloud) {
  std::mt19937_64 rng(3);
  auto pc = random_cloud(20, rng);
  for (std::size_t start : {0u, 7u, 19u}) {
    auto idx = farthest_point_indices(pc, 20, start);
    std::sort(idx.begin(), idx.end());
    std::vector<std::size_t> all(20);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(idx, all);
  }
}

TEST(FarthestPointSample, GreedyPropertyBruteForce) {
  std::mt19937_64 rng(4);
  auto pc = random_cloud(64, rng);
  auto idx = farthest_point_indices(pc, 16, 0);
  auto d = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (int c = 0; c < 3; ++c) s += std::pow(double(pc.points[i][c]) - pc.points[j][c], 2);
    return std::sqrt(s);
  };
  // the distance at which the last point was chosen
  double last = 1e300;
  for (std::size_t s = 0; s + 1 < idx.size(); ++s) last = std::min(last, d(idx.back(), idx[s]));
  for (std::size_t i = 0; i < 64; ++i) {
    if (std::find(idx.begin(), idx.end(), i) != idx.end()) continue;
    double to_set = 1e300;
    for (std::size_t s = 0; s + 1 < idx.size(); ++s) to_set = std::min(to_set, d(i, idx[s]));
    EXPECT_LE(to_set, last + 1e-9);
  }
  std::vector<std::size_t> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_EQ(farthest_point_indices(pc, 16, 0), idx);
}

TEST(FarthestPointSample, CountOutOfRange) {
  auto pc = cloud({{0, 0, 0}, {1, 0, 0}});
  expect_error(ErrorCode::CountOutOfRange, [&] { farthest_point_sample(pc, 3); });
  expect_error(ErrorCode::CountOutOfRange, [&] { farthest_point_sample(pc, 0); });
}

TEST(FarthestPointSample, DuplicatesStillDistinctIndices) {
  auto pc = cloud({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
  auto idx = farthest_point_indices(pc, 3, 1);
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Chamfer, Examples) {
  auto a = cloud({{0, 0, 0}});
  auto b = cloud({{1, 0, 0}});
  EXPECT_DOUBLE_EQ(chamfer_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b), 2.0);
  expect_error(ErrorCode::EmptyCloud, [&] { chamfer_distance(a, PointCloud{}); });
}

TEST(Chamfer, MatchesBruteForceAndIsSymmetric) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_cloud(8, rng);
    auto b = random_cloud(8, rng);
    EXPECT_NEAR(chamfer_distance(a, b), oracle_chamfer(a, b), 1e-6);
    EXPECT_EQ(chamfer_distance(a, b), chamfer_distance(b, a));
  }
}

TEST(Chamfer, ZeroIffSetsCoincide) {
  auto a = cloud({{0, 0, 0}, {1, 1, 1}});
  auto b = cloud({{1, 1, 1}, {0, 0, 0}, {0, 0, 0}});
  EXPECT_EQ(chamfer_distance(a, b), 0.0);
  auto c = cloud({{1, 1, 1}, {0, 0, 0}, {0, 0, 0.1f}});
  EXPECT_GT(chamfer_distance(a, c), 0.0);
}

TEST(Hausdorff, Examples) {
  auto a = cloud({{0, 0, 0}});
  auto b = cloud({{1, 0, 0}});
  EXPECT_EQ(hausdorff_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(hausdorff_distance(a, b), 1.0);
  // A subset of B, B has one extra point 3 away from everything in A.
  auto big_a = cloud({{0, 0, 0}, {1, 0, 0}});
  auto big_b = cloud({{0, 0, 0}, {1, 0, 0}, {4, 0, 0}});
  EXPECT_DOUBLE_EQ(hausdorff_distance(big_a, big_b), 3.0);
  EXPECT_DOUBLE_EQ(hausdorff_distance(big_b, big_a), 3.0);
  EXPECT_DOUBLE_EQ(directed_hausdorff(big_a, big_b), 0.0);
}

TEST(Hausdorff, Symmetric) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_cloud(9, rng);
    auto b = random_cloud(5, rng);
    EXPECT_EQ(hausdorff_distance(a, b), hausdorff_distance(b, a));
  }
}

TEST(Knn, Examples) {
  auto line = cloud({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}});
  EXPECT_EQ(knn_mean_distance(line, 1), (std::vector<double>{1, 1, 1}));
  auto dup = cloud({{0, 0, 0}, {0, 0, 0}, {3, 1, 0}, {3, 1, 0}});
  EXPECT_EQ(knn_mean_distance(dup, 1), (std::vector<double>{0, 0, 0, 0}));
  expect_error(ErrorCode::KTooLarge, [&] { knn_mean_distance(line, 3); });
}

TEST(Knn, MatchesPairwiseSortOracle) {
  std::mt19937_64 rng(7);
  auto pc = random_cloud(32, rng);
  auto got = knn_mean_distance(pc, 4);
  auto want = oracle_knn(pc, 4);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Knn, RotationInvariant) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> ang(0, 6.28f);
  for (int trial = 0; trial < 10; ++trial) {
    auto pc = random_cloud(30, rng);
    const float a = ang(rng), b = ang(rng);
    PointCloud rot = pc;
    for (auto& p : rot.points) {
      float x = std::cos(a) * p[0] - std::sin(a) * p[1];
      float y = std::sin(a) * p[0] + std::cos(a) * p[1];
      float z = p[2];
      float y2 = std::cos(b) * y - std::sin(b) * z;
      float z2 = std::sin(b) * y + std::cos(b) * z;
      p = {x, y2, z2};
    }
    auto d0 = knn_mean_distance(pc, 3);
    auto d1 = knn_mean_distance(rot, 3);
    for (std::size_t i = 0; i < d0.size(); ++i) EXPECT_NEAR(d0[i], d1[i], 1e-5);
  }
}

TEST(DifferentiableDistances, ValuesMatchAndGradientsCheck) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_cloud(6, rng);
    auto b = random_cloud(5, rng);
    diff::Tape tape;
    auto va = tape.constant(to_tensor(a));
    auto vb = tape.constant(to_tensor(b));
    EXPECT_NEAR(chamfer_distance(va, vb).value().item(), chamfer_distance(a, b), 1e-6);
    EXPECT_NEAR(directed_hausdorff(va, vb).value().item(), directed_hausdorff(a, b), 1e-6);
    auto knn = knn_mean_distance(va, 2).value();
    auto ref = knn_mean_distance(a, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(knn[i], ref[i], 1e-6);

    const auto bt = to_tensor(b);
    auto cd = [&](diff::Tape& t, diff::Var x) { return chamfer_distance(x, t.constant(bt)); };
    auto hd = [&](diff::Tape& t, diff::Var x) { return directed_hausdorff(x, t.constant(bt)); };
    auto kn = [&](diff::Tape&, diff::Var x) { return diff::sum(knn_mean_distance(x, 2)); };
    EXPECT_TRUE(diff::finite_diff_check(cd, to_tensor(a)).passed);
    EXPECT_TRUE(diff::finite_diff_check(hd, to_tensor(a)).passed);
    EXPECT_TRUE(diff::finite_diff_check(kn, to_tensor(a)).passed);
  }
}

TEST(Shapes, SphereWithoutNoiseHasUnitRadii) {
  ShapeClassSpec sphere{"sphere", ShapeFamily::Sphere, 0.0f};
  for (std::size_t n : {64u, 255u}) {
    auto pc = generate_shape(sphere, 0, n, 17);
    for (const auto& p : pc.points) EXPECT_NEAR(radius(p), 1.0, 1e-5);
  }
}

TEST(Shapes, Deterministic) {
  for (const auto& spec : default_shape_classes()) {
    EXPECT_EQ(generate_shape(spec, 3, 128, 99), generate_shape(spec, 3, 128, 99));
    EXPECT_EQ(generate_shape(spec, 3, 128, 99).label, 3u);
  }
}

TEST(Shapes, CubeSurfaceMembership) {
  std::mt19937_64 rng(10);
  auto pts = sample_surface(ShapeFamily::Cube, 500, rng);
  for (const auto& p : pts) {
    const float m = std::max({std::abs(p[0]), std::abs(p[1]), std::abs(p[2])});
    EXPECT_NEAR(m, 1.0f, 1e-5);
  }
}

TEST(Shapes, AllFamiliesNormalized) {
  for (const auto& spec : default_shape_classes()) {
    auto pc = generate_shape(spec, 0, 256, 5);
    double rmax = 0;
    for (const auto& p : pc.points) rmax = std::max(rmax, radius(p));
    EXPECT_NEAR(rmax, 1.0, 1e-5) << spec.name;
  }
}

TEST(Shapes, UnknownClass) {
  const auto classes = default_shape_classes();
  expect_error(ErrorCode::UnknownClass, [&] { generate_shape(classes, "teapot", 64, 1); });
  EXPECT_EQ(generate_shape(classes, "torus", 64, 1).label, 4u);
}

TEST(Dataset, SyntheticSplitAndManifestRoundTrip) {
  SyntheticConfig cfg;
  cfg.train_per_class = 3;
  cfg.test_per_class = 2;
  cfg.points = 64;
  auto split = make_synthetic_split(cfg);
  EXPECT_EQ(split.train.size(), 24u);
  EXPECT_EQ(split.test.size(), 16u);
  const auto path = std::filesystem::temp_directory_path() / "rpd_manifest_test.json";
  write_manifest(split.test_manifest, path);
  auto rebuilt = load_from_manifest(read_manifest(path));
  ASSERT_EQ(rebuilt.size(), split.test.size());
  for (std::size_t i = 0; i < rebuilt.size(); ++i) EXPECT_EQ(rebuilt.samples[i], split.test.samples[i]);
  std::filesystem::remove(path);
}

TEST(OffIo, ReadsVerticesSamplesAndNormalizes) {
  const auto dir = std::filesystem::temp_directory_path() / "rpd_off_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream off(dir / "box.off");
    off << "OFF\n8 6 0\n";
    for (int i = 0; i < 8; ++i) off << (i & 1 ? 3 : 1) << ' ' << (i & 2 ? 3 : 1) << ' ' << (i & 4 ? 3 : 1) << '\n';
    off << "4 0 1 3 2\n";
  }
  {
    std::ofstream glued(dir / "glued.off");
    glued << "OFF3 0 0\n0 0 0\n2 0 0\n0 2 0\n";
  }
  auto raw = read_off_vertices(dir / "box.off");
  EXPECT_EQ(raw.size(), 8u);
  auto pc = load_off(dir / "box.off", 4);
  EXPECT_EQ(pc.size(), 4u);
  double rmax = 0;
  for (const auto& p : pc.points) rmax = std::max(rmax, radius(p));
  EXPECT_NEAR(rmax, 1.0, 1e-5);
  EXPECT_EQ(read_off_vertices(dir / "glued.off").size(), 3u);

  Manifest m{{"box"}, {{"b0", "box", "off:box.off", 0, 8, 0.0f}}};
  auto ds = load_from_manifest(m, dir);
  EXPECT_EQ(ds.samples[0].size(), 8u);
  {
    std::ofstream bad(dir / "bad.off");
    bad << "PLY\n";
  }
  expect_error(ErrorCode::ParseError, [&] { read_off_vertices(dir / "bad.off"); });
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace rpd::geo
