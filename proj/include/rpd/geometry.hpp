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

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpd/autodiff.hpp"

namespace rpd::geo {

using Vec3 = std::array<float, 3>;

struct PointCloud {
  std::vector<Vec3> points;
  std::size_t label = 0;
  std::string id;

  std::size_t size() const noexcept { return points.size(); }
  bool operator==(const PointCloud&) const = default;
};

/// [N, 3] tensor view of the coordinates.
diff::Tensor to_tensor(const PointCloud& pc);
std::vector<Vec3> points_from_tensor(const diff::Tensor& t);

/// Stacks several clouds into one [sum N, 3] tensor; `offsets` receives the
/// G+1 segment boundaries.
diff::Tensor stack_points(std::span<const PointCloud> clouds, std::vector<std::size_t>& offsets);

// ---------------------------------------------------------------------------
// Preprocessing

/// Translates the centroid to the origin and scales so the farthest point
/// sits on the unit sphere. Throws DegenerateCloud when all points coincide.
PointCloud normalize_to_unit_sphere(const PointCloud& pc);

/// Greedy max-min selection seeded at `start`; ties go to the lower index.
std::vector<std::size_t> farthest_point_indices(const PointCloud& pc, std::size_t n,
                                                std::size_t start = 0);
PointCloud farthest_point_sample(const PointCloud& pc, std::size_t n, std::size_t start = 0);

// ---------------------------------------------------------------------------
// Set distances. Chamfer uses squared distances averaged per cloud;
// Hausdorff uses unsquared distances.

double chamfer_distance(const PointCloud& a, const PointCloud& b);
double directed_chamfer(const PointCloud& from, const PointCloud& to);
double hausdorff_distance(const PointCloud& a, const PointCloud& b);
double directed_hausdorff(const PointCloud& from, const PointCloud& to);

/// Mean Euclidean distance from each point to its k nearest other points.
std::vector<double> knn_mean_distance(const PointCloud& pc, std::size_t k);

/// Largest per-coordinate absolute difference between two equal-size clouds.
double linf_distance(const PointCloud& a, const PointCloud& b);

// Differentiable counterparts over [N, 3] tape values.
diff::Var chamfer_distance(diff::Var a, diff::Var b);
diff::Var directed_chamfer(diff::Var from, diff::Var to);
diff::Var directed_hausdorff(diff::Var from, diff::Var to);
diff::Var knn_mean_distance(diff::Var points, std::size_t k);

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeFamily { Sphere, Cube, Cylinder, Cone, Torus, Pyramid, Ellipsoid, PlaneCross };

std::string_view family_name(ShapeFamily family);
ShapeFamily family_from_name(std::string_view name);

struct ShapeClassSpec {
  std::string name;
  ShapeFamily family = ShapeFamily::Sphere;
  float noise = 0.0f;
  // Random yaw and per-axis stretch give intra-class variation; zero for
  // the canonical surface.
  float stretch = 0.0f;
  bool random_yaw = false;
};

/// The eight-class desk-scale benchmark.
std::vector<ShapeClassSpec> default_shape_classes(float noise = 0.01f);

/// Raw surface samples of the canonical (unit half-width) shape, without
/// jitter, stretch, rotation or normalization.
std::vector<Vec3> sample_surface(ShapeFamily family, std::size_t n, std::mt19937_64& rng);

/// Deterministic for (spec, n, seed). Output is normalized to the unit sphere.
PointCloud generate_shape(const ShapeClassSpec& spec, std::size_t label, std::size_t n,
                          std::uint64_t seed);
/// Looks the class up by name; throws UnknownClass.
PointCloud generate_shape(std::span<const ShapeClassSpec> classes, std::string_view class_name,
                          std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Datasets and manifests

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<PointCloud> samples;

  std::size_t size() const noexcept { return samples.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
};

struct SyntheticConfig {
  std::size_t train_per_class = 120;
  std::size_t test_per_class = 40;
  std::size_t points = 256;
  float noise = 0.01f;
  std::uint64_t seed = 0;
};

struct ManifestEntry {
  std::string id;
  std::string class_name;
  std::string source;  // "synthetic:<family>" or "off:<path>"
  std::uint64_t seed = 0;
  std::size_t points = 0;
  float noise = 0.0f;  // synthetic entries only
};

struct Manifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
};

struct SyntheticSplit {
  Dataset train;
  Dataset test;
  Manifest train_manifest;
  Manifest test_manifest;
};

SyntheticSplit make_synthetic_split(const SyntheticConfig& cfg);

/// Rebuilds a dataset by regenerating synthetic entries and reading OFF
/// sources. Relative OFF paths resolve against `base_dir`.
Dataset load_from_manifest(const Manifest& manifest, const std::filesystem::path& base_dir = {});

void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

/// ASCII OFF vertices as a raw cloud (faces ignored).
PointCloud read_off_vertices(const std::filesystem::path& path);
/// OFF ingestion: vertices, farthest point sampling to `n`, unit sphere.
PointCloud load_off(const std::filesystem::path& path, std::size_t n);

}  // namespace rpd::geo
