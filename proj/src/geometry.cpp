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

#include "rpd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "rpd/error.hpp"

namespace rpd::geo {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

double sq_dist(const Vec3& a, const Vec3& b) {
  const double dx = static_cast<double>(a[0]) - b[0];
  const double dy = static_cast<double>(a[1]) - b[1];
  const double dz = static_cast<double>(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void require_nonempty(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty()) throw Error(ErrorCode::EmptyCloud, "empty point cloud");
}

// For every point of `from`, the index of its nearest point in `to` (lowest
// index on ties) and the squared distance.
void nearest(std::span<const Vec3> from, std::span<const Vec3> to, std::vector<std::size_t>& index,
             std::vector<double>& dist2) {
  index.assign(from.size(), 0);
  dist2.assign(from.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < from.size(); ++i) {
    for (std::size_t j = 0; j < to.size(); ++j) {
      const double d = sq_dist(from[i], to[j]);
      if (d < dist2[i]) {
        dist2[i] = d;
        index[i] = j;
      }
    }
  }
}

std::vector<Vec3> as_points(const Tensor& t) {
  if (t.cols() != 3 && t.size() != 0) {
    throw Error(ErrorCode::ShapeMismatch, "expected [N,3] points, got " + diff::shape_string(t.shape()));
  }
  return points_from_tensor(t);
}

// k nearest other points of every point, ascending by distance then index.
std::vector<std::vector<std::pair<double, std::size_t>>> knn_lists(std::span<const Vec3> pts,
                                                                   std::size_t k) {
  const std::size_t n = pts.size();
  if (k == 0 || k >= n) {
    throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " needs 1 <= k < N=" + std::to_string(n));
  }
  std::vector<std::vector<std::pair<double, std::size_t>>> lists(n);
  std::vector<std::pair<double, std::size_t>> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) row.emplace_back(std::sqrt(sq_dist(pts[i], pts[j])), j);
    }
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
    lists[i].assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return lists;
}

}  // namespace

Tensor to_tensor(const PointCloud& pc) {
  Tensor t(Shape{pc.size(), 3});
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) t.at(i, c) = pc.points[i][c];
  }
  return t;
}

std::vector<Vec3> points_from_tensor(const Tensor& t) {
  std::vector<Vec3> pts(t.size() / 3);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {t[3 * i], t[3 * i + 1], t[3 * i + 2]};
  return pts;
}

Tensor stack_points(std::span<const PointCloud> clouds, std::vector<std::size_t>& offsets) {
  offsets.assign(1, 0);
  std::size_t total = 0;
  for (const auto& pc : clouds) {
    total += pc.size();
    offsets.push_back(total);
  }
  Tensor t(Shape{total, 3});
  std::size_t r = 0;
  for (const auto& pc : clouds) {
    for (const auto& p : pc.points) {
      t.at(r, 0) = p[0];
      t.at(r, 1) = p[1];
      t.at(r, 2) = p[2];
      ++r;
    }
  }
  return t;
}

PointCloud normalize_to_unit_sphere(const PointCloud& pc) {
  if (pc.points.empty()) throw Error(ErrorCode::EmptyCloud, "cannot normalize an empty cloud");
  double cx = 0, cy = 0, cz = 0;
  for (const auto& p : pc.points) {
    cx += p[0];
    cy += p[1];
    cz += p[2];
  }
  const double n = static_cast<double>(pc.size());
  cx /= n;
  cy /= n;
  cz /= n;
  double radius = 0.0;
  for (const auto& p : pc.points) radius = std::max(radius, sq_dist(p, {float(cx), float(cy), float(cz)}));
  radius = std::sqrt(radius);
  if (!(radius > 1e-12)) throw Error(ErrorCode::DegenerateCloud, "all points coincide");

  PointCloud out = pc;
  for (auto& p : out.points) {
    p = {static_cast<float>((p[0] - cx) / radius), static_cast<float>((p[1] - cy) / radius),
         static_cast<float>((p[2] - cz) / radius)};
  }
  return out;
}

std::vector<std::size_t> farthest_point_indices(const PointCloud& pc, std::size_t n, std::size_t start) {
  const std::size_t total = pc.size();
  if (n < 1 || n > total) {
    throw Error(ErrorCode::CountOutOfRange, "requested " + std::to_string(n) + " of " +
                                                std::to_string(total) + " points");
  }
  if (start >= total) throw Error(ErrorCode::CountOutOfRange, "start index out of range");
  std::vector<std::size_t> picked{start};
  std::vector<bool> taken(total, false);
  taken[start] = true;
  std::vector<double> dist(total);
  for (std::size_t i = 0; i < total; ++i) dist[i] = sq_dist(pc.points[i], pc.points[start]);
  while (picked.size() < n) {
    std::size_t best = total;
    for (std::size_t i = 0; i < total; ++i) {
      if (taken[i]) continue;
      if (best == total || dist[i] > dist[best]) best = i;
    }
    picked.push_back(best);
    taken[best] = true;
    for (std::size_t i = 0; i < total; ++i) dist[i] = std::min(dist[i], sq_dist(pc.points[i], pc.points[best]));
  }
  return picked;
}

PointCloud farthest_point_sample(const PointCloud& pc, std::size_t n, std::size_t start) {
  PointCloud out;
  out.label = pc.label;
  out.id = pc.id;
  for (std::size_t i : farthest_point_indices(pc, n, start)) out.points.push_back(pc.points[i]);
  return out;
}

double directed_chamfer(const PointCloud& from, const PointCloud& to) {
  require_nonempty(from, to);
  std::vector<std::size_t> idx;
  std::vector<double> d2;
  nearest(from.points, to.points, idx, d2);
  double acc = 0.0;
  for (double d : d2) acc += d;
  return acc / static_cast<double>(from.size());
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  return directed_chamfer(a, b) + directed_chamfer(b, a);
}

double directed_hausdorff(const PointCloud& from, const PointCloud& to) {
  require_nonempty(from, to);
  std::vector<std::size_t> idx;
  std::vector<double> d2;
  nearest(from.points, to.points, idx, d2);
  return std::sqrt(*std::max_element(d2.begin(), d2.end()));
}

double hausdorff_distance(const PointCloud& a, const PointCloud& b) {
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

std::vector<double> knn_mean_distance(const PointCloud& pc, std::size_t k) {
  const auto lists = knn_lists(pc.points, k);
  std::vector<double> out(pc.size());
  for (std::size_t i = 0; i < lists.size(); ++i) {
    double acc = 0.0;
    for (const auto& [d, j] : lists[i]) acc += d;
    out[i] = acc / static_cast<double>(k);
  }
  return out;
}

double linf_distance(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "L-inf distance needs equal sizes");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      m = std::max(m, std::abs(static_cast<double>(a.points[i][c]) - b.points[i][c]));
    }
  }
  return m;
}

// --- differentiable distances ---------------------------------------------

Var directed_chamfer(Var from, Var to) {
  const auto a = as_points(from.value());
  const auto b = as_points(to.value());
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyCloud, "empty point cloud");
  std::vector<std::size_t> idx;
  std::vector<double> d2;
  nearest(a, b, idx, d2);
  double acc = 0.0;
  for (double d : d2) acc += d;
  const double inv = 1.0 / static_cast<double>(a.size());
  const std::size_t fi = from.id(), ti = to.id();
  return from.tape().record(
      Tensor::scalar(static_cast<float>(acc * inv)), from.requires_grad() || to.requires_grad(),
      [fi, ti, inv, idx = std::move(idx)](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        const Tensor& av = t.value(fi);
        const Tensor& bv = t.value(ti);
        Tensor* ga = t.requires_grad(fi) ? &t.grad_of(fi) : nullptr;
        Tensor* gb = t.requires_grad(ti) ? &t.grad_of(ti) : nullptr;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < 3; ++c) {
            const double diff = static_cast<double>(av.at(i, c)) - bv.at(idx[i], c);
            const float contrib = static_cast<float>(2.0 * diff * inv * g);
            if (ga) ga->at(i, c) += contrib;
            if (gb) gb->at(idx[i], c) -= contrib;
          }
        }
      });
}

Var chamfer_distance(Var a, Var b) { return diff::add(directed_chamfer(a, b), directed_chamfer(b, a)); }

Var directed_hausdorff(Var from, Var to) {
  const auto a = as_points(from.value());
  const auto b = as_points(to.value());
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyCloud, "empty point cloud");
  std::vector<std::size_t> idx;
  std::vector<double> d2;
  nearest(a, b, idx, d2);
  const std::size_t worst = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
  const double dist = std::sqrt(d2[worst]);
  const std::size_t partner = idx[worst];
  const std::size_t fi = from.id(), ti = to.id();
  return from.tape().record(
      Tensor::scalar(static_cast<float>(dist)), from.requires_grad() || to.requires_grad(),
      [fi, ti, worst, partner, dist](Tape& t, std::size_t self) {
        if (dist <= 0.0) return;
        const double g = t.grad(self)[0];
        const Tensor& av = t.value(fi);
        const Tensor& bv = t.value(ti);
        for (std::size_t c = 0; c < 3; ++c) {
          const double unit = (static_cast<double>(av.at(worst, c)) - bv.at(partner, c)) / dist;
          if (t.requires_grad(fi)) t.grad_of(fi).at(worst, c) += static_cast<float>(g * unit);
          if (t.requires_grad(ti)) t.grad_of(ti).at(partner, c) -= static_cast<float>(g * unit);
        }
      });
}

Var knn_mean_distance(Var points, std::size_t k) {
  const auto pts = as_points(points.value());
  auto lists = knn_lists(pts, k);
  Tensor out(Shape{pts.size()});
  for (std::size_t i = 0; i < lists.size(); ++i) {
    double acc = 0.0;
    for (const auto& [d, j] : lists[i]) acc += d;
    out[i] = static_cast<float>(acc / static_cast<double>(k));
  }
  const std::size_t pi = points.id();
  return points.tape().record(
      std::move(out), points.requires_grad(), [pi, k, lists = std::move(lists)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(pi);
        Tensor& gx = t.grad_of(pi);
        for (std::size_t i = 0; i < lists.size(); ++i) {
          const double gi = static_cast<double>(g[i]) / static_cast<double>(k);
          for (const auto& [d, j] : lists[i]) {
            if (d <= 0.0) continue;
            for (std::size_t c = 0; c < 3; ++c) {
              const double unit = (static_cast<double>(x.at(i, c)) - x.at(j, c)) / d;
              gx.at(i, c) += static_cast<float>(gi * unit);
              gx.at(j, c) -= static_cast<float>(gi * unit);
            }
          }
        }
      });
}

// --- synthetic shapes ------------------------------------------------------

std::string_view family_name(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::Sphere: return "sphere";
    case ShapeFamily::Cube: return "cube";
    case ShapeFamily::Cylinder: return "cylinder";
    case ShapeFamily::Cone: return "cone";
    case ShapeFamily::Torus: return "torus";
    case ShapeFamily::Pyramid: return "pyramid";
    case ShapeFamily::Ellipsoid: return "ellipsoid";
    case ShapeFamily::PlaneCross: return "plane_cross";
  }
  return "unknown";
}

ShapeFamily family_from_name(std::string_view name) {
  for (auto f : {ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Cylinder, ShapeFamily::Cone,
                 ShapeFamily::Torus, ShapeFamily::Pyramid, ShapeFamily::Ellipsoid, ShapeFamily::PlaneCross}) {
    if (family_name(f) == name) return f;
  }
  throw Error(ErrorCode::UnknownClass, "no shape family named '" + std::string(name) + "'");
}

std::vector<ShapeClassSpec> default_shape_classes(float noise) {
  std::vector<ShapeClassSpec> classes;
  for (auto f : {ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Cylinder, ShapeFamily::Cone,
                 ShapeFamily::Torus, ShapeFamily::Pyramid, ShapeFamily::Ellipsoid, ShapeFamily::PlaneCross}) {
    classes.push_back({std::string(family_name(f)), f, noise, 0.1f, true});
  }
  return classes;
}

namespace {

Vec3 point_on_triangle(const Vec3& a, const Vec3& b, const Vec3& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  float r1 = u(rng), r2 = u(rng);
  if (r1 + r2 > 1.0f) {
    r1 = 1.0f - r1;
    r2 = 1.0f - r2;
  }
  Vec3 p;
  for (int i = 0; i < 3; ++i) p[i] = a[i] + r1 * (b[i] - a[i]) + r2 * (c[i] - a[i]);
  return p;
}

Vec3 unit_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    const double x = g(rng), y = g(rng), z = g(rng);
    const double n = std::sqrt(x * x + y * y + z * z);
    if (n > 1e-9) return {static_cast<float>(x / n), static_cast<float>(y / n), static_cast<float>(z / n)};
  }
}

}  // namespace

std::vector<Vec3> sample_surface(ShapeFamily family, std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);
  constexpr float kPi = std::numbers::pi_v<float>;
  std::vector<Vec3> pts;
  pts.reserve(n);
  if (family == ShapeFamily::Sphere) {
    // Antithetic pairs (and one zero-sum triple for odd n) keep the centroid
    // at the origin, so normalization leaves the radii at exactly one.
    std::size_t remaining = n;
    if (n % 2 == 1 && n >= 3) {
      const Vec3 a = unit_direction(rng);
      Vec3 b = unit_direction(rng);
      const float along = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
      for (int c = 0; c < 3; ++c) b[c] -= along * a[c];
      const float bn = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
      for (float& c : b) c /= bn;
      const float s = std::sqrt(3.0f) / 2.0f;
      pts.push_back(a);
      pts.push_back({-0.5f * a[0] + s * b[0], -0.5f * a[1] + s * b[1], -0.5f * a[2] + s * b[2]});
      pts.push_back({-0.5f * a[0] - s * b[0], -0.5f * a[1] - s * b[1], -0.5f * a[2] - s * b[2]});
      remaining -= 3;
    }
    for (std::size_t i = 0; i < remaining / 2; ++i) {
      const Vec3 d = unit_direction(rng);
      pts.push_back(d);
      pts.push_back({-d[0], -d[1], -d[2]});
    }
    if (pts.size() < n) pts.push_back(unit_direction(rng));
    return pts;
  }
  for (std::size_t i = 0; i < n; ++i) {
    switch (family) {
      case ShapeFamily::Sphere:
        pts.push_back(unit_direction(rng));
        break;
      case ShapeFamily::Ellipsoid: {
        const Vec3 d = unit_direction(rng);
        pts.push_back({d[0], 0.6f * d[1], 0.35f * d[2]});
        break;
      }
      case ShapeFamily::Cube: {
        const int face = static_cast<int>(u01(rng) * 6.0f) % 6;
        Vec3 p{u(rng), u(rng), u(rng)};
        p[face / 2] = (face % 2) ? 1.0f : -1.0f;
        pts.push_back(p);
        break;
      }
      case ShapeFamily::Cylinder: {
        // radius 0.5, height 2; lateral area 2*pi vs caps 0.25*pi each.
        const float theta = 2.0f * kPi * u01(rng);
        if (u01(rng) < 2.0f / 2.5f) {
          pts.push_back({0.5f * std::cos(theta), 0.5f * std::sin(theta), u(rng)});
        } else {
          const float r = 0.5f * std::sqrt(u01(rng));
          pts.push_back({r * std::cos(theta), r * std::sin(theta), u01(rng) < 0.5f ? -1.0f : 1.0f});
        }
        break;
      }
      case ShapeFamily::Cone: {
        // base radius 1 at z=-1, apex at z=1; slant sqrt(5).
        const float theta = 2.0f * kPi * u01(rng);
        const float lateral = std::sqrt(5.0f);
        if (u01(rng) < lateral / (lateral + 1.0f)) {
          const float s = std::sqrt(u01(rng));  // distance from apex, area-uniform
          pts.push_back({s * std::cos(theta), s * std::sin(theta), 1.0f - 2.0f * s});
        } else {
          const float r = std::sqrt(u01(rng));
          pts.push_back({r * std::cos(theta), r * std::sin(theta), -1.0f});
        }
        break;
      }
      case ShapeFamily::Torus: {
        constexpr float kMajor = 1.0f, kMinor = 0.3f;
        // rejection on the minor angle keeps the area density uniform
        float phi;
        for (;;) {
          phi = 2.0f * kPi * u01(rng);
          if (u01(rng) * (kMajor + kMinor) <= kMajor + kMinor * std::cos(phi)) break;
        }
        const float theta = 2.0f * kPi * u01(rng);
        const float ring = kMajor + kMinor * std::cos(phi);
        pts.push_back({ring * std::cos(theta), ring * std::sin(theta), kMinor * std::sin(phi)});
        break;
      }
      case ShapeFamily::Pyramid: {
        static const Vec3 apex{0.0f, 0.0f, 1.0f};
        static const std::array<Vec3, 4> base{Vec3{-1, -1, -1}, Vec3{1, -1, -1}, Vec3{1, 1, -1}, Vec3{-1, 1, -1}};
        // four sides of area sqrt(5) each, base area 4.
        const float side = std::sqrt(5.0f);
        const float pick = u01(rng) * (4.0f * side + 4.0f);
        if (pick < 4.0f * side) {
          const int s = std::min(3, static_cast<int>(pick / side));
          pts.push_back(point_on_triangle(apex, base[s], base[(s + 1) % 4], rng));
        } else {
          pts.push_back({u(rng), u(rng), -1.0f});
        }
        break;
      }
      case ShapeFamily::PlaneCross: {
        const float a = u(rng), b = u(rng);
        if (u01(rng) < 0.5f) {
          pts.push_back({0.0f, a, b});
        } else {
          pts.push_back({a, 0.0f, b});
        }
        break;
      }
    }
  }
  return pts;
}

PointCloud generate_shape(const ShapeClassSpec& spec, std::size_t label, std::size_t n, std::uint64_t seed) {
  if (n < 8) throw Error(ErrorCode::CountOutOfRange, "generate_shape needs at least 8 points");
  std::mt19937_64 rng(seed);
  PointCloud pc;
  pc.label = label;
  pc.points = sample_surface(spec.family, n, rng);

  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::uniform_real_distribution<float> angle(0.0f, 2.0f * std::numbers::pi_v<float>);
  const Vec3 stretch{1.0f + spec.stretch * u(rng), 1.0f + spec.stretch * u(rng), 1.0f + spec.stretch * u(rng)};
  const float yaw = spec.random_yaw ? angle(rng) : 0.0f;
  const float cy = std::cos(yaw), sy = std::sin(yaw);
  std::normal_distribution<float> jitter(0.0f, 1.0f);
  for (auto& p : pc.points) {
    const float x = p[0] * stretch[0], y = p[1] * stretch[1], z = p[2] * stretch[2];
    p = {cy * x - sy * y, sy * x + cy * y, z};
    if (spec.noise > 0.0f) {
      for (float& c : p) c += spec.noise * jitter(rng);
    }
  }
  return normalize_to_unit_sphere(pc);
}

PointCloud generate_shape(std::span<const ShapeClassSpec> classes, std::string_view class_name,
                          std::size_t n, std::uint64_t seed) {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].name == class_name) return generate_shape(classes[i], i, n, seed);
  }
  throw Error(ErrorCode::UnknownClass, "unknown class '" + std::string(class_name) + "'");
}

// --- datasets ----------------------------------------------------------------

SyntheticSplit make_synthetic_split(const SyntheticConfig& cfg) {
  const auto classes = default_shape_classes(cfg.noise);
  SyntheticSplit split;
  for (const auto& c : classes) split.train.class_names.push_back(c.name);
  split.test.class_names = split.train.class_names;
  split.train_manifest.class_names = split.train.class_names;
  split.test_manifest.class_names = split.train.class_names;

  std::mt19937_64 seeder(cfg.seed);
  auto emit = [&](Dataset& ds, Manifest& manifest, std::size_t per_class, const char* tag) {
    for (std::size_t k = 0; k < classes.size(); ++k) {
      for (std::size_t i = 0; i < per_class; ++i) {
        const std::uint64_t seed = seeder();
        PointCloud pc = generate_shape(classes[k], k, cfg.points, seed);
        std::ostringstream id;
        id << tag << '_' << classes[k].name << '_';
        id.width(4);
        id.fill('0');
        id << i;
        pc.id = id.str();
        manifest.entries.push_back(
            {pc.id, classes[k].name, "synthetic:" + std::string(family_name(classes[k].family)), seed, cfg.points,
             classes[k].noise});
        ds.samples.push_back(std::move(pc));
      }
    }
  };
  emit(split.train, split.train_manifest, cfg.train_per_class, "train");
  emit(split.test, split.test_manifest, cfg.test_per_class, "test");
  return split;
}

Dataset load_from_manifest(const Manifest& manifest, const std::filesystem::path& base_dir) {
  Dataset ds;
  ds.class_names = manifest.class_names;
  const auto classes = default_shape_classes();
  for (const auto& e : manifest.entries) {
    const auto it = std::find(ds.class_names.begin(), ds.class_names.end(), e.class_name);
    if (it == ds.class_names.end()) throw Error(ErrorCode::UnknownClass, "entry class '" + e.class_name + "'");
    const std::size_t label = static_cast<std::size_t>(it - ds.class_names.begin());
    PointCloud pc;
    if (e.source.rfind("synthetic:", 0) == 0) {
      ShapeClassSpec spec{e.class_name, family_from_name(e.source.substr(10)), e.noise, 0.0f, false};
      for (const auto& c : classes) {
        if (c.family == spec.family) {
          spec.stretch = c.stretch;
          spec.random_yaw = c.random_yaw;
        }
      }
      pc = generate_shape(spec, label, e.points, e.seed);
    } else if (e.source.rfind("off:", 0) == 0) {
      std::filesystem::path p = e.source.substr(4);
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      pc = load_off(p, e.points);
      pc.label = label;
    } else {
      throw Error(ErrorCode::ParseError, "unknown manifest source '" + e.source + "'");
    }
    pc.id = e.id;
    ds.samples.push_back(std::move(pc));
  }
  return ds;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["classes"] = manifest.class_names;
  auto& entries = j["entries"] = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"id", e.id}, {"class", e.class_name}, {"source", e.source}, {"seed", e.seed},
                       {"points", e.points}, {"noise", e.noise}});
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({e.at("id").get<std::string>(), e.at("class").get<std::string>(),
                           e.at("source").get<std::string>(), e.at("seed").get<std::uint64_t>(),
                           e.at("points").get<std::size_t>(), e.value("noise", 0.0f)});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + ex.what());
  }
  return m;
}

PointCloud read_off_vertices(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::string header;
  in >> header;
  if (header.rfind("OFF", 0) != 0) throw Error(ErrorCode::ParseError, path.string() + ": missing OFF header");
  std::size_t nv = 0, nf = 0, ne = 0;
  if (header.size() > 3) {
    // Some exporters glue the counts onto the header ("OFF490 518 0").
    std::istringstream rest(header.substr(3));
    rest >> nv;
    in >> nf >> ne;
  } else {
    in >> nv >> nf >> ne;
  }
  if (!in) throw Error(ErrorCode::ParseError, path.string() + ": bad counts line");
  PointCloud pc;
  pc.points.resize(nv);
  for (auto& p : pc.points) {
    if (!(in >> p[0] >> p[1] >> p[2])) throw Error(ErrorCode::ParseError, path.string() + ": truncated vertices");
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw Error(ErrorCode::ParseError, path.string() + ": non-finite vertex");
    }
  }
  if (pc.points.empty()) throw Error(ErrorCode::EmptyCloud, path.string() + " has no vertices");
  pc.id = path.stem().string();
  return pc;
}

PointCloud load_off(const std::filesystem::path& path, std::size_t n) {
  PointCloud raw = read_off_vertices(path);
  return normalize_to_unit_sphere(farthest_point_sample(raw, std::min(n, raw.size())));
}

}  // namespace rpd::geo
