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

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "rpd/geometry.hpp"
#include "rpd/tensor.hpp"

namespace rpd::proj {

/// Axis-aligned orthographic camera looking at the origin from `sign`
/// times infinity along `axis`.
struct ViewDirection {
  int axis = 2;  // 0 = x, 1 = y, 2 = z
  int sign = 1;  // +1 or -1
  bool operator==(const ViewDirection&) const = default;
};

/// Default view order: +x, -x, +y, -y, +z, -z. Two views keep the z pair,
/// four keep the x and y pairs.
std::vector<ViewDirection> default_views(std::size_t count);

struct DepthImageSet {
  std::size_t resolution = 0;
  std::vector<ViewDirection> directions;
  std::vector<float> depth;  // views x resolution x resolution, row-major

  std::size_t num_views() const noexcept { return directions.size(); }
  float at(std::size_t view, std::size_t row, std::size_t col) const {
    return depth[(view * resolution + row) * resolution + col];
  }
  /// [views, resolution^2] tensor; one row per view.
  diff::Tensor as_tensor() const;
  bool operator==(const DepthImageSet&) const = default;
};

/// Z-buffered orthographic rendering. Each point lands in the pixel found by
/// flooring its in-plane coordinates mapped from [-1, 1] to [0, res); the
/// pixel keeps the largest closeness (1 at the near plane, 0.5 at the
/// origin). Empty pixels are 0. Throws UnnormalizedInput for points outside
/// the unit sphere (tolerance 1e-4).
DepthImageSet project_depth(const geo::PointCloud& pc, std::size_t resolution,
                            std::span<const ViewDirection> views);
DepthImageSet project_depth(const geo::PointCloud& pc, std::size_t resolution = 32,
                            std::size_t views = 6);

/// One ASCII PGM (P2) per view: <stem>_view<i>.pgm.
std::vector<std::filesystem::path> write_pgm(const DepthImageSet& images,
                                             const std::filesystem::path& directory,
                                             const std::string& stem);

}  // namespace rpd::proj
