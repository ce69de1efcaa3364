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

#include "rpd/projection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rpd/error.hpp"

namespace rpd::proj {

std::vector<ViewDirection> default_views(std::size_t count) {
  const std::vector<ViewDirection> all{{0, 1}, {0, -1}, {1, 1}, {1, -1}, {2, 1}, {2, -1}};
  switch (count) {
    case 2: return {all[4], all[5]};
    case 4: return {all.begin(), all.begin() + 4};
    case 6: return all;
    default:
      throw Error(ErrorCode::InvalidArgument, "view count must be 2, 4 or 6, got " + std::to_string(count));
  }
}

diff::Tensor DepthImageSet::as_tensor() const {
  return diff::Tensor(diff::Shape{num_views(), resolution * resolution}, depth);
}

DepthImageSet project_depth(const geo::PointCloud& pc, std::size_t resolution,
                            std::span<const ViewDirection> views) {
  if (resolution < 4) throw Error(ErrorCode::InvalidArgument, "resolution must be at least 4");
  for (const auto& p : pc.points) {
    const double r = std::sqrt(double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]);
    if (!(r <= 1.0 + 1e-4)) {
      throw Error(ErrorCode::UnnormalizedInput, "point norm " + std::to_string(r) + " exceeds the unit sphere");
    }
  }
  DepthImageSet out;
  out.resolution = resolution;
  out.directions.assign(views.begin(), views.end());
  out.depth.assign(views.size() * resolution * resolution, 0.0f);
  const float res = static_cast<float>(resolution);
  const auto cell = [&](float coord) {
    const auto i = static_cast<long>(std::floor((coord + 1.0f) * 0.5f * res));
    return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(resolution) - 1));
  };
  for (std::size_t v = 0; v < views.size(); ++v) {
    const int axis = views[v].axis;
    const float sign = views[v].sign >= 0 ? 1.0f : -1.0f;
    const int u_axis = (axis + 1) % 3;
    const int v_axis = (axis + 2) % 3;
    float* plane = out.depth.data() + v * resolution * resolution;
    for (const auto& p : pc.points) {
      const float closeness = std::clamp((sign * p[axis] + 1.0f) * 0.5f, 0.0f, 1.0f);
      float& pixel = plane[cell(p[v_axis]) * resolution + cell(p[u_axis])];
      pixel = std::max(pixel, closeness);
    }
  }
  return out;
}

DepthImageSet project_depth(const geo::PointCloud& pc, std::size_t resolution, std::size_t views) {
  const auto dirs = default_views(views);
  return project_depth(pc, resolution, dirs);
}

std::vector<std::filesystem::path> write_pgm(const DepthImageSet& images,
                                             const std::filesystem::path& directory,
                                             const std::string& stem) {
  std::filesystem::create_directories(directory);
  std::vector<std::filesystem::path> written;
  for (std::size_t v = 0; v < images.num_views(); ++v) {
    const auto path = directory / (stem + "_view" + std::to_string(v) + ".pgm");
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << "P2\n" << images.resolution << ' ' << images.resolution << "\n255\n";
    for (std::size_t r = 0; r < images.resolution; ++r) {
      for (std::size_t c = 0; c < images.resolution; ++c) {
        out << (c ? " " : "") << static_cast<int>(std::lround(images.at(v, r, c) * 255.0f));
      }
      out << '\n';
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace rpd::proj
