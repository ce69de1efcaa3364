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

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rpd/geometry.hpp"
#include "rpd/tensor.hpp"

namespace rpd::testing {

inline diff::Tensor random_tensor(diff::Shape shape, std::mt19937_64& rng, float lo = -1.0f,
                                  float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  diff::Tensor t(std::move(shape));
  for (float& v : t.data()) v = u(rng);
  return t;
}

inline geo::PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  geo::PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) pc.points.push_back({u(rng), u(rng), u(rng)});
  return pc;
}

/// Rows drawn uniformly then scaled to unit L2 norm.
inline diff::Tensor random_unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  diff::Tensor t = random_tensor({rows, cols}, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (float v : t.row(r)) n += double(v) * v;
    const float inv = static_cast<float>(1.0 / std::sqrt(n));
    for (float& v : t.row(r)) v *= inv;
  }
  return t;
}

}  // namespace rpd::testing
