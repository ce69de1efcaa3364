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
#include <string>
#include <vector>

#include "rpd/tensor.hpp"
#include "rpd/tensor_io.hpp"

namespace rpd::optim {

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-2f;
};

/// A parameter and its gradient for one update. Decay may be switched off
/// per parameter.
struct ParamRef {
  std::string name;
  diff::Tensor* value = nullptr;
  const diff::Tensor* grad = nullptr;
  bool decay = true;
};

/// Adam with bias-corrected moments and decoupled weight decay:
///   p <- p (1 - lr wd);  p <- p - lr m_hat / (sqrt(v_hat) + eps).
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One optimizer step over all parameters at learning rate `lr`. Moment
  /// buffers are created lazily by name.
  void step(std::vector<ParamRef>& params, float lr);

  std::size_t step_count() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

  /// Moments as "<prefix>m.<name>" / "<prefix>v.<name>" plus the step count
  /// in meta["<prefix>step"].
  void save(io::TensorFile& file, const std::string& prefix = "adam.") const;
  void load(const io::TensorFile& file, const std::string& prefix = "adam.");

 private:
  struct Slot {
    std::string name;
    diff::Tensor m, v;
  };
  Slot& slot(const std::string& name, const diff::Shape& shape);

  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

/// eta_min + (lr0 - eta_min)(1 + cos(pi step / t_max)) / 2.
double cosine_schedule(double step, double t_max, double lr0, double eta_min);

}  // namespace rpd::optim
