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

#include "rpd/optim.hpp"

#include <cmath>
#include <numbers>

#include "rpd/error.hpp"

namespace rpd::optim {

AdamW::Slot& AdamW::slot(const std::string& name, const diff::Shape& shape) {
  for (auto& s : slots_) {
    if (s.name == name) {
      if (s.m.shape() != shape) throw Error(ErrorCode::ShapeMismatch, "optimizer slot '" + name + "' changed shape");
      return s;
    }
  }
  slots_.push_back({name, diff::Tensor(shape), diff::Tensor(shape)});
  return slots_.back();
}

void AdamW::step(std::vector<ParamRef>& params, float lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(t_));
  const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(t_));
  for (auto& p : params) {
    if (p.value == nullptr || p.grad == nullptr) continue;
    if (p.grad->shape() != p.value->shape()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient shape differs for '" + p.name + "'");
    }
    Slot& s = slot(p.name, p.value->shape());
    auto w = p.value->data();
    auto g = p.grad->data();
    auto m = s.m.data();
    auto v = s.v.data();
    const float decay = p.decay ? 1.0f - lr * cfg_.weight_decay : 1.0f;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] = static_cast<float>(w[i] * decay - lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
    }
  }
}

void AdamW::save(io::TensorFile& file, const std::string& prefix) const {
  for (const auto& s : slots_) {
    file.put(prefix + "m." + s.name, s.m);
    file.put(prefix + "v." + s.name, s.v);
  }
  file.meta[prefix + "step"] = t_;
}

void AdamW::load(const io::TensorFile& file, const std::string& prefix) {
  slots_.clear();
  const std::string mp = prefix + "m.";
  for (const auto& [name, t] : file.tensors) {
    if (name.rfind(mp, 0) != 0) continue;
    const std::string base = name.substr(mp.size());
    slots_.push_back({base, t, file.get(prefix + "v." + base)});
  }
  t_ = file.meta.value(prefix + "step", std::size_t{0});
}

double cosine_schedule(double step, double t_max, double lr0, double eta_min) {
  return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * step / t_max));
}

}  // namespace rpd::optim
