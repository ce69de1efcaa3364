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
#include <span>
#include <vector>

#include "rpd/autodiff.hpp"

namespace rpd::loss {

/// Teacher index used throughout: image, point, text.
enum Teacher : std::size_t { kImage = 0, kPoint = 1, kText = 2 };
inline constexpr std::array<const char*, 3> kTeacherNames{"I", "P", "T"};

/// Per-sample gate: bit i is set when the teacher ranks the true label of
/// sample i within its top k.
struct GateMask {
  std::vector<bool> bits;
  std::size_t selected_count = 0;

  std::size_t size() const noexcept { return bits.size(); }
  double fraction() const noexcept {
    return bits.empty() ? 0.0 : static_cast<double>(selected_count) / static_cast<double>(bits.size());
  }
  static GateMask all(std::size_t n);
};

/// (z_ref . z_T^T) / tau. Rows must be unit norm within 1e-3.
diff::Tensor reference_logits(const diff::Tensor& z_ref, const diff::Tensor& z_text, float tau);

/// Top-k membership of each row's label. Ranking is a stable descending
/// sort, so equal logits favour the lower class index.
GateMask confidence_mask(const diff::Tensor& logits, std::span<const std::size_t> labels, std::size_t k);

struct GatedLoss {
  diff::Var loss;
  std::size_t selected = 0;
  bool empty = false;  // no row passed the gate; loss is an exact zero
};

/// Symmetric InfoNCE over the gated rows:
/// S = z_stu_sel z_ref_sel^T / tau, loss = (CE(S, I) + CE(S^T, I)) / 2.
GatedLoss cgc_loss(diff::Var z_stu, diff::Var z_ref, const GateMask& mask, float tau);

/// Ungated symmetric contrastive loss on all rows.
diff::Var symmetric_contrastive(diff::Var a, diff::Var b, float tau);

/// Row i of the result is z_text[labels[i]].
diff::Var text_reference(diff::Var z_text, std::span<const std::size_t> labels);

/// Learnable log-variances, one per teacher.
struct DynamicWeights {
  std::array<float, 3> lambda{0.0f, 0.0f, 0.0f};
  float lambda_min = -1.0f;

  void clamp() noexcept;
  std::array<float, 3> effective() const noexcept;  // e^{-lambda}
};

struct LossBreakdown {
  std::size_t step = 0;
  std::array<float, 3> losses{};
  std::array<float, 3> lambda{};
  std::array<float, 3> weights{};
  std::array<float, 3> gate_fraction{};
  float total = 0.0f;
};

struct TotalLoss {
  diff::Var total;
  LossBreakdown breakdown;
};

/// sum_k e^{-lambda_k} L_k + lambda_k. `lambda` is a [3] tape value,
/// `losses` three scalars. Throws NonFiniteLoss on a non-finite term.
TotalLoss total_loss(std::span<const diff::Var, 3> losses, diff::Var lambda);

/// Plain-value evaluation of the same objective.
float total_loss_value(const std::array<float, 3>& losses, const std::array<float, 3>& lambda);

}  // namespace rpd::loss
