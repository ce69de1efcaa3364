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

#include "rpd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rpd/error.hpp"

namespace rpd::loss {

using diff::Shape;
using diff::Tensor;
using diff::Var;

namespace {

void require_unit_rows(const Tensor& t, const char* what) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double sq = 0.0;
    for (float v : t.row(r)) sq += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-3) {
      throw Error(ErrorCode::NonUnitInput, std::string(what) + " row " + std::to_string(r) +
                                               " has norm " + std::to_string(std::sqrt(sq)));
    }
  }
}

}  // namespace

GateMask GateMask::all(std::size_t n) {
  GateMask m;
  m.bits.assign(n, true);
  m.selected_count = n;
  return m;
}

Tensor reference_logits(const Tensor& z_ref, const Tensor& z_text, float tau) {
  if (!(tau > 0.0f)) throw Error(ErrorCode::InvalidArgument, "temperature must be positive");
  if (z_ref.cols() != z_text.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "embedding widths differ: " + diff::shape_string(z_ref.shape()) +
                                              " vs " + diff::shape_string(z_text.shape()));
  }
  require_unit_rows(z_ref, "z_ref");
  require_unit_rows(z_text, "z_T");
  const std::size_t b = z_ref.rows(), c = z_text.rows(), d = z_ref.cols();
  Tensor out(Shape{b, c});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      float acc = 0.0f;
      for (std::size_t e = 0; e < d; ++e) acc += z_ref.at(i, e) * z_text.at(j, e);
      out.at(i, j) = acc / tau;
    }
  }
  return out;
}

GateMask confidence_mask(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k) {
  const std::size_t b = logits.rows(), c = logits.cols();
  if (k < 1 || k > c) {
    throw Error(ErrorCode::KOutOfRange, "k=" + std::to_string(k) + " with " + std::to_string(c) + " classes");
  }
  if (labels.size() != b) throw Error(ErrorCode::RowCountMismatch, "one label per logit row required");
  GateMask mask;
  mask.bits.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t y = labels[i];
    if (y >= c) throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y));
    const float target = logits.at(i, y);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const float v = logits.at(i, j);
      if (v > target || (v == target && j < y)) ++rank;
    }
    mask.bits[i] = rank < k;
    mask.selected_count += mask.bits[i] ? 1 : 0;
  }
  return mask;
}

GatedLoss cgc_loss(Var z_stu, Var z_ref, const GateMask& mask, float tau) {
  const std::size_t b = z_stu.value().rows();
  if (z_ref.value().rows() != b || mask.size() != b) {
    throw Error(ErrorCode::RowCountMismatch, "student rows " + std::to_string(b) + ", reference rows " +
                                                 std::to_string(z_ref.value().rows()) + ", mask " +
                                                 std::to_string(mask.size()));
  }
  if (!(tau > 0.0f)) throw Error(ErrorCode::InvalidArgument, "temperature must be positive");
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < b; ++i) {
    if (mask.bits[i]) selected.push_back(i);
  }
  GatedLoss out;
  out.selected = selected.size();
  if (selected.empty()) {
    out.empty = true;
    out.loss = z_stu.tape().constant(Tensor::scalar(0.0f));
    return out;
  }
  Var stu = gather_rows(z_stu, selected);
  Var ref = gather_rows(z_ref, selected);
  Var sim = diff::scale(diff::matmul_nt(stu, ref), 1.0f / tau);
  std::vector<std::size_t> identity(selected.size());
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  Var forward = diff::softmax_cross_entropy(sim, identity);
  Var backward = diff::softmax_cross_entropy(diff::transpose(sim), identity);
  out.loss = diff::scale(diff::add(forward, backward), 0.5f);
  return out;
}

Var symmetric_contrastive(Var a, Var b, float tau) {
  const std::size_t n = a.value().rows();
  if (b.value().rows() != n) throw Error(ErrorCode::RowCountMismatch, "row counts differ");
  Var sim = diff::scale(diff::matmul_nt(a, b), 1.0f / tau);
  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  return diff::scale(diff::add(diff::softmax_cross_entropy(sim, identity),
                               diff::softmax_cross_entropy(diff::transpose(sim), identity)),
                     0.5f);
}

Var text_reference(Var z_text, std::span<const std::size_t> labels) {
  return diff::gather_rows(z_text, labels);
}

void DynamicWeights::clamp() noexcept {
  for (float& l : lambda) l = std::max(l, lambda_min);
}

std::array<float, 3> DynamicWeights::effective() const noexcept {
  return {std::exp(-lambda[0]), std::exp(-lambda[1]), std::exp(-lambda[2])};
}

TotalLoss total_loss(std::span<const Var, 3> losses, Var lambda) {
  if (lambda.value().size() != 3) throw Error(ErrorCode::ShapeMismatch, "expected three log-variances");
  TotalLoss out;
  for (std::size_t k = 0; k < 3; ++k) {
    const float l = losses[k].value().item();
    if (!std::isfinite(l)) {
      throw Error(ErrorCode::NonFiniteLoss, std::string("L_") + kTeacherNames[k] + " = " + std::to_string(l));
    }
    if (l < 0.0f) throw Error(ErrorCode::InvalidArgument, std::string("negative L_") + kTeacherNames[k]);
    out.breakdown.losses[k] = l;
    out.breakdown.lambda[k] = lambda.value()[k];
    out.breakdown.weights[k] = std::exp(-lambda.value()[k]);
  }
  Var stacked = diff::stack(losses);
  Var weighted = diff::mul(diff::exp(diff::neg(lambda)), stacked);
  out.total = diff::sum(diff::add(weighted, lambda));
  out.breakdown.total = out.total.value().item();
  if (!std::isfinite(out.breakdown.total)) throw Error(ErrorCode::NonFiniteLoss, "total loss is not finite");
  return out;
}

float total_loss_value(const std::array<float, 3>& losses, const std::array<float, 3>& lambda) {
  double acc = 0.0;
  for (std::size_t k = 0; k < 3; ++k) acc += std::exp(-double(lambda[k])) * losses[k] + lambda[k];
  return static_cast<float>(acc);
}

}  // namespace rpd::loss
