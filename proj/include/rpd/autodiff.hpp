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
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "rpd/tensor.hpp"

namespace rpd::diff {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Dynamic reverse-mode tape. Operations append nodes in execution order;
/// backward() replays them in reverse. Single owner, not thread-safe.
class Tape {
 public:
  /// Called during backward with the node's own id; must accumulate into
  /// parents through grad_of().
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an operation result. `backward` may be empty when
  /// requires_grad is false.
  Var record(Tensor value, bool requires_grad, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad_of(std::size_t id);
  const Tensor& grad(std::size_t id) const;
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  /// Reverse sweep from a single-element root. Clears previous gradients
  /// first; every requires_grad leaf ends up with a gradient buffer.
  void backward(Var root);

  /// Number of recorded nodes (leaves included).
  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of recorded non-leaf operations.
  std::size_t op_count() const noexcept { return op_count_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    bool is_leaf = false;
    Backward backward;
  };
  // deque keeps references to node values stable while the tape grows.
  std::deque<Node> nodes_;
  std::size_t op_count_ = 0;
};

enum class Reduction { Mean, Sum };

// Elementwise and linear algebra. Shapes follow Tensor::rows()/cols().
Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var add_bias(Var a, Var bias);
Var relu(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float factor);
Var add_scalar(Var a, float offset);
Var exp(Var a);
Var neg(Var a);
Var sum(Var a);
Var mean(Var a);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var gather_rows(Var a, std::span<const std::size_t> index);
Var concat_rows(Var a, Var b);
Var stack(std::span<const Var> scalars);
Var dot_rows(Var a, Var b);  // [n,d],[n,d] -> [n]

/// Row-wise v / ||v||. Throws DegenerateNorm if any row norm < 1e-12.
Var l2_normalize(Var v);

/// Mean of -log softmax(logits)[label] over rows (or the sum, for attacks
/// that need per-sample gradients at unit scale).
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels,
                          Reduction reduction = Reduction::Mean);

/// Elementwise max over the set axis of an [N, D] tensor; result has shape
/// [D]. Ties route the gradient to the lowest row index.
Var set_max_pool(Var features);

/// Max pool over consecutive row segments [offsets[g], offsets[g+1]) of
/// `features`, each segment extended by all rows of `extra` placed after
/// its own rows. `extra` may be invalid (no extra rows). Result [G, D].
Var segment_max_pool(Var features, std::span<const std::size_t> offsets, Var extra = Var{});

/// Mean over consecutive row segments. Result [G, D].
Var segment_mean(Var features, std::span<const std::size_t> offsets);

constexpr float kNormEpsilon = 1e-12f;

}  // namespace rpd::diff
