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

#include <functional>
#include <vector>

#include "rpd/autodiff.hpp"

namespace rpd::diff {

/// Scalar-valued differentiable function of one tensor argument.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the tape gradient of `f` at `x` against central differences,
/// one coordinate at a time.
///
/// The step is rounded to the nearest power of two so x +/- h is formed
/// with as little representation error as float allows, and the quotient
/// divides by the realised (x+h) - (x-h). Relative error per coordinate is
/// |a - n| / max(1, |a|, |n|). Throws NonFiniteEvaluation when f is not
/// finite at a probe point.
GradCheckReport finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-3,
                                  double tol = 1e-3);

}  // namespace rpd::diff
