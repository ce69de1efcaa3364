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

#include "rpd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "rpd/error.hpp"

namespace rpd::diff {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var input = tape.constant(x);
  const float v = f(tape, input).value().item();
  if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteEvaluation, "f is not finite at a probe point");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFn& f, const Tensor& x, double h, double tol) {
  if (!(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "step must be positive");
  const float step = static_cast<float>(std::exp2(std::round(std::log2(h))));

  GradCheckReport report;
  {
    Tape tape;
    Var input = tape.leaf(x, true);
    Var out = f(tape, input);
    if (!std::isfinite(out.value().item())) {
      throw Error(ErrorCode::NonFiniteEvaluation, "f is not finite at x");
    }
    tape.backward(out);
    for (float g : input.grad().data()) report.analytic.push_back(g);
  }

  report.numeric.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor plus = x;
    Tensor minus = x;
    plus[i] = x[i] + step;
    minus[i] = x[i] - step;
    const double width = static_cast<double>(plus[i]) - static_cast<double>(minus[i]);
    report.numeric[i] = (evaluate(f, plus) - evaluate(f, minus)) / width;

    const double a = report.analytic[i];
    const double n = report.numeric[i];
    const double rel = std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace rpd::diff
