// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

// Shared helpers for the test suites. The finite-difference checker here is
// deliberately separate from the library's own gradcheck code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sacn/autograd.hpp"
#include "sacn/ops.hpp"
#include "sacn/random.hpp"

namespace sacn::testing {

inline Tensor random_normal(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor random_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Builds an output from leaf Vars on a tape.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Relative error with a floor on the denominator so gradients that are zero
/// up to rounding compare on an absolute scale.
inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradReport {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of the scalar sum(out * weights), with
/// fixed random weights, against central differences for every input
/// element. The difference is taken per output element before weighting so
/// outputs untouched by a perturbation cancel exactly.
inline GradReport check_gradients(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t seed,
                                  double eps = 1e-5, double floor = 1e-8) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.variable(t));
  Var out = build(tape, leaves);
  Rng rng(seed ^ 0x5eedULL);
  const Tensor weights = random_normal(out.shape(), rng);
  tape.backward(out, weights);

  GradReport report;
  std::vector<Tensor> probe = inputs;
  auto eval = [&]() {
    Tape t(false);
    std::vector<Var> v;
    for (const auto& x : probe) v.push_back(t.constant(x));
    return build(t, v).value();
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& analytic = leaves[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + eps;
      const Tensor up = eval();
      probe[k][i] = orig - eps;
      const Tensor down = eval();
      probe[k][i] = orig;
      double numeric = 0.0;
      for (std::size_t j = 0; j < up.size(); ++j) numeric += weights[j] * (up[j] - down[j]);
      numeric /= 2 * eps;
      report.max_rel = std::max(report.max_rel, rel_error(analytic[i], numeric, floor));
      report.max_abs = std::max(report.max_abs, std::abs(analytic[i] - numeric));
      ++report.checked;
    }
  }
  return report;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sacn::testing
