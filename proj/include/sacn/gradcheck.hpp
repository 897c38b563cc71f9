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

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace sacn {

/// Outcome of one finite-difference comparison.
struct GradCheckResult {
  std::string name;
  double max_rel = 0.0;
  double threshold = 0.0;
  std::size_t checked = 0;  // compared scalars (coordinates or directions)

  bool passed() const { return max_rel < threshold; }
};

enum class GradCheckScope { ops, network, all };

GradCheckScope parse_gradcheck_scope(std::string_view name);  // "ops" | "network" | "all"

/// Central differences (eps 1e-5) against reverse-mode gradients.
///
/// Op checks compare every input coordinate of sum(out * r) for a fixed
/// random r; smooth ops must agree to 1e-6 and the rest (convolution,
/// pooling, ReLU, training-mode batch norm) to 1e-4. The network check uses
/// the desk topology on a 16 x 16 input and compares, for each parameter
/// tensor, the derivative along a random unit direction; stencils that change
/// a ReLU or max-pool branch are redrawn.
std::vector<GradCheckResult> run_gradcheck(GradCheckScope scope, std::uint64_t seed, std::size_t seeds = 1);

}  // namespace sacn
