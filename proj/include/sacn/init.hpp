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

#include <cmath>

#include "sacn/random.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

/// Uniform(-bound, bound) fill.
inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

/// Fan-in scaled uniform init for weights feeding a ReLU: bound sqrt(6 / fan_in).
inline Tensor relu_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

/// Fan-in scaled uniform init for linear maps: bound 1 / sqrt(fan_in).
inline Tensor linear_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace sacn
