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

#include "sacn/autograd.hpp"

namespace sacn {

Parameter::Parameter(std::string name, Tensor value)
    : name_(std::move(name)), node_(std::make_shared<Node>()) {
  node_->grad = Tensor(value.shape(), 0.0);
  node_->value = std::move(value);
  node_->requires_grad = true;
}

Var Tape::constant(Tensor value) const {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Tape::variable(Tensor value) const {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = recording_;
  return Var(std::move(node));
}

Var Tape::parameter(const Parameter& p) const {
  // A non-recording tape never propagates requires_grad, so aliasing the
  // parameter node is safe for inference too.
  return Var(p.node());
}

Var Tape::make_result(Tensor value, std::initializer_list<const Var*> inputs) const {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (recording_) {
    for (const Var* v : inputs) {
      if (v != nullptr && v->requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  return Var(std::move(node));
}

Var Tape::make_result(Tensor value, const std::vector<Var>& inputs) const {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (recording_) {
    for (const auto& v : inputs) {
      if (v.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  return Var(std::move(node));
}

void Tape::record(const Var& output, std::function<void()> backward) {
  if (!recording_ || !output.requires_grad()) return;
  ops_.push_back(std::move(backward));
}

void Tape::backward(const Var& output) {
  if (output.value().size() != 1) {
    throw ShapeError("backward() without a seed needs a single-element output, got " +
                     to_string(output.shape()));
  }
  backward(output, Tensor(output.shape(), 1.0));
}

void Tape::backward(const Var& output, const Tensor& seed) {
  if (!seed.same_shape(output.value())) throw ShapeError("backward seed shape mismatch");
  if (!output.requires_grad()) return;
  accumulate(output.grad_buffer(), seed);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("gradient shape " + to_string(src.shape()) + " does not match " +
                     to_string(dst.shape()));
  }
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace sacn
