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

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sacn/tensor.hpp"

namespace sacn {

/// Storage behind a Var: a value and, when gradients flow through it, a
/// same-shape gradient buffer that is allocated on first use.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

/// Handle to a node on a tape. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient buffer; zeros if nothing has been accumulated yet.
  const Tensor& grad() const { return node_->grad_buffer(); }
  Tensor& grad_buffer() const { return node_->grad_buffer(); }

  Node* node() const { return node_.get(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Named trainable tensor. The gradient accumulator persists across tapes
/// until zero_grad().
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  const std::string& name() const { return name_; }
  Tensor& value() { return node_->value; }
  const Tensor& value() const { return node_->value; }
  Tensor& grad() { return node_->grad; }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.fill(0.0); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::string name_;
  std::shared_ptr<Node> node_;
};

/// Records backward closures in forward order and replays them in reverse.
///
/// A tape built with `recording == false` runs the same forward code but
/// keeps nothing, which is what inference uses.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value) const;
  /// Leaf that accumulates a gradient (used by tests and gradient checks).
  Var variable(Tensor value) const;
  /// Leaf aliasing a parameter so backward accumulates into Parameter::grad.
  Var parameter(const Parameter& p) const;

  /// Output node for an op. It requires grad iff any input does.
  Var make_result(Tensor value, std::initializer_list<const Var*> inputs) const;
  Var make_result(Tensor value, const std::vector<Var>& inputs) const;

  /// Registers a backward closure; ignored unless recording and `output`
  /// requires grad.
  void record(const Var& output, std::function<void()> backward);

  /// Seeds d(output)/d(output) = 1 for a single-element output and runs every
  /// recorded closure in reverse order.
  void backward(const Var& output);
  /// Same, with an explicit upstream gradient.
  void backward(const Var& output, const Tensor& seed);

  std::size_t size() const { return ops_.size(); }

 private:
  bool recording_;
  std::vector<std::function<void()>> ops_;
};

/// Adds `src` into `dst` elementwise; shapes must match.
void accumulate(Tensor& dst, const Tensor& src);

}  // namespace sacn
