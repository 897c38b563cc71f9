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
#include <optional>
#include <vector>

#include "sacn/autograd.hpp"

namespace sacn {

enum class Mode { train, eval };

/// Running statistics for batch normalization. Default-constructed state is
/// uninitialized and cannot be used in eval mode.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
  bool initialized() const { return !running_mean.empty() && !running_var.empty(); }
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Every op below computes its forward value immediately and, when the tape is
// recording and some input requires a gradient, registers its backward rule.

/// 2-D cross-correlation. input N x C x H x W, weight F x C x KH x KW,
/// optional bias F. Output extents floor((H + 2p - K) / s) + 1.
Var conv2d(Tape& tape, const Var& input, const Var& weight, const std::optional<Var>& bias,
           std::size_t stride, std::size_t padding);

/// Matrix product. Rank-2 x rank-2, or batched rank-3 where either side may
/// be rank-2 (shared across the batch) or have batch extent 1.
Var matmul(Tape& tape, const Var& a, const Var& b);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Var transpose_last(Tape& tape, const Var& a);

/// Softmax along `axis` with max-subtraction.
Var softmax(Tape& tape, const Var& input, std::size_t axis);
Var sigmoid(Tape& tape, const Var& input);
Var relu(Tape& tape, const Var& input);
Var add(Tape& tape, const Var& a, const Var& b);
Var mul(Tape& tape, const Var& a, const Var& b);
Var scale(Tape& tape, const Var& a, double s);
/// Sum of all elements as a {1} tensor.
Var sum(Tape& tape, const Var& a);

/// Concatenation along an arbitrary axis; all other extents must agree.
Var concat(Tape& tape, const std::vector<Var>& inputs, std::size_t axis);
inline Var concat_channels(Tape& tape, const std::vector<Var>& inputs) {
  return concat(tape, inputs, 1);
}

Var avgpool2d(Tape& tape, const Var& input, std::size_t window, std::size_t stride);
Var global_avgpool(Tape& tape, const Var& input);
Var maxpool2d(Tape& tape, const Var& input, std::size_t window, std::size_t stride,
              std::size_t padding);
/// Nearest-neighbour upsampling by an integer factor; rows/cols beyond
/// factor * input extent repeat the last source row/col.
Var upsample_nearest(Tape& tape, const Var& input, std::size_t factor, std::size_t out_height,
                     std::size_t out_width);

Var batchnorm2d(Tape& tape, const Var& input, const Var& gamma, const Var& beta,
                BatchNormState& state, Mode mode, double momentum = kBatchNormMomentum,
                double epsilon = kBatchNormEpsilon);

Var reshape(Tape& tape, const Var& input, Shape shape);
/// N x C x H x W -> N x (H*W) x C, positions in row-major order.
Var to_positions(Tape& tape, const Var& input);
/// Inverse of to_positions.
Var from_positions(Tape& tape, const Var& input, std::size_t height, std::size_t width);

/// x (N x C) * w (C x F) + b (F).
Var linear(Tape& tape, const Var& input, const Var& weight, const Var& bias);

/// While alive, folds every ReLU sign pattern and max-pool winner computed on
/// this thread into a fingerprint. Two forwards with equal fingerprints took
/// the same branch at every kink, so a central difference between them is
/// taken over a smooth piece of the function. Monitors do not nest.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  /// Clears the fingerprint before a new forward.
  void reset() { hash_ = 0xcbf29ce484222325ULL; }
  std::uint64_t fingerprint() const { return hash_; }
  void fold(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }

  static KinkMonitor* active();

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Logistic function, clamped to the open interval (0, 1).
double stable_sigmoid(double z);

}  // namespace sacn
