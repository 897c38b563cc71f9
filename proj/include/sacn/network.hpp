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
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sacn/archive.hpp"
#include "sacn/attention.hpp"
#include "sacn/autograd.hpp"
#include "sacn/ops.hpp"

namespace sacn {

/// Topology of the attention-augmented densely connected classifier.
struct NetworkConfig {
  struct Stem {
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t channels = 16;
    bool max_pool = false;  // 3x3 stride-2 max pool after the stem
    friend bool operator==(const Stem&, const Stem&) = default;
  };
  struct Attention {
    std::size_t heads = 2;
    // Attention channels per augmented layer; unset derives ceil(growth/5)
    // rounded up to a multiple of `heads`. Zero keeps the plain convolution.
    std::optional<std::size_t> channels;
    std::optional<std::size_t> key_dim;    // unset: channels / heads
    std::optional<std::size_t> value_dim;  // unset: channels / heads
    bool relative_positions = true;
    std::size_t position_cap = 1024;
    // "first" | "all" | "none" | comma list of block.layer (1-based), e.g. "1.1,3.2".
    std::string placement = "first";
    friend bool operator==(const Attention&, const Attention&) = default;
  };

  std::size_t in_channels = 3;
  std::size_t input_height = 32;
  std::size_t input_width = 32;
  Stem stem;
  std::vector<std::size_t> block_layout{2, 2, 2, 2};
  std::size_t growth_rate = 8;
  std::size_t bottleneck_factor = 4;
  double compression = 0.5;
  Attention attention;
  std::size_t num_classes = 14;

  /// Desk profile: 32x32 input, 3x3 stem, layout [2,2,2,2], growth 8.
  static NetworkConfig desk();
  /// DenseNet-121 layout: 224x224 input, 7x7/2 stem + max pool, [6,12,24,16], growth 32.
  static NetworkConfig full();

  void validate() const;
  /// Parsed placement as (block, layer) pairs, 0-based.
  std::set<std::pair<std::size_t, std::size_t>> attention_layers() const;
  /// Attention shape for a layer of the given block spatial size.
  AttentionConfig attention_config(std::size_t height, std::size_t width) const;

  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Pooling factor the attention branch applies to an H x W map under `cap`.
std::size_t attention_pool_factor(std::size_t height, std::size_t width, std::size_t cap);

class BatchNorm {
 public:
  BatchNorm(const std::string& prefix, std::size_t channels);
  Var forward(Tape& tape, const Var& x, Mode mode);

  Parameter gamma;
  Parameter beta;
  BatchNormState state;
  std::string prefix;
};

/// BN -> ReLU -> 1x1 bottleneck conv -> BN -> ReLU -> 3x3 (augmented) conv.
class CompositeLayer {
 public:
  CompositeLayer(const std::string& prefix, std::size_t in_channels, std::size_t bottleneck,
                 std::size_t growth, const AttentionConfig& attention, Rng& rng);
  Var forward(Tape& tape, const Var& x, Mode mode);

  BatchNorm norm1;
  Parameter conv1;
  BatchNorm norm2;
  AugmentedConv conv2;
};

class DenseBlock {
 public:
  /// Per-layer inputs and outputs captured during a forward.
  struct Trace {
    std::vector<Tensor> layer_inputs;
    std::vector<Tensor> layer_outputs;
  };

  DenseBlock(std::size_t in_channels, std::size_t growth) : in_channels(in_channels), growth(growth) {}
  Var forward(Tape& tape, const Var& x, Mode mode, Trace* trace = nullptr);
  std::size_t out_channels() const { return in_channels + layers.size() * growth; }

  std::size_t in_channels;
  std::size_t growth;
  std::size_t height = 0, width = 0;
  std::vector<CompositeLayer> layers;
};

/// BN -> ReLU -> 1x1 conv to floor(compression * C) -> 2x2 average pool.
class Transition {
 public:
  Transition(const std::string& prefix, std::size_t in_channels, std::size_t out_channels, Rng& rng);
  Var forward(Tape& tape, const Var& x, Mode mode);

  BatchNorm norm;
  Parameter conv;
  std::size_t out_channels;
};

struct ImportReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;  // "name: reason"
};

class Network {
 public:
  static Network build(const NetworkConfig& config, std::uint64_t seed);

  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  ~Network();

  /// Logits B x num_classes. Train mode updates batch-norm running state.
  Var forward(Tape& tape, const Var& batch, Mode mode);
  /// Untaped forward.
  Tensor logits(const Tensor& batch, Mode mode = Mode::eval);
  /// Eval-mode sigmoid of the logits; independent per class.
  Tensor predict_probabilities(const Tensor& batch);

  const NetworkConfig& config() const;
  /// Trainable parameters in construction order.
  const std::vector<Parameter*>& parameters() const;
  Parameter* find_parameter(const std::string& name) const;
  std::size_t parameter_count() const;
  /// Named batch-norm running statistics ("<prefix>/running_mean|running_var").
  std::vector<std::pair<std::string, Tensor*>> buffers() const;
  void zero_grad();

  std::vector<DenseBlock>& blocks();
  const std::vector<DenseBlock>& blocks() const;
  const std::vector<Transition>& transitions() const;

  /// Parameters and buffers with the config in the manifest.
  Archive export_weights() const;
  /// Copies matching tensors from an archive. Names are matched exactly and
  /// shapes must agree; strict mode throws on any mismatch or omission.
  ImportReport import_weights(const Archive& archive, bool strict);
  ImportReport import_pretrained(const std::filesystem::path& archive_path, bool strict);

 private:
  struct Body;
  explicit Network(std::unique_ptr<Body> body);
  std::unique_ptr<Body> body_;
};

}  // namespace sacn
