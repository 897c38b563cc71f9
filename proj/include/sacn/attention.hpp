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

#include <optional>
#include <string>
#include <vector>

#include "sacn/autograd.hpp"
#include "sacn/ops.hpp"
#include "sacn/random.hpp"

namespace sacn {

/// Shape of one multi-head self-attention branch.
struct AttentionConfig {
  std::size_t num_heads = 1;   // N_h
  std::size_t key_dim = 1;     // D_k, per head (queries share it)
  std::size_t value_dim = 1;   // D_h, per head
  std::size_t output_dim = 1;  // D_out
  bool relative_positions = false;
  // Capacity of the relative embeddings; the attended grid may not exceed it.
  std::size_t max_height = 0;
  std::size_t max_width = 0;
  // Inputs with more positions are average-pooled before attending.
  std::size_t position_cap = 1024;

  void validate() const;
  /// Parameter count for an input with `in_channels` channels.
  std::size_t parameter_count(std::size_t in_channels) const;
};

/// Default attentional share of a block with `out_channels` outputs:
/// D_out = ceil(out/5) rounded up to a multiple of `heads`, D_k = D_h = D_out/heads.
AttentionConfig default_attention(std::size_t out_channels, std::size_t heads);

/// softmax(Q K^T / sqrt(D_k) + extra) V over batch x positions x dim tensors.
/// When `weights` is non-null it receives the attention matrix.
Var scaled_dot_attention(Tape& tape, const Var& q, const Var& k, const Var& v,
                         const Var* extra_logits = nullptr, Tensor* weights = nullptr);

/// One-node equivalent of scaled_dot_attention(q, k, v, relative_logits(q,
/// rel_height, rel_width, height, width)), or of the plain form when both
/// tables are null. Backward keeps only the attention weights and works one
/// batch item at a time, so peak memory is one positions x positions matrix
/// per item instead of several per batch.
Var fused_attention(Tape& tape, const Var& q, const Var& k, const Var& v, const Var* rel_height,
                    const Var* rel_width, std::size_t height, std::size_t width, Tensor* weights = nullptr);

/// Additive relative-position logits for queries laid out on a height x width
/// grid: out[b, i, j] = q_i . rel_height[dr] + q_i . rel_width[dc], where
/// (dr, dc) is the offset from position i to position j and the embedding
/// tables are indexed from offset -(max - 1).
Var relative_logits(Tape& tape, const Var& q, const Var& rel_height, const Var& rel_width,
                    std::size_t height, std::size_t width);

/// Multi-head self-attention over every position of a feature map.
class MultiHeadSelfAttention {
 public:
  struct Head {
    Parameter query;  // C x D_k
    Parameter key;    // C x D_k
    Parameter value;  // C x D_h
  };

  MultiHeadSelfAttention(const std::string& prefix, std::size_t in_channels, AttentionConfig config,
                         Rng& rng);

  /// B x C x H x W -> B x D_out x H x W.
  Var forward(Tape& tape, const Var& input) const;
  /// Attention matrices of each head (B x P x P) for a forward on `input`.
  std::vector<Tensor> attention_maps(const Tensor& input) const;

  const AttentionConfig& config() const { return config_; }
  std::size_t in_channels() const { return in_channels_; }
  const std::vector<Head>& heads() const { return heads_; }
  const Parameter& output() const { return output_; }
  const std::optional<Parameter>& rel_height() const { return rel_height_; }
  const std::optional<Parameter>& rel_width() const { return rel_width_; }

  std::vector<Parameter*> parameters();
  /// Pooling factor applied before attending on an H x W input.
  std::size_t pool_factor(std::size_t height, std::size_t width) const;

 private:
  Var run(Tape& tape, const Var& input, std::vector<Tensor>* maps) const;

  AttentionConfig config_;
  std::size_t in_channels_;
  std::vector<Head> heads_;
  Parameter output_;  // N_h * D_h x D_out
  std::optional<Parameter> rel_height_;
  std::optional<Parameter> rel_width_;
};

/// Convolution whose output is the channel concatenation of a k x k
/// convolution (out_channels - D_out maps) and self-attention (D_out maps).
class AugmentedConv {
 public:
  struct Options {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;  // F_out
    std::size_t kernel = 3;
    bool conv_bias = false;
    // output_dim == 0 disables the attention branch.
    AttentionConfig attention{.output_dim = 0};
  };

  AugmentedConv(const std::string& prefix, const Options& options, Rng& rng);

  Var forward(Tape& tape, const Var& input) const;

  std::size_t out_channels() const { return options_.out_channels; }
  std::size_t attention_channels() const { return attention_ ? options_.attention.output_dim : 0; }
  const Parameter& conv_weight() const { return conv_weight_; }
  Parameter& conv_weight() { return conv_weight_; }
  const std::optional<Parameter>& conv_bias() const { return conv_bias_; }
  std::optional<Parameter>& conv_bias() { return conv_bias_; }
  const std::optional<MultiHeadSelfAttention>& attention() const { return attention_; }

  std::vector<Parameter*> parameters();

 private:
  Options options_;
  Parameter conv_weight_;
  std::optional<Parameter> conv_bias_;
  std::optional<MultiHeadSelfAttention> attention_;
};

}  // namespace sacn
