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

#include "sacn/attention.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "sacn/init.hpp"

namespace sacn {

void AttentionConfig::validate() const {
  if (num_heads == 0) throw std::invalid_argument("attention: num_heads must be >= 1");
  if (key_dim == 0) throw std::invalid_argument("attention: key_dim must be >= 1");
  if (value_dim == 0) throw std::invalid_argument("attention: value_dim must be >= 1");
  if (output_dim == 0) throw std::invalid_argument("attention: output_dim must be >= 1");
  if (position_cap == 0) throw std::invalid_argument("attention: position_cap must be >= 1");
  if (relative_positions && (max_height == 0 || max_width == 0)) {
    throw std::invalid_argument("attention: relative positions need max_height/max_width");
  }
}

std::size_t AttentionConfig::parameter_count(std::size_t in_channels) const {
  std::size_t n = num_heads * in_channels * (2 * key_dim + value_dim) + num_heads * value_dim * output_dim;
  if (relative_positions) n += (2 * max_height - 1) * key_dim + (2 * max_width - 1) * key_dim;
  return n;
}

AttentionConfig default_attention(std::size_t out_channels, std::size_t heads) {
  if (heads == 0) throw std::invalid_argument("attention: heads must be >= 1");
  AttentionConfig cfg;
  cfg.num_heads = heads;
  std::size_t d_out = (out_channels + 4) / 5;
  d_out = (d_out + heads - 1) / heads * heads;
  cfg.output_dim = d_out;
  cfg.key_dim = d_out / heads;
  cfg.value_dim = d_out / heads;
  return cfg;
}

Var scaled_dot_attention(Tape& tape, const Var& q, const Var& k, const Var& v,
                         const Var* extra_logits, Tensor* weights) {
  if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3) {
    throw ShapeError("attention: Q, K, V must be batch x positions x dim");
  }
  if (q.dim(2) != k.dim(2)) {
    throw ShapeError("attention: query dim " + std::to_string(q.dim(2)) + " != key dim " +
                     std::to_string(k.dim(2)));
  }
  if (q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1) || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: position/batch counts differ: Q " + to_string(q.shape()) + ", K " +
                     to_string(k.shape()) + ", V " + to_string(v.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
  Var logits = scale(tape, matmul(tape, q, transpose_last(tape, k)), inv_sqrt);
  if (extra_logits != nullptr) logits = add(tape, logits, *extra_logits);
  Var attn = softmax(tape, logits, 2);
  if (weights != nullptr) *weights = attn.value();
  return matmul(tape, attn, v);
}

Var relative_logits(Tape& tape, const Var& q, const Var& rel_height, const Var& rel_width,
                    std::size_t height, std::size_t width) {
  if (q.value().rank() != 3) throw ShapeError("relative_logits: Q must be batch x positions x D_k");
  const std::size_t batch = q.dim(0), positions = q.dim(1), dk = q.dim(2);
  if (positions != height * width) throw ShapeError("relative_logits: grid does not match positions");
  if (rel_height.value().rank() != 2 || rel_width.value().rank() != 2 || rel_height.dim(1) != dk ||
      rel_width.dim(1) != dk) {
    throw ShapeError("relative_logits: embeddings must be (2*max-1) x D_k");
  }
  const std::size_t rows_h = rel_height.dim(0), rows_w = rel_width.dim(0);
  if (rows_h % 2 == 0 || rows_w % 2 == 0) throw ShapeError("relative_logits: embedding rows must be odd");
  const std::size_t max_h = (rows_h + 1) / 2, max_w = (rows_w + 1) / 2;
  if (height > max_h || width > max_w) {
    throw std::out_of_range("relative_logits: " + std::to_string(height) + "x" + std::to_string(width) +
                            " grid exceeds embedding capacity " + std::to_string(max_h) + "x" +
                            std::to_string(max_w));
  }
  // Offset d in [-(extent-1), extent-1] maps to embedding row d + max - 1.
  const std::size_t span_h = 2 * height - 1, span_w = 2 * width - 1;
  const std::size_t base_h = max_h - height, base_w = max_w - width;

  Tensor out({batch, positions, positions});
  std::vector<double> qh(span_h), qw(span_w);
  const double* qv = q.value().raw();
  const double* eh = rel_height.value().raw();
  const double* ew = rel_width.value().raw();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < positions; ++i) {
      const double* qi = qv + (b * positions + i) * dk;
      for (std::size_t r = 0; r < span_h; ++r) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dk; ++d) acc += qi[d] * eh[(base_h + r) * dk + d];
        qh[r] = acc;
      }
      for (std::size_t r = 0; r < span_w; ++r) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dk; ++d) acc += qi[d] * ew[(base_w + r) * dk + d];
        qw[r] = acc;
      }
      const std::size_t ri = i / width, ci = i % width;
      double* row = out.raw() + (b * positions + i) * positions;
      for (std::size_t j = 0; j < positions; ++j) {
        const std::size_t rj = j / width, cj = j % width;
        row[j] = qh[rj + height - 1 - ri] + qw[cj + width - 1 - ci];
      }
    }
  }
  Var result = tape.make_result(std::move(out), {&q, &rel_height, &rel_width});
  tape.record(result, [q, rel_height, rel_width, result, batch, positions, dk, height, width, span_h,
                       span_w, base_h, base_w] {
    const Tensor& dout = result.node()->grad;
    if (dout.empty()) return;
    std::vector<double> gh(span_h), gw(span_w);
    const double* qv = q.value().raw();
    const double* eh = rel_height.value().raw();
    const double* ew = rel_width.value().raw();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < positions; ++i) {
        std::fill(gh.begin(), gh.end(), 0.0);
        std::fill(gw.begin(), gw.end(), 0.0);
        const std::size_t ri = i / width, ci = i % width;
        const double* row = dout.raw() + (b * positions + i) * positions;
        for (std::size_t j = 0; j < positions; ++j) {
          const std::size_t rj = j / width, cj = j % width;
          gh[rj + height - 1 - ri] += row[j];
          gw[cj + width - 1 - ci] += row[j];
        }
        const double* qi = qv + (b * positions + i) * dk;
        if (q.requires_grad()) {
          double* dq = q.grad_buffer().raw() + (b * positions + i) * dk;
          for (std::size_t r = 0; r < span_h; ++r) {
            for (std::size_t d = 0; d < dk; ++d) dq[d] += gh[r] * eh[(base_h + r) * dk + d];
          }
          for (std::size_t r = 0; r < span_w; ++r) {
            for (std::size_t d = 0; d < dk; ++d) dq[d] += gw[r] * ew[(base_w + r) * dk + d];
          }
        }
        if (rel_height.requires_grad()) {
          double* deh = rel_height.grad_buffer().raw();
          for (std::size_t r = 0; r < span_h; ++r) {
            for (std::size_t d = 0; d < dk; ++d) deh[(base_h + r) * dk + d] += gh[r] * qi[d];
          }
        }
        if (rel_width.requires_grad()) {
          double* dew = rel_width.grad_buffer().raw();
          for (std::size_t r = 0; r < span_w; ++r) {
            for (std::size_t d = 0; d < dk; ++d) dew[(base_w + r) * dk + d] += gw[r] * qi[d];
          }
        }
      }
    }
  });
  return result;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace

Var fused_attention(Tape& tape, const Var& q, const Var& k, const Var& v, const Var* rel_height,
                    const Var* rel_width, std::size_t height, std::size_t width, Tensor* weights) {
  if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3) {
    throw ShapeError("attention: Q, K, V must be batch x positions x dim");
  }
  if (q.dim(2) != k.dim(2)) {
    throw ShapeError("attention: query dim " + std::to_string(q.dim(2)) + " != key dim " +
                     std::to_string(k.dim(2)));
  }
  if (q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1) || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: position/batch counts differ: Q " + to_string(q.shape()) + ", K " +
                     to_string(k.shape()) + ", V " + to_string(v.shape()));
  }
  if ((rel_height == nullptr) != (rel_width == nullptr)) {
    throw std::invalid_argument("fused_attention: pass both relative tables or neither");
  }
  const std::size_t batch = q.dim(0), positions = q.dim(1), dk = q.dim(2), dv = v.dim(2);
  const auto P = static_cast<Eigen::Index>(positions);
  const auto Dk = static_cast<Eigen::Index>(dk);
  const auto Dv = static_cast<Eigen::Index>(dv);
  const bool relative = rel_height != nullptr;
  std::size_t span_h = 0, span_w = 0, base_h = 0, base_w = 0;
  if (relative) {
    if (positions != height * width) throw ShapeError("fused_attention: grid does not match positions");
    const Tensor& eh = rel_height->value();
    const Tensor& ew = rel_width->value();
    if (eh.rank() != 2 || ew.rank() != 2 || eh.dim(1) != dk || ew.dim(1) != dk) {
      throw ShapeError("relative_logits: embeddings must be (2*max-1) x D_k");
    }
    if (eh.dim(0) % 2 == 0 || ew.dim(0) % 2 == 0) throw ShapeError("relative_logits: embedding rows must be odd");
    const std::size_t max_h = (eh.dim(0) + 1) / 2, max_w = (ew.dim(0) + 1) / 2;
    if (height > max_h || width > max_w) {
      throw std::out_of_range("relative_logits: " + std::to_string(height) + "x" + std::to_string(width) +
                              " grid exceeds embedding capacity " + std::to_string(max_h) + "x" +
                              std::to_string(max_w));
    }
    span_h = 2 * height - 1;
    span_w = 2 * width - 1;
    base_h = max_h - height;
    base_w = max_w - width;
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  // One buffer per batch item keeps each allocation small enough for the
  // allocator to recycle instead of mapping fresh pages every step.
  auto attn = std::make_shared<std::vector<RowMat>>(batch);
  Tensor out({batch, positions, dv});
  RowMat qh, qw;
  for (std::size_t b = 0; b < batch; ++b) {
    ConstMapMat qb(q.value().raw() + b * positions * dk, P, Dk);
    ConstMapMat kb(k.value().raw() + b * positions * dk, P, Dk);
    ConstMapMat vb(v.value().raw() + b * positions * dv, P, Dv);
    RowMat& a = (*attn)[b];
    a.resize(P, P);
    if (relative) {
      ConstMapMat eh(rel_height->value().raw() + base_h * dk, static_cast<Eigen::Index>(span_h), Dk);
      ConstMapMat ew(rel_width->value().raw() + base_w * dk, static_cast<Eigen::Index>(span_w), Dk);
      qh.noalias() = qb * eh.transpose();
      qw.noalias() = qb * ew.transpose();
    }
    // Row by row so the logits are still in cache for the softmax.
    for (std::size_t i = 0; i < positions; ++i) {
      double* row = a.data() + i * positions;
      const double* qi = qb.data() + i * dk;
      for (std::size_t j = 0; j < positions; ++j) {
        const double* kj = kb.data() + j * dk;
        double acc = 0.0;
        for (std::size_t d = 0; d < dk; ++d) acc += qi[d] * kj[d];
        row[j] = acc * inv_sqrt;
      }
      if (relative) {
        const std::size_t ri = i / width, ci = i % width;
        const double* hrow = qh.data() + i * span_h + (height - 1 - ri);
        const double* wrow = qw.data() + i * span_w + (width - 1 - ci);
        for (std::size_t rj = 0, j = 0; rj < height; ++rj) {
          for (std::size_t cj = 0; cj < width; ++cj, ++j) row[j] += hrow[rj] + wrow[cj];
        }
      }
      auto arr = a.row(static_cast<Eigen::Index>(i)).array();
      arr = (arr - arr.maxCoeff()).exp();
      arr *= 1.0 / arr.sum();
    }
    MapMat ob(out.raw() + b * positions * dv, P, Dv);
    ob.noalias() = a * vb;
  }
  if (weights != nullptr) {
    *weights = Tensor({batch, positions, positions});
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n((*attn)[b].data(), positions * positions, weights->raw() + b * positions * positions);
    }
  }

  std::vector<Var> inputs{q, k, v};
  if (relative) {
    inputs.push_back(*rel_height);
    inputs.push_back(*rel_width);
  }
  Var result = tape.make_result(std::move(out), inputs);
  Var eh_var = relative ? *rel_height : Var();
  Var ew_var = relative ? *rel_width : Var();
  tape.record(result, [q, k, v, eh_var, ew_var, result, attn, relative, batch, positions, dk, dv, height, width,
                       span_h, span_w, base_h, base_w, inv_sqrt, P, Dk, Dv] {
    const Tensor& dout = result.node()->grad;
    if (dout.empty()) return;
    RowMat da(P, P), gh, gw;
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMapMat qb(q.value().raw() + b * positions * dk, P, Dk);
      ConstMapMat kb(k.value().raw() + b * positions * dk, P, Dk);
      ConstMapMat vb(v.value().raw() + b * positions * dv, P, Dv);
      const RowMat& a = (*attn)[b];
      ConstMapMat g(dout.raw() + b * positions * dv, P, Dv);
      if (v.requires_grad()) {
        MapMat dvb(v.grad_buffer().raw() + b * positions * dv, P, Dv);
        dvb.noalias() += a.transpose() * g;
      }
      // Softmax backward: dL = A .* (dA - rowsum(A .* dA)).
      da.noalias() = g * vb.transpose();
      for (std::size_t i = 0; i < positions; ++i) {
        const double* arow = a.data() + i * positions;
        double* drow = da.data() + i * positions;
        double dot = 0.0;
        for (std::size_t j = 0; j < positions; ++j) dot += arow[j] * drow[j];
        for (std::size_t j = 0; j < positions; ++j) drow[j] = arow[j] * (drow[j] - dot);
      }
      if (q.requires_grad()) {
        MapMat dqb(q.grad_buffer().raw() + b * positions * dk, P, Dk);
        dqb.noalias() += (da * kb) * inv_sqrt;
      }
      if (k.requires_grad()) {
        MapMat dkb(k.grad_buffer().raw() + b * positions * dk, P, Dk);
        dkb.noalias() += (da.transpose() * qb) * inv_sqrt;
      }
      if (!relative) continue;
      gh.setZero(P, static_cast<Eigen::Index>(span_h));
      gw.setZero(P, static_cast<Eigen::Index>(span_w));
      for (std::size_t i = 0; i < positions; ++i) {
        const std::size_t ri = i / width, ci = i % width;
        const double* drow = da.data() + i * positions;
        double* hrow = gh.data() + i * span_h + (height - 1 - ri);
        double* wrow = gw.data() + i * span_w + (width - 1 - ci);
        for (std::size_t rj = 0, j = 0; rj < height; ++rj) {
          for (std::size_t cj = 0; cj < width; ++cj, ++j) {
            hrow[rj] += drow[j];
            wrow[cj] += drow[j];
          }
        }
      }
      ConstMapMat eh(eh_var.value().raw() + base_h * dk, static_cast<Eigen::Index>(span_h), Dk);
      ConstMapMat ew(ew_var.value().raw() + base_w * dk, static_cast<Eigen::Index>(span_w), Dk);
      if (q.requires_grad()) {
        MapMat dqb(q.grad_buffer().raw() + b * positions * dk, P, Dk);
        dqb.noalias() += gh * eh + gw * ew;
      }
      if (eh_var.requires_grad()) {
        MapMat deh(eh_var.grad_buffer().raw() + base_h * dk, static_cast<Eigen::Index>(span_h), Dk);
        deh.noalias() += gh.transpose() * qb;
      }
      if (ew_var.requires_grad()) {
        MapMat dew(ew_var.grad_buffer().raw() + base_w * dk, static_cast<Eigen::Index>(span_w), Dk);
        dew.noalias() += gw.transpose() * qb;
      }
    }
  });
  return result;
}

MultiHeadSelfAttention::MultiHeadSelfAttention(const std::string& prefix, std::size_t in_channels,
                                               AttentionConfig config, Rng& rng)
    : config_(config), in_channels_(in_channels) {
  config_.validate();
  if (in_channels == 0) throw std::invalid_argument("attention: in_channels must be >= 1");
  for (std::size_t h = 0; h < config_.num_heads; ++h) {
    const std::string hp = prefix + "/head" + std::to_string(h);
    Head head{
        Parameter(hp + "/query", linear_uniform({in_channels, config_.key_dim}, in_channels, rng)),
        Parameter(hp + "/key", linear_uniform({in_channels, config_.key_dim}, in_channels, rng)),
        Parameter(hp + "/value", linear_uniform({in_channels, config_.value_dim}, in_channels, rng)),
    };
    heads_.push_back(std::move(head));
  }
  const std::size_t concat = config_.num_heads * config_.value_dim;
  output_ = Parameter(prefix + "/output", linear_uniform({concat, config_.output_dim}, concat, rng));
  if (config_.relative_positions) {
    rel_height_.emplace(prefix + "/rel_height",
                        linear_uniform({2 * config_.max_height - 1, config_.key_dim}, config_.key_dim, rng));
    rel_width_.emplace(prefix + "/rel_width",
                       linear_uniform({2 * config_.max_width - 1, config_.key_dim}, config_.key_dim, rng));
  }
}

std::size_t MultiHeadSelfAttention::pool_factor(std::size_t height, std::size_t width) const {
  std::size_t f = 1;
  while ((height / f) * (width / f) > config_.position_cap) {
    ++f;
    if (f > height || f > width) throw ShapeError("attention: cannot pool input under position cap");
  }
  return f;
}

Var MultiHeadSelfAttention::run(Tape& tape, const Var& input, std::vector<Tensor>* maps) const {
  if (input.value().rank() != 4) throw ShapeError("attention: input must be B x C x H x W");
  if (input.dim(1) != in_channels_) {
    throw ShapeError("attention: input has " + std::to_string(input.dim(1)) + " channels, expected " +
                     std::to_string(in_channels_));
  }
  const std::size_t height = input.dim(2), width = input.dim(3);
  const std::size_t factor = pool_factor(height, width);
  Var pooled = factor > 1 ? avgpool2d(tape, input, factor, factor) : input;
  const std::size_t ph = pooled.dim(2), pw = pooled.dim(3);
  if (config_.relative_positions && (ph > config_.max_height || pw > config_.max_width)) {
    throw std::out_of_range("attention: " + std::to_string(ph) + "x" + std::to_string(pw) +
                            " grid exceeds relative embedding capacity " +
                            std::to_string(config_.max_height) + "x" + std::to_string(config_.max_width));
  }
  Var x = to_positions(tape, pooled);
  std::vector<Var> head_outputs;
  head_outputs.reserve(heads_.size());
  for (const Head& head : heads_) {
    Var q = matmul(tape, x, tape.parameter(head.query));
    Var k = matmul(tape, x, tape.parameter(head.key));
    Var v = matmul(tape, x, tape.parameter(head.value));
    Tensor weights;
    Tensor* weights_out = maps != nullptr ? &weights : nullptr;
    if (config_.relative_positions) {
      const Var eh = tape.parameter(*rel_height_);
      const Var ew = tape.parameter(*rel_width_);
      head_outputs.push_back(fused_attention(tape, q, k, v, &eh, &ew, ph, pw, weights_out));
    } else {
      head_outputs.push_back(fused_attention(tape, q, k, v, nullptr, nullptr, ph, pw, weights_out));
    }
    if (maps != nullptr) maps->push_back(std::move(weights));
  }
  Var merged = head_outputs.size() == 1 ? head_outputs.front() : concat(tape, head_outputs, 2);
  Var projected = matmul(tape, merged, tape.parameter(output_));
  Var y = from_positions(tape, projected, ph, pw);
  if (factor > 1) y = upsample_nearest(tape, y, factor, height, width);
  return y;
}

Var MultiHeadSelfAttention::forward(Tape& tape, const Var& input) const {
  return run(tape, input, nullptr);
}

std::vector<Tensor> MultiHeadSelfAttention::attention_maps(const Tensor& input) const {
  Tape tape(false);
  std::vector<Tensor> maps;
  run(tape, tape.constant(input), &maps);
  return maps;
}

std::vector<Parameter*> MultiHeadSelfAttention::parameters() {
  std::vector<Parameter*> out;
  for (Head& h : heads_) {
    out.push_back(&h.query);
    out.push_back(&h.key);
    out.push_back(&h.value);
  }
  out.push_back(&output_);
  if (rel_height_) out.push_back(&*rel_height_);
  if (rel_width_) out.push_back(&*rel_width_);
  return out;
}

AugmentedConv::AugmentedConv(const std::string& prefix, const Options& options, Rng& rng)
    : options_(options) {
  if (options_.in_channels == 0 || options_.out_channels == 0) {
    throw std::invalid_argument("augmented conv: channel counts must be positive");
  }
  if (options_.kernel % 2 == 0) throw std::invalid_argument("augmented conv: kernel must be odd");
  const std::size_t d_out = options_.attention.output_dim;
  if (d_out >= options_.out_channels) {
    throw std::invalid_argument("augmented conv: attention channels (" + std::to_string(d_out) +
                                ") must leave room for the convolution branch (F_out " +
                                std::to_string(options_.out_channels) + ")");
  }
  const std::size_t conv_out = options_.out_channels - d_out;
  const std::size_t fan_in = options_.in_channels * options_.kernel * options_.kernel;
  conv_weight_ = Parameter(prefix + "/weight",
                           relu_uniform({conv_out, options_.in_channels, options_.kernel, options_.kernel},
                                        fan_in, rng));
  if (options_.conv_bias) conv_bias_.emplace(prefix + "/bias", Tensor({conv_out}, 0.0));
  if (d_out > 0) attention_.emplace(prefix + "/attn", options_.in_channels, options_.attention, rng);
}

Var AugmentedConv::forward(Tape& tape, const Var& input) const {
  std::optional<Var> bias;
  if (conv_bias_) bias = tape.parameter(*conv_bias_);
  Var conv = conv2d(tape, input, tape.parameter(conv_weight_), bias, 1, options_.kernel / 2);
  if (!attention_) return conv;
  Var attn = attention_->forward(tape, input);
  if (conv.dim(2) != attn.dim(2) || conv.dim(3) != attn.dim(3)) {
    throw ShapeError("augmented conv: branch outputs differ spatially: " + to_string(conv.shape()) +
                     " vs " + to_string(attn.shape()));
  }
  return concat_channels(tape, {conv, attn});
}

std::vector<Parameter*> AugmentedConv::parameters() {
  std::vector<Parameter*> out{&conv_weight_};
  if (conv_bias_) out.push_back(&*conv_bias_);
  if (attention_) {
    for (Parameter* p : attention_->parameters()) out.push_back(p);
  }
  return out;
}

}  // namespace sacn
