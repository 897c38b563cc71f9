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

#include <gtest/gtest.h>

#include <cmath>

#include "sacn/attention.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace sacn;
using sacn::testing::make_config;
using sacn::testing::naive_mhsa;
using sacn::testing::check_gradients;
using sacn::testing::max_abs_diff;
using sacn::testing::random_normal;

namespace {

Tensor run(const MultiHeadSelfAttention& m, const Tensor& x) {
  Tape tape(false);
  return m.forward(tape, tape.constant(x)).value();
}

}  // namespace

TEST(ScaledDotAttention, SinglePositionReturnsValue) {
  Rng rng(1);
  Tensor q = random_normal({2, 1, 3}, rng), k = random_normal({2, 1, 3}, rng), v = random_normal({2, 1, 4}, rng);
  Tape tape(false);
  Tensor w;
  Var out = scaled_dot_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), nullptr, &w);
  EXPECT_EQ(out.value(), v);
  EXPECT_EQ(w[0], 1.0);
}

TEST(ScaledDotAttention, EqualKeysAverageValues) {
  Rng rng(2);
  Tensor q = random_normal({1, 4, 2}, rng), v = random_normal({1, 4, 3}, rng);
  Tensor k({1, 4, 2});
  for (std::size_t p = 0; p < 4; ++p) {
    k.data()[p * 2] = 0.3;
    k.data()[p * 2 + 1] = -1.1;
  }
  Tape tape(false);
  Var out = scaled_dot_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 0; d < 3; ++d) {
      double mean = 0;
      for (std::size_t j = 0; j < 4; ++j) mean += v.data()[j * 3 + d] / 4;
      EXPECT_NEAR(out.value().data()[i * 3 + d], mean, 1e-14);
    }
}

TEST(ScaledDotAttention, MatchesLoopOracle) {
  Rng rng(3);
  Tensor q = random_normal({2, 3, 4}, rng), k = random_normal({2, 3, 4}, rng), v = random_normal({2, 3, 2}, rng);
  Tape tape(false);
  Var out = scaled_dot_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) {
      double e[3], z = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        double dot = 0;
        for (std::size_t d = 0; d < 4; ++d) dot += q.data()[(b * 3 + i) * 4 + d] * k.data()[(b * 3 + j) * 4 + d];
        z += (e[j] = std::exp(dot / 2.0));
      }
      for (std::size_t d = 0; d < 2; ++d) {
        double acc = 0;
        for (std::size_t j = 0; j < 3; ++j) acc += e[j] / z * v.data()[(b * 3 + j) * 2 + d];
        EXPECT_NEAR(out.value().data()[(b * 3 + i) * 2 + d], acc, 1e-12);
      }
    }
}

TEST(ScaledDotAttention, RejectsMismatchedDims) {
  Tape tape(false);
  EXPECT_THROW(scaled_dot_attention(tape, tape.constant(Tensor({1, 3, 4})), tape.constant(Tensor({1, 3, 5})),
                                    tape.constant(Tensor({1, 3, 2}))),
               ShapeError);
  EXPECT_THROW(scaled_dot_attention(tape, tape.constant(Tensor({1, 3, 4})), tape.constant(Tensor({1, 2, 4})),
                                    tape.constant(Tensor({1, 2, 2}))),
               ShapeError);
}

TEST(Mhsa, TwoHeadsMatchNaiveOracle) {
  for (bool rel : {false, true}) {
    Rng rng(10 + rel);
    MultiHeadSelfAttention m("attn", 5, make_config(2, 3, 2, 4, rel, 4, 4), rng);
    Tensor x = random_normal({2, 5, 4, 4}, rng);
    EXPECT_LT(max_abs_diff(run(m, x), naive_mhsa(m, x)), 1e-10) << "relative " << rel;
  }
}

TEST(Mhsa, SinglePixelIsLinearMap) {
  Rng rng(4);
  MultiHeadSelfAttention m("attn", 3, make_config(1, 2, 2, 3, false), rng);
  Tensor x = random_normal({1, 3, 1, 1}, rng);
  Tensor y = run(m, x);
  const Tensor& wv = m.heads()[0].value.value();
  const Tensor& wo = m.output().value();
  for (std::size_t o = 0; o < 3; ++o) {
    double acc = 0;
    for (std::size_t d = 0; d < 2; ++d) {
      double v = 0;
      for (std::size_t c = 0; c < 3; ++c) v += x[c] * wv.at(c, d);
      acc += v * wo.at(d, o);
    }
    EXPECT_NEAR(y[o], acc, 1e-14);
  }
}

TEST(Mhsa, AttentionRowsAreDistributions) {
  Rng rng(5);
  MultiHeadSelfAttention m("attn", 4, make_config(2, 2, 2, 4, true, 3, 5), rng);
  Tensor x = random_normal({2, 4, 3, 5}, rng, 3.0);
  for (const Tensor& w : m.attention_maps(x)) {
    const std::size_t P = 15;
    for (std::size_t r = 0; r < w.size() / P; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < P; ++j) {
        EXPECT_GE(w[r * P + j], 0.0);
        total += w[r * P + j];
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Mhsa, PermutationEquivariantWithoutRelativePositions) {
  Rng rng(6);
  MultiHeadSelfAttention m("attn", 3, make_config(2, 2, 3, 4, false), rng);
  const std::size_t H = 3, W = 4, P = H * W;
  Tensor x = random_normal({2, 3, H, W}, rng);
  std::vector<std::size_t> perm(P);
  for (std::size_t i = 0; i < P; ++i) perm[i] = i;
  rng.shuffle(perm);
  auto permute = [&](const Tensor& t) {
    Tensor out(t.shape());
    for (std::size_t b = 0; b < t.dim(0); ++b)
      for (std::size_t c = 0; c < t.dim(1); ++c)
        for (std::size_t p = 0; p < P; ++p)
          out.at(b, c, p / W, p % W) = t.at(b, c, perm[p] / W, perm[p] % W);
    return out;
  };
  EXPECT_LT(max_abs_diff(run(m, permute(x)), permute(run(m, x))), 1e-12);
}

TEST(Mhsa, ParameterCountMatchesFormula) {
  Rng rng(7);
  for (bool rel : {false, true}) {
    auto cfg = make_config(2, 3, 4, 5, rel, 6, 7);
    MultiHeadSelfAttention m("a", 9, cfg, rng);
    std::size_t n = 0;
    for (Parameter* p : m.parameters()) n += p->value().size();
    std::size_t expected = 2 * 9 * (2 * 3 + 4) + 2 * 4 * 5;
    if (rel) expected += (2 * 6 - 1) * 3 + (2 * 7 - 1) * 3;
    EXPECT_EQ(n, expected);
    EXPECT_EQ(cfg.parameter_count(9), expected);
  }
}

TEST(Mhsa, CapacityExceededThrows) {
  Rng rng(8);
  MultiHeadSelfAttention m("a", 2, make_config(1, 1, 1, 1, true, 2, 2), rng);
  EXPECT_THROW(run(m, Tensor({1, 2, 3, 2})), std::out_of_range);
  EXPECT_NO_THROW(run(m, Tensor({1, 2, 2, 1})));
}

TEST(Mhsa, LargeInputsAreDownsampled) {
  Rng rng(9);
  auto cfg = make_config(1, 2, 2, 2, false);
  cfg.position_cap = 16;
  MultiHeadSelfAttention m("a", 2, cfg, rng);
  EXPECT_EQ(m.pool_factor(8, 8), 2u);
  EXPECT_EQ(m.pool_factor(9, 9), 2u);
  EXPECT_EQ(m.pool_factor(10, 10), 3u);
  EXPECT_EQ(m.pool_factor(4, 4), 1u);
  Tensor x = random_normal({1, 2, 9, 9}, rng);
  Tensor y = run(m, x);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 9, 9}));
  // Nearest upsampling: 2x2 cells are constant and the trailing row and
  // column reuse the last pooled cell.
  EXPECT_EQ(y.at(0, 1, 0, 0), y.at(0, 1, 1, 1));
  EXPECT_EQ(y.at(0, 0, 6, 6), y.at(0, 0, 8, 8));
  EXPECT_NE(y.at(0, 0, 0, 0), y.at(0, 0, 2, 2));
}

TEST(RelativeLogits, ZeroEmbeddingsGiveZeroLogits) {
  Rng rng(11);
  Tape tape(false);
  Var out = relative_logits(tape, tape.constant(random_normal({2, 6, 3}, rng)), tape.constant(Tensor({5, 3})),
                            tape.constant(Tensor({3, 3})), 3, 2);
  for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(RelativeLogits, OneByTwoGridHandExpansion) {
  // max extents 1 x 2: rel_height has one row (offset 0), rel_width rows for
  // offsets -1, 0, +1. One-hot embeddings make each logit a single q entry.
  Tensor q({1, 2, 3}, std::vector<double>{0.5, -1.0, 2.0, 3.0, 0.25, -4.0});
  Tensor rh({1, 3});
  Tensor rw({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape tape(false);
  Var out = relative_logits(tape, tape.constant(q), tape.constant(rh), tape.constant(rw), 1, 2);
  // position 0 -> position 1 is offset (0, +1): e = rw[2] = (0, 0, 1).
  EXPECT_EQ(out.value().data()[1], 2.0);
  // position 1 -> position 0 is offset (0, -1): e = rw[0].
  EXPECT_EQ(out.value().data()[2], 3.0);
  // self offset (0, 0): e = rw[1].
  EXPECT_EQ(out.value().data()[0], -1.0);
  EXPECT_EQ(out.value().data()[3], 0.25);
}

TEST(RelativeLogits, DependOnlyOnOffsetAndQuery) {
  // With identical queries at every position, logits from i to j must equal
  // logits from i + s to j + s for any shift s keeping both inside the grid.
  Rng rng(12);
  const std::size_t H = 4, W = 5, D = 3;
  Tensor row = random_normal({D}, rng);
  Tensor q({1, H * W, D});
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t d = 0; d < D; ++d) q.data()[p * D + d] = row[d];
  Tape tape(false);
  Var out = relative_logits(tape, tape.constant(q), tape.constant(random_normal({2 * H - 1, D}, rng)),
                            tape.constant(random_normal({2 * W - 1, D}, rng)), H, W);
  const auto& v = out.value();
  auto at = [&](std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
    return v.data()[(r1 * W + c1) * H * W + r2 * W + c2];
  };
  for (std::size_t r1 = 0; r1 + 1 < H; ++r1)
    for (std::size_t c1 = 0; c1 + 1 < W; ++c1)
      for (std::size_t r2 = 0; r2 + 1 < H; ++r2)
        for (std::size_t c2 = 0; c2 + 1 < W; ++c2) EXPECT_EQ(at(r1, c1, r2, c2), at(r1 + 1, c1 + 1, r2 + 1, c2 + 1));
}

TEST(RelativeLogits, ExceedingCapacityThrows) {
  Tape tape(false);
  EXPECT_THROW(relative_logits(tape, tape.constant(Tensor({1, 9, 2})), tape.constant(Tensor({3, 2})),
                               tape.constant(Tensor({5, 2})), 3, 3),
               std::out_of_range);
}

TEST(AugmentedConv, ZeroAttentionIsPlainConvolution) {
  Rng rng(13);
  AugmentedConv::Options opt{4, 6, 3, true, AttentionConfig{.output_dim = 0}};
  AugmentedConv a("c", opt, rng);
  EXPECT_FALSE(a.attention().has_value());
  Tensor x = random_normal({2, 4, 5, 5}, rng);
  Tape tape(false);
  Var y = a.forward(tape, tape.constant(x));
  Var ref = conv2d(tape, tape.constant(x), tape.constant(a.conv_weight().value()),
                   tape.constant(a.conv_bias()->value()), 1, 1);
  EXPECT_EQ(y.value(), ref.value());
}

TEST(AugmentedConv, ChannelLayoutAndZeroedConvBranch) {
  Rng rng(14);
  AugmentedConv::Options opt{3, 8, 3, true, make_config(2, 1, 1, 2, true, 4, 4)};
  AugmentedConv a("c", opt, rng);
  a.conv_weight().value().fill(0.0);
  for (std::size_t i = 0; i < 6; ++i) a.conv_bias()->value()[i] = 0.5 * static_cast<double>(i) - 1.0;
  Tensor x = random_normal({2, 3, 4, 4}, rng);
  Tape tape(false);
  Tensor y = a.forward(tape, tape.constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{2, 8, 4, 4}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(y.at(b, c, p / 4, p % 4), 0.5 * static_cast<double>(c) - 1.0);
  Tensor attn = run(*a.attention(), x);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(y.at(b, 6 + c, p / 4, p % 4), attn.at(b, c, p / 4, p % 4));
}

TEST(AugmentedConv, RejectsAttentionWiderThanOutput) {
  Rng rng(15);
  AugmentedConv::Options opt{3, 2, 3, false, make_config(1, 1, 1, 2, false)};
  EXPECT_THROW(AugmentedConv("c", opt, rng), std::invalid_argument);
}

class AttentionGradients : public ::testing::TestWithParam<int> {};

// Gradients with respect to the input and every weight of both branches.
TEST_P(AttentionGradients, AugmentedConvBothBranches) {
  Rng rng(100 + GetParam());
  AugmentedConv::Options opt{3, 5, 3, true, make_config(2, 2, 1, 2, true, 3, 3)};
  AugmentedConv a("c", opt, rng);
  auto params = a.parameters();
  std::vector<Tensor> inputs{random_normal({2, 3, 3, 3}, rng)};
  for (Parameter* p : params) inputs.push_back(p->value());
  // The layer re-expressed with explicit leaves so the checker can perturb
  // the weights directly.
  const auto& cfg = a.attention()->config();
  auto explicit_build = [&](Tape& t, const std::vector<Var>& v) {
    Var conv = conv2d(t, v[0], v[1], v[2], 1, 1);
    Var x = to_positions(t, v[0]);
    std::vector<Var> heads;
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      Var q = matmul(t, x, v[3 + 3 * h]);
      Var k = matmul(t, x, v[4 + 3 * h]);
      Var val = matmul(t, x, v[5 + 3 * h]);
      const std::size_t o = 3 + 3 * cfg.num_heads;
      Var rel = relative_logits(t, q, v[o + 1], v[o + 2], 3, 3);
      heads.push_back(scaled_dot_attention(t, q, k, val, &rel));
    }
    Var merged = concat(t, heads, 2);
    Var y = from_positions(t, matmul(t, merged, v[3 + 3 * cfg.num_heads]), 3, 3);
    return concat_channels(t, {conv, y});
  };
  // The explicit composition must agree with the layer itself.
  {
    Tape t(false);
    std::vector<Var> v;
    for (const auto& in : inputs) v.push_back(t.constant(in));
    Tape t2(false);
    // The layer runs the fused kernel, so agreement is to roundoff.
    EXPECT_LT(max_abs_diff(explicit_build(t, v).value(), a.forward(t2, t2.constant(inputs[0])).value()), 1e-12);
  }
  auto r = check_gradients(explicit_build, inputs, GetParam());
  EXPECT_LT(r.max_rel, 1e-4);
  // Parameter gradients accumulated by the layer's own forward match too.
  Tape tape;
  Var out = a.forward(tape, tape.variable(inputs[0]));
  Rng wr(GetParam() ^ 0x5eedULL);
  tape.backward(out, random_normal(out.shape(), wr));
  Tape t3;
  std::vector<Var> leaves;
  for (const auto& in : inputs) leaves.push_back(t3.variable(in));
  Var out3 = explicit_build(t3, leaves);
  Rng wr3(GetParam() ^ 0x5eedULL);
  t3.backward(out3, random_normal(out3.shape(), wr3));
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_LT(max_abs_diff(params[i]->grad(), leaves[i + 1].grad()), 1e-12) << params[i]->name();
  }
}

TEST_P(AttentionGradients, RelativeLogits) {
  Rng rng(200 + GetParam());
  auto r = check_gradients(
      [](Tape& t, const std::vector<Var>& v) { return relative_logits(t, v[0], v[1], v[2], 2, 3); },
      {random_normal({2, 6, 2}, rng), random_normal({5, 2}, rng), random_normal({5, 2}, rng)}, GetParam());
  EXPECT_LT(r.max_rel, 1e-6);
}

TEST_P(AttentionGradients, ScaledDot) {
  Rng rng(300 + GetParam());
  auto r = check_gradients(
      [](Tape& t, const std::vector<Var>& v) { return scaled_dot_attention(t, v[0], v[1], v[2], &v[3]); },
      {random_normal({2, 4, 3}, rng), random_normal({2, 4, 3}, rng), random_normal({2, 4, 2}, rng),
       random_normal({2, 4, 4}, rng)},
      GetParam());
  EXPECT_LT(r.max_rel, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, AttentionGradients, ::testing::Range(1, 11));

// The fused kernel against the composition it replaces: values, gradients
// for every operand, and finite differences.
TEST_P(AttentionGradients, FusedMatchesComposition) {
  Rng rng(300 + GetParam());
  const std::size_t h = 3, w = 4, dk = 2, dv = 3;
  for (bool relative : {true, false}) {
    std::vector<Tensor> inputs{random_normal({2, h * w, dk}, rng), random_normal({2, h * w, dk}, rng),
                               random_normal({2, h * w, dv}, rng), random_normal({2 * 5 - 1, dk}, rng),
                               random_normal({2 * 6 - 1, dk}, rng)};
    auto composed = [&](Tape& t, const std::vector<Var>& v) {
      if (!relative) return scaled_dot_attention(t, v[0], v[1], v[2]);
      Var rel = relative_logits(t, v[0], v[3], v[4], h, w);
      return scaled_dot_attention(t, v[0], v[1], v[2], &rel);
    };
    auto fused = [&](Tape& t, const std::vector<Var>& v) {
      return relative ? fused_attention(t, v[0], v[1], v[2], &v[3], &v[4], h, w)
                      : fused_attention(t, v[0], v[1], v[2], nullptr, nullptr, h, w);
    };
    Tape ta, tb;
    std::vector<Var> la, lb;
    for (const auto& in : inputs) {
      la.push_back(ta.variable(in));
      lb.push_back(tb.variable(in));
    }
    Var ya = composed(ta, la);
    Var yb = fused(tb, lb);
    EXPECT_LT(max_abs_diff(ya.value(), yb.value()), 1e-12);
    Rng s1(GetParam()), s2(GetParam());
    ta.backward(ya, random_normal(ya.shape(), s1));
    tb.backward(yb, random_normal(yb.shape(), s2));
    const std::size_t used = relative ? 5 : 3;
    for (std::size_t i = 0; i < used; ++i) EXPECT_LT(max_abs_diff(la[i].grad(), lb[i].grad()), 1e-12) << i;
    std::vector<Tensor> fd_inputs(inputs.begin(), inputs.begin() + static_cast<long>(used));
    auto r = check_gradients(fused, fd_inputs, GetParam());
    EXPECT_LT(r.max_rel, 1e-6) << (relative ? "relative" : "plain");
  }
}

TEST(FusedAttention, WeightsMatchSoftmaxRows) {
  Rng rng(5);
  Tape t(false);
  Var q = t.constant(random_normal({1, 6, 2}, rng)), k = t.constant(random_normal({1, 6, 2}, rng)),
      v = t.constant(random_normal({1, 6, 2}, rng));
  Tensor weights, ref;
  fused_attention(t, q, k, v, nullptr, nullptr, 2, 3, &weights);
  scaled_dot_attention(t, q, k, v, nullptr, &ref);
  EXPECT_LT(max_abs_diff(weights, ref), 1e-15);
  EXPECT_THROW(fused_attention(t, q, k, v, &q, nullptr, 2, 3), std::invalid_argument);
}
