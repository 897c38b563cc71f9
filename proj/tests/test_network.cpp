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
#include <filesystem>
#include <map>

#include "sacn/network.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace sacn;
using sacn::testing::closed_form_count;
using sacn::testing::random_normal;
using sacn::testing::rel_error;

namespace {

Tensor tagged_input(std::size_t b, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({b, c, h, w});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < h * w; ++i) t.at(n, k, i / w, i % w) = 10.0 * (k + 1) + 0.01 * rng.normal();
  return t;
}

}  // namespace

TEST(NetworkConfig, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    NetworkConfig c = NetworkConfig::desk();
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](NetworkConfig& c) { c.block_layout.clear(); }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NetworkConfig& c) { c.growth_rate = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NetworkConfig& c) { c.compression = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NetworkConfig& c) { c.compression = 1.5; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NetworkConfig& c) { c.attention.placement = "9.1"; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NetworkConfig& c) { c.attention.placement = "bogus"; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NetworkConfig& c) { c.input_height = c.input_width = 4; }).validate(), std::invalid_argument);
  EXPECT_NO_THROW(bad([](NetworkConfig& c) { c.compression = 1.0; }).validate());
}

TEST(NetworkConfig, JsonRoundTrip) {
  NetworkConfig c = NetworkConfig::full();
  c.attention.channels = 6;
  c.attention.placement = "1.1,2.3";
  EXPECT_EQ(NetworkConfig::from_json(c.to_json()), c);
  EXPECT_EQ(NetworkConfig::from_json(NetworkConfig::desk().to_json()), NetworkConfig::desk());
}

TEST(NetworkConfig, PlacementParsing) {
  NetworkConfig c = NetworkConfig::desk();
  EXPECT_EQ(c.attention_layers().size(), 4u);
  c.attention.placement = "all";
  EXPECT_EQ(c.attention_layers().size(), 8u);
  c.attention.placement = "none";
  EXPECT_TRUE(c.attention_layers().empty());
  c.attention.placement = "1.2, 4.1";
  auto s = c.attention_layers();
  EXPECT_TRUE(s.count({0, 1}) && s.count({3, 0}));
}

TEST(Network, DenseBlockChannelBookkeeping) {
  NetworkConfig c = NetworkConfig::desk();
  c.block_layout = {4, 3};
  Network net = Network::build(c, 1);
  EXPECT_EQ(net.blocks()[0].in_channels, 16u);
  EXPECT_EQ(net.blocks()[0].out_channels(), 48u);  // 16 + 4 * 8
  EXPECT_EQ(net.transitions()[0].out_channels, 24u);
  EXPECT_EQ(net.blocks()[1].in_channels, 24u);
  EXPECT_EQ(net.blocks()[1].out_channels(), 48u);
  for (const auto& block : net.blocks())
    for (const auto& layer : block.layers) EXPECT_EQ(layer.conv2.out_channels(), c.growth_rate);
}

TEST(Network, ParameterCountsMatchClosedForm) {
  for (bool attention : {false, true})
    for (bool relative : {false, true}) {
      NetworkConfig desk = NetworkConfig::desk();
      desk.attention.placement = attention ? "first" : "none";
      desk.attention.relative_positions = relative;
      Network n = Network::build(desk, 3);
      EXPECT_EQ(n.parameter_count(),
                closed_form_count({{2, 2, 2, 2}, 8, 3, 16, 14, 32, 1, false, attention, 2, relative}));
    }
  NetworkConfig full = NetworkConfig::full();
  Network f = Network::build(full, 3);
  EXPECT_EQ(f.parameter_count(), closed_form_count({{6, 12, 24, 16}, 32, 7, 64, 14, 224, 2, true, true, 2, true}));
}

TEST(Network, PlainFullProfileMatchesReferenceDenseNet121) {
  NetworkConfig full = NetworkConfig::full();
  full.attention.placement = "none";
  full.num_classes = 1000;
  // Published parameter count of the reference 121-layer model with a
  // 1000-way classifier.
  EXPECT_EQ(Network::build(full, 0).parameter_count(), 7978856u);
}

TEST(Network, RegistryReachesEachParameterOnce) {
  Network net = Network::build(NetworkConfig::desk(), 5);
  std::map<std::string, int> names;
  std::map<const Node*, int> nodes;
  for (Parameter* p : net.parameters()) {
    names[p->name()]++;
    nodes[p->node().get()]++;
  }
  for (const auto& [n, k] : names) EXPECT_EQ(k, 1) << n;
  for (const auto& [n, k] : nodes) EXPECT_EQ(k, 1);
  EXPECT_NE(net.find_parameter("block1/layer1/conv2/attn/head0/query"), nullptr);
  EXPECT_NE(net.find_parameter("classifier/bias"), nullptr);
  EXPECT_EQ(net.find_parameter("block1/layer2/conv2/attn/output"), nullptr);
}

TEST(Network, ZeroAttentionChannelsMatchPlainNames) {
  NetworkConfig aug = NetworkConfig::desk();
  aug.attention.channels = 0;
  NetworkConfig plain = NetworkConfig::desk();
  plain.attention.placement = "none";
  Network a = Network::build(aug, 9), p = Network::build(plain, 9);
  ASSERT_EQ(a.parameters().size(), p.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i]->name(), p.parameters()[i]->name());
    EXPECT_EQ(a.parameters()[i]->value().shape(), p.parameters()[i]->value().shape());
  }
  Tensor x = tagged_input(2, 3, 32, 32, 1);
  EXPECT_EQ(a.logits(x, Mode::train), p.logits(x, Mode::train));
}

TEST(Network, DenseConnectivityProbe) {
  NetworkConfig c = NetworkConfig::desk();
  c.block_layout = {3};
  c.input_height = c.input_width = 8;
  Network net = Network::build(c, 2);
  auto& block = net.blocks()[0];
  Tensor x = tagged_input(2, block.in_channels, 8, 8, 4);
  Tape tape(false);
  DenseBlock::Trace trace;
  Var out = block.forward(tape, tape.constant(x), Mode::train, &trace);
  ASSERT_EQ(trace.layer_inputs.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor& in = trace.layer_inputs[l];
    ASSERT_EQ(in.dim(1), block.in_channels + l * c.growth_rate);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t ch = 0; ch < in.dim(1); ++ch)
        for (std::size_t i = 0; i < 64; ++i) {
          double expected;
          if (ch < block.in_channels) {
            expected = x.at(n, ch, i / 8, i % 8);
          } else {
            const std::size_t k = (ch - block.in_channels) / c.growth_rate;
            expected = trace.layer_outputs[k].at(n, (ch - block.in_channels) % c.growth_rate, i / 8, i % 8);
          }
          ASSERT_EQ(in.at(n, ch, i / 8, i % 8), expected);
        }
  }
  EXPECT_EQ(out.dim(1), block.out_channels());
}

TEST(Network, ForwardShapesAndErrors) {
  Network net = Network::build(NetworkConfig::desk(), 7);
  Tensor x = tagged_input(3, 3, 32, 32, 2);
  Tensor z = net.logits(x, Mode::train);
  EXPECT_EQ(z.shape(), (Shape{3, 14}));
  EXPECT_TRUE(z.all_finite());
  EXPECT_THROW(net.logits(Tensor({1, 3, 16, 16})), ShapeError);
  EXPECT_THROW(net.logits(Tensor({1, 1, 32, 32})), ShapeError);
}

TEST(Network, EvalModeIsPureAndBatchIndependent) {
  Network net = Network::build(NetworkConfig::desk(), 8);
  Tensor single = tagged_input(1, 3, 32, 32, 3);
  Tensor pair({2, 3, 32, 32});
  for (std::size_t i = 0; i < single.size(); ++i) pair[i] = pair[i + single.size()] = single[i];
  Tensor z = net.logits(pair, Mode::eval);
  for (std::size_t k = 0; k < 14; ++k) EXPECT_EQ(z.at(0, k), z.at(1, k));
  EXPECT_EQ(net.logits(pair, Mode::eval), z);
}

TEST(Network, BuildIsDeterministicInSeed) {
  Tensor zeros({1, 3, 32, 32});
  Network a = Network::build(NetworkConfig::desk(), 42), b = Network::build(NetworkConfig::desk(), 42);
  EXPECT_EQ(a.logits(zeros), b.logits(zeros));
  Network c = Network::build(NetworkConfig::desk(), 43);
  EXPECT_NE(a.parameters()[0]->value(), c.parameters()[0]->value());
}

TEST(Network, ProbabilitiesAreSigmoidOfLogits) {
  Network net = Network::build(NetworkConfig::desk(), 9);
  Tensor x = tagged_input(2, 3, 32, 32, 5);
  Tensor z = net.logits(x, Mode::eval);
  Tensor p = net.predict_probabilities(x);
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_EQ(p[i], stable_sigmoid(z[i]));
    EXPECT_GT(p[i], 0.0);
    EXPECT_LT(p[i], 1.0);
  }
  // Zero classifier weights and bias give all-zero logits, hence 0.5.
  net.find_parameter("classifier/weight")->value().fill(0.0);
  net.find_parameter("classifier/bias")->value().fill(0.0);
  const Tensor half = net.predict_probabilities(x);
  for (double v : half.data()) EXPECT_EQ(v, 0.5);
}

TEST(Network, ExportImportRoundTripIsBitExact) {
  Network src = Network::build(NetworkConfig::desk(), 10);
  Tensor x = tagged_input(2, 3, 32, 32, 6);
  src.logits(x, Mode::train);  // move running statistics off their defaults
  const auto path = std::filesystem::temp_directory_path() / "sacn_network_roundtrip.sack";
  save_archive(path, src.export_weights());
  Network dst = Network::build(NetworkConfig::desk(), 11);
  ImportReport r = dst.import_pretrained(path, true);
  EXPECT_TRUE(r.skipped.empty());
  EXPECT_EQ(r.loaded.size(), src.parameters().size() + src.buffers().size());
  EXPECT_EQ(src.logits(x, Mode::eval), dst.logits(x, Mode::eval));
  std::filesystem::remove(path);
}

TEST(Network, ImportAcrossGrowthRatesReportsSkips) {
  Network src = Network::build(NetworkConfig::desk(), 12);
  NetworkConfig other = NetworkConfig::desk();
  other.growth_rate = 12;
  Network dst = Network::build(other, 12);
  const Tensor before = dst.find_parameter("block1/layer1/conv1/weight")->value();
  ImportReport r = dst.import_weights(src.export_weights(), false);
  EXPECT_FALSE(r.skipped.empty());
  EXPECT_FALSE(r.loaded.empty());  // the stem is shared
  EXPECT_EQ(dst.find_parameter("stem/conv/weight")->value(), src.find_parameter("stem/conv/weight")->value());
  EXPECT_EQ(dst.find_parameter("block1/layer1/conv1/weight")->value(), before);
  EXPECT_THROW(dst.import_weights(src.export_weights(), true), std::runtime_error);
  EXPECT_THROW(dst.import_pretrained("/nonexistent/weights.sack", false), std::runtime_error);
}

TEST(Network, MoveKeepsRegistryValid) {
  Network a = Network::build(NetworkConfig::desk(), 13);
  Parameter* p = a.parameters()[3];
  Network b = std::move(a);
  EXPECT_EQ(b.parameters()[3], p);
  EXPECT_EQ(b.find_parameter(p->name()), p);
}

// Coordinates whose +-eps stencil flips a ReLU sign are redrawn: the loss is
// not differentiable across such a stencil.
TEST(Network, EndToEndGradientsOnSampledParameters) {
  NetworkConfig c = NetworkConfig::desk();
  c.input_height = c.input_width = 16;
  Network net = Network::build(c, 14);
  Rng rng(14);
  Tensor x = random_normal({2, 3, 16, 16}, rng);
  Tensor w = random_normal({2, 14}, rng);
  auto loss = [&](Tape& tape) {
    return sum(tape, mul(tape, net.forward(tape, tape.constant(x), Mode::train), tape.constant(w)));
  };
  KinkMonitor monitor;
  net.zero_grad();
  Tape tape;
  tape.backward(loss(tape));
  const auto centre = monitor.fingerprint();
  double worst = 0;
  int checked = 0, redrawn = 0;
  while (checked < 20) {
    ASSERT_LT(redrawn, 200);
    Parameter* p = net.parameters()[rng.below(net.parameters().size())];
    const std::size_t i = rng.below(p->value().size());
    const double orig = p->value()[i];
    std::uint64_t prints[2];
    auto eval = [&](double v, std::uint64_t& fp) {
      p->value()[i] = v;
      monitor.reset();
      Tape t(false);
      const double l = loss(t).value()[0];
      fp = monitor.fingerprint();
      return l;
    };
    const double numeric = (eval(orig + 1e-5, prints[0]) - eval(orig - 1e-5, prints[1])) / 2e-5;
    p->value()[i] = orig;
    if (prints[0] != centre || prints[1] != centre) {
      ++redrawn;
      continue;
    }
    worst = std::max(worst, rel_error(p->grad()[i], numeric));
    ++checked;
  }
  EXPECT_LT(worst, 1e-3);
}
