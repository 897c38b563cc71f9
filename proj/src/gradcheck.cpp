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

#include "sacn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "sacn/attention.hpp"
#include "sacn/network.hpp"
#include "sacn/ops.hpp"
#include "sacn/random.hpp"
#include "sacn/training.hpp"

namespace sacn {

namespace {

constexpr double kEps = 1e-5;
constexpr double kSmooth = 1e-6;
constexpr double kGeneral = 1e-4;

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double relative(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

Tensor normal(const Shape& shape, Rng& rng, double s = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = s * rng.normal();
  return t;
}

// Magnitudes in [0.1, 1) keep ReLU inputs clear of the kink.
Tensor signed_away(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) v = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1.0);
  return t;
}

// A shuffled ramp: max pooling sees one winner per window with margin.
Tensor ramp(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i);
  rng.shuffle(v);
  std::copy(v.begin(), v.end(), t.raw());
  return t;
}

GradCheckResult check(const std::string& name, double threshold, const Builder& build, std::vector<Tensor> inputs,
                      Rng& rng) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.variable(t));
  Var out = build(tape, leaves);
  const Tensor r = normal(out.shape(), rng);
  tape.backward(out, r);

  GradCheckResult result{name, 0.0, threshold, 0};
  auto eval = [&] {
    Tape t(false);
    std::vector<Var> v;
    for (const Tensor& x : inputs) v.push_back(t.constant(x));
    return build(t, v).value();
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& analytic = leaves[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + kEps;
      const Tensor up = eval();
      inputs[k][i] = orig - kEps;
      const Tensor down = eval();
      inputs[k][i] = orig;
      double numeric = 0.0;
      for (std::size_t j = 0; j < up.size(); ++j) numeric += r[j] * (up[j] - down[j]);
      numeric /= 2 * kEps;
      result.max_rel = std::max(result.max_rel, relative(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

void op_checks(std::uint64_t seed, std::vector<GradCheckResult>& out) {
  Rng rng(derive_seed(seed, 0x6c0b, 0));
  auto run = [&](const std::string& name, double threshold, const Builder& b, std::vector<Tensor> in) {
    out.push_back(check(name, threshold, b, std::move(in), rng));
  };
  run("matmul", kSmooth, [](Tape& t, const std::vector<Var>& v) { return matmul(t, v[0], v[1]); },
      {normal({2, 3, 4}, rng), normal({4, 5}, rng)});
  run("transpose", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return matmul(t, v[0], transpose_last(t, v[1])); },
      {normal({2, 3, 4}, rng), normal({2, 5, 4}, rng)});
  run("add", kSmooth, [](Tape& t, const std::vector<Var>& v) { return add(t, v[0], v[1]); },
      {normal({2, 3, 2}, rng), normal({2, 3, 2}, rng)});
  run("mul", kSmooth, [](Tape& t, const std::vector<Var>& v) { return mul(t, v[0], v[1]); },
      {normal({2, 3, 2}, rng), normal({2, 3, 2}, rng)});
  run("scale", kSmooth, [](Tape& t, const std::vector<Var>& v) { return scale(t, v[0], -1.7); },
      {normal({2, 5}, rng)});
  run("sum", kSmooth, [](Tape& t, const std::vector<Var>& v) { return sum(t, mul(t, v[0], v[0])); },
      {normal({3, 3}, rng)});
  run("sigmoid", kSmooth, [](Tape& t, const std::vector<Var>& v) { return sigmoid(t, v[0]); },
      {normal({2, 7}, rng, 2.0)});
  run("softmax", kSmooth, [](Tape& t, const std::vector<Var>& v) { return softmax(t, v[0], 2); },
      {normal({2, 3, 5}, rng)});
  run("relu", kGeneral, [](Tape& t, const std::vector<Var>& v) { return relu(t, v[0]); },
      {signed_away({2, 3, 4}, rng)});
  run("concat", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return concat_channels(t, {v[0], v[1]}); },
      {normal({2, 2, 3, 3}, rng), normal({2, 3, 3, 3}, rng)});
  run("reshape", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return linear(t, reshape(t, v[0], {2, 6}), v[1], v[2]); },
      {normal({2, 3, 2}, rng), normal({6, 4}, rng), normal({4}, rng)});
  run("positions", kSmooth,
      [](Tape& t, const std::vector<Var>& v) {
        return from_positions(t, mul(t, to_positions(t, v[0]), to_positions(t, v[0])), 3, 2);
      },
      {normal({2, 4, 3, 2}, rng)});
  run("conv2d", kGeneral,
      [](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], v[2], 1, 1); },
      {normal({2, 3, 5, 5}, rng), normal({4, 3, 3, 3}, rng), normal({4}, rng)});
  run("conv2d_strided", kGeneral,
      [](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], std::nullopt, 2, 3); },
      {normal({1, 2, 9, 9}, rng), normal({3, 2, 7, 7}, rng)});
  run("avgpool", kSmooth, [](Tape& t, const std::vector<Var>& v) { return avgpool2d(t, v[0], 2, 2); },
      {normal({2, 3, 5, 4}, rng)});
  run("global_avgpool", kSmooth, [](Tape& t, const std::vector<Var>& v) { return global_avgpool(t, v[0]); },
      {normal({2, 3, 3, 4}, rng)});
  run("maxpool", kGeneral, [](Tape& t, const std::vector<Var>& v) { return maxpool2d(t, v[0], 3, 2, 1); },
      {ramp({2, 2, 6, 5}, rng)});
  run("upsample", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return upsample_nearest(t, v[0], 2, 5, 4); },
      {normal({1, 2, 2, 2}, rng)});
  run("batchnorm_train", kGeneral,
      [](Tape& t, const std::vector<Var>& v) {
        BatchNormState s(3);
        return batchnorm2d(t, v[0], v[1], v[2], s, Mode::train);
      },
      {normal({3, 3, 2, 2}, rng), normal({3}, rng), normal({3}, rng)});
  BatchNormState fixed(3);
  fixed.running_mean = normal({3}, rng);
  fixed.running_var = Tensor({3}, {0.7, 1.3, 2.0});
  run("batchnorm_eval", kSmooth,
      [&fixed](Tape& t, const std::vector<Var>& v) { return batchnorm2d(t, v[0], v[1], v[2], fixed, Mode::eval); },
      {normal({2, 3, 2, 2}, rng), normal({3}, rng), normal({3}, rng)});
  run("attention", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return scaled_dot_attention(t, v[0], v[1], v[2]); },
      {normal({2, 6, 3}, rng), normal({2, 6, 3}, rng), normal({2, 6, 2}, rng)});
  run("relative_logits", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return relative_logits(t, v[0], v[1], v[2], 2, 3); },
      {normal({2, 6, 3}, rng), normal({3, 3}, rng), normal({5, 3}, rng)});
  run("fused_attention", kSmooth,
      [](Tape& t, const std::vector<Var>& v) { return fused_attention(t, v[0], v[1], v[2], &v[3], &v[4], 2, 3); },
      {normal({2, 6, 3}, rng), normal({2, 6, 3}, rng), normal({2, 6, 2}, rng), normal({3, 3}, rng),
       normal({5, 3}, rng)});
  Tensor targets({2, 5});
  for (double& y : targets.data()) y = rng.bernoulli(0.5) ? 1.0 : 0.0;
  run("bce_with_logits", kSmooth,
      [&targets](Tape& t, const std::vector<Var>& v) { return bce_with_logits(t, v[0], targets); },
      {normal({2, 5}, rng, 2.0)});
}

GradCheckResult network_check(std::uint64_t seed) {
  NetworkConfig config = NetworkConfig::desk();
  config.input_height = config.input_width = 16;
  Network net = Network::build(config, seed);
  Rng rng(derive_seed(seed, 0x6c0b, 1));
  // Unit scale and zero shift make the scale of a batch norm that feeds only
  // other batch norms nearly gradient-free, which leaves its difference
  // quotient at the roundoff floor. Probe at a generic point instead.
  for (Parameter* p : net.parameters()) {
    if (p->name().ends_with("/gamma")) for (double& v : p->value().data()) v = rng.uniform(0.5, 1.5);
    if (p->name().ends_with("/beta")) for (double& v : p->value().data()) v = 0.5 * rng.normal();
  }
  const Tensor x = normal({2, 3, 16, 16}, rng);
  const Tensor r = normal({2, config.num_classes}, rng);
  auto loss = [&](Tape& tape) {
    return sum(tape, mul(tape, net.forward(tape, tape.constant(x), Mode::train), tape.constant(r)));
  };
  KinkMonitor monitor;
  net.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  const std::uint64_t centre = monitor.fingerprint();
  auto probe = [&]() {
    monitor.reset();
    Tape tape(false);
    const double value = loss(tape).value()[0];
    return std::pair{value, monitor.fingerprint()};
  };

  GradCheckResult result{"network", 0.0, kGeneral, 0};
  for (Parameter* p : net.parameters()) {
    const Tensor original = p->value();
    bool done = false;
    for (int attempt = 0; attempt < 20 && !done; ++attempt) {
      Tensor d = normal(original.shape(), rng);
      double norm = 0.0;
      for (double v : d.data()) norm += v * v;
      norm = std::sqrt(norm);
      double analytic = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] /= norm;
        analytic += p->grad()[i] * d[i];
      }
      for (std::size_t i = 0; i < d.size(); ++i) p->value()[i] = original[i] + kEps * d[i];
      const auto up = probe();
      for (std::size_t i = 0; i < d.size(); ++i) p->value()[i] = original[i] - kEps * d[i];
      const auto down = probe();
      p->value() = original;
      if (up.second != centre || down.second != centre) continue;
      result.max_rel = std::max(result.max_rel, relative(analytic, (up.first - down.first) / (2 * kEps)));
      ++result.checked;
      done = true;
    }
  }
  if (result.checked == 0) throw std::runtime_error("gradcheck: every network probe crossed a kink");
  return result;
}

}  // namespace

GradCheckScope parse_gradcheck_scope(std::string_view name) {
  if (name == "ops") return GradCheckScope::ops;
  if (name == "network") return GradCheckScope::network;
  if (name == "all") return GradCheckScope::all;
  throw std::invalid_argument("unknown gradcheck scope '" + std::string(name) + "' (expected ops, network or all)");
}

std::vector<GradCheckResult> run_gradcheck(GradCheckScope scope, std::uint64_t seed, std::size_t seeds) {
  std::vector<GradCheckResult> merged;
  for (std::size_t s = 0; s < seeds; ++s) {
    std::vector<GradCheckResult> round;
    if (scope != GradCheckScope::network) op_checks(seed + s, round);
    if (scope != GradCheckScope::ops) round.push_back(network_check(seed + s));
    if (merged.empty()) {
      merged = std::move(round);
      continue;
    }
    for (std::size_t i = 0; i < round.size(); ++i) {
      merged[i].max_rel = std::max(merged[i].max_rel, round[i].max_rel);
      merged[i].checked += round[i].checked;
    }
  }
  return merged;
}

}  // namespace sacn
