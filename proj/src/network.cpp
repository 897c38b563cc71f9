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

#include "sacn/network.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "sacn/init.hpp"
#include "sacn/random.hpp"

namespace sacn {

namespace {

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

std::string layer_prefix(std::size_t b, std::size_t l) {
  return "block" + std::to_string(b + 1) + "/layer" + std::to_string(l + 1);
}

Tensor conv_init(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  return relu_uniform({out, in, k, k}, in * k * k, rng);
}

}  // namespace

NetworkConfig NetworkConfig::desk() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::full() {
  NetworkConfig c;
  c.input_height = c.input_width = 224;
  c.stem = Stem{7, 2, 64, true};
  c.block_layout = {6, 12, 24, 16};
  c.growth_rate = 32;
  return c;
}

std::size_t attention_pool_factor(std::size_t height, std::size_t width, std::size_t cap) {
  if (cap == 0) throw std::invalid_argument("attention position cap must be >= 1");
  std::size_t f = 1;
  while ((height / f) * (width / f) > cap) ++f;
  return f;
}

std::set<std::pair<std::size_t, std::size_t>> NetworkConfig::attention_layers() const {
  std::set<std::pair<std::size_t, std::size_t>> out;
  const std::string& p = attention.placement;
  if (p == "none" || p.empty()) return out;
  if (p == "first" || p == "all") {
    for (std::size_t b = 0; b < block_layout.size(); ++b) {
      const std::size_t n = p == "first" ? std::min<std::size_t>(1, block_layout[b]) : block_layout[b];
      for (std::size_t l = 0; l < n; ++l) out.emplace(b, l);
    }
    return out;
  }
  std::stringstream ss(p);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    const auto dot = item.find('.');
    if (dot == std::string::npos) throw std::invalid_argument("bad attention placement entry '" + item + "'");
    std::size_t b = 0, l = 0;
    try {
      b = std::stoul(item.substr(0, dot));
      l = std::stoul(item.substr(dot + 1));
    } catch (const std::exception&) {
      throw std::invalid_argument("bad attention placement entry '" + item + "'");
    }
    if (b == 0 || l == 0 || b > block_layout.size() || l > block_layout[b - 1]) {
      throw std::invalid_argument("attention placement " + item + " is outside the block layout");
    }
    out.emplace(b - 1, l - 1);
  }
  return out;
}

AttentionConfig NetworkConfig::attention_config(std::size_t height, std::size_t width) const {
  AttentionConfig cfg;
  if (attention.channels) {
    cfg.output_dim = *attention.channels;
    cfg.num_heads = attention.heads;
    const std::size_t per_head = attention.heads ? cfg.output_dim / attention.heads : 0;
    cfg.key_dim = std::max<std::size_t>(1, per_head);
    cfg.value_dim = std::max<std::size_t>(1, per_head);
  } else {
    cfg = default_attention(growth_rate, attention.heads);
  }
  if (attention.key_dim) cfg.key_dim = *attention.key_dim;
  if (attention.value_dim) cfg.value_dim = *attention.value_dim;
  cfg.relative_positions = attention.relative_positions;
  cfg.position_cap = attention.position_cap;
  const std::size_t f = attention_pool_factor(height, width, attention.position_cap);
  cfg.max_height = std::max<std::size_t>(1, height / f);
  cfg.max_width = std::max<std::size_t>(1, width / f);
  return cfg;
}

void NetworkConfig::validate() const {
  if (in_channels == 0) throw std::invalid_argument("network: in_channels must be >= 1");
  if (block_layout.empty()) throw std::invalid_argument("network: block layout must be nonempty");
  for (auto n : block_layout) {
    if (n == 0) throw std::invalid_argument("network: every block needs at least one layer");
  }
  if (growth_rate == 0) throw std::invalid_argument("network: growth rate must be >= 1");
  if (bottleneck_factor == 0) throw std::invalid_argument("network: bottleneck factor must be >= 1");
  if (!(compression > 0.0 && compression <= 1.0)) {
    throw std::invalid_argument("network: compression must lie in (0, 1]");
  }
  if (num_classes == 0) throw std::invalid_argument("network: num_classes must be >= 1");
  if (stem.kernel == 0 || stem.stride == 0 || stem.channels == 0) {
    throw std::invalid_argument("network: stem kernel, stride and channels must be >= 1");
  }
  if (attention.heads == 0) throw std::invalid_argument("network: attention heads must be >= 1");
  if (attention.position_cap == 0) throw std::invalid_argument("network: position cap must be >= 1");
  if (attention.channels && *attention.channels > 0) {
    if (*attention.channels >= growth_rate) {
      throw std::invalid_argument("network: attention channels must be below the growth rate");
    }
  }
  if (input_height == 0 || input_width == 0) throw std::invalid_argument("network: input size must be positive");
  (void)attention_layers();
  // Spatial bookkeeping: every block must see at least a 1x1 map.
  std::size_t h = conv_out(input_height, stem.kernel, stem.stride, stem.kernel / 2);
  std::size_t w = conv_out(input_width, stem.kernel, stem.stride, stem.kernel / 2);
  if (stem.max_pool) {
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  }
  for (std::size_t b = 0; b < block_layout.size(); ++b) {
    if (h == 0 || w == 0) throw std::invalid_argument("network: input too small for the block layout");
    if (b + 1 < block_layout.size()) {
      h /= 2;
      w /= 2;
    }
  }
}

nlohmann::json NetworkConfig::to_json() const {
  nlohmann::json j;
  j["in_channels"] = in_channels;
  j["input_size"] = {input_height, input_width};
  j["stem"] = {{"kernel", stem.kernel}, {"stride", stem.stride}, {"channels", stem.channels},
               {"max_pool", stem.max_pool}};
  j["block_layout"] = block_layout;
  j["growth_rate"] = growth_rate;
  j["bottleneck_factor"] = bottleneck_factor;
  j["compression"] = compression;
  nlohmann::json a;
  a["heads"] = attention.heads;
  a["channels"] = attention.channels ? nlohmann::json(*attention.channels) : nlohmann::json(nullptr);
  a["key_dim"] = attention.key_dim ? nlohmann::json(*attention.key_dim) : nlohmann::json(nullptr);
  a["value_dim"] = attention.value_dim ? nlohmann::json(*attention.value_dim) : nlohmann::json(nullptr);
  a["relative_positions"] = attention.relative_positions;
  a["position_cap"] = attention.position_cap;
  a["placement"] = attention.placement;
  j["attention"] = a;
  j["num_classes"] = num_classes;
  return j;
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  NetworkConfig c;
  auto opt = [](const nlohmann::json& o, const char* key) -> std::optional<std::size_t> {
    if (!o.contains(key) || o.at(key).is_null()) return std::nullopt;
    return o.at(key).get<std::size_t>();
  };
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    if (j.contains("input_size")) {
      c.input_height = j.at("input_size").at(0).get<std::size_t>();
      c.input_width = j.at("input_size").at(1).get<std::size_t>();
    }
    if (j.contains("stem")) {
      const auto& s = j.at("stem");
      c.stem.kernel = s.value("kernel", c.stem.kernel);
      c.stem.stride = s.value("stride", c.stem.stride);
      c.stem.channels = s.value("channels", c.stem.channels);
      c.stem.max_pool = s.value("max_pool", c.stem.max_pool);
    }
    if (j.contains("block_layout")) c.block_layout = j.at("block_layout").get<std::vector<std::size_t>>();
    c.growth_rate = j.value("growth_rate", c.growth_rate);
    c.bottleneck_factor = j.value("bottleneck_factor", c.bottleneck_factor);
    c.compression = j.value("compression", c.compression);
    if (j.contains("attention")) {
      const auto& a = j.at("attention");
      c.attention.heads = a.value("heads", c.attention.heads);
      c.attention.channels = opt(a, "channels");
      c.attention.key_dim = opt(a, "key_dim");
      c.attention.value_dim = opt(a, "value_dim");
      c.attention.relative_positions = a.value("relative_positions", c.attention.relative_positions);
      c.attention.position_cap = a.value("position_cap", c.attention.position_cap);
      c.attention.placement = a.value("placement", c.attention.placement);
    }
    c.num_classes = j.value("num_classes", c.num_classes);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("network config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(const std::string& prefix, std::size_t channels)
    : gamma(prefix + "/gamma", Tensor({channels}, 1.0)),
      beta(prefix + "/beta", Tensor({channels}, 0.0)),
      state(channels),
      prefix(prefix) {}

Var BatchNorm::forward(Tape& tape, const Var& x, Mode mode) {
  return batchnorm2d(tape, x, tape.parameter(gamma), tape.parameter(beta), state, mode);
}

CompositeLayer::CompositeLayer(const std::string& prefix, std::size_t in_channels, std::size_t bottleneck,
                               std::size_t growth, const AttentionConfig& attention, Rng& rng)
    : norm1(prefix + "/norm1", in_channels),
      conv1(prefix + "/conv1/weight", conv_init(bottleneck, in_channels, 1, rng)),
      norm2(prefix + "/norm2", bottleneck),
      conv2(prefix + "/conv2",
            AugmentedConv::Options{bottleneck, growth, 3, false, attention}, rng) {}

Var CompositeLayer::forward(Tape& tape, const Var& x, Mode mode) {
  Var h = relu(tape, norm1.forward(tape, x, mode));
  h = conv2d(tape, h, tape.parameter(conv1), std::nullopt, 1, 0);
  h = relu(tape, norm2.forward(tape, h, mode));
  return conv2.forward(tape, h);
}

Var DenseBlock::forward(Tape& tape, const Var& x, Mode mode, Trace* trace) {
  std::vector<Var> features{x};
  Var current = x;
  for (auto& layer : layers) {
    if (trace) trace->layer_inputs.push_back(current.value());
    Var out = layer.forward(tape, current, mode);
    if (trace) trace->layer_outputs.push_back(out.value());
    features.push_back(out);
    current = concat_channels(tape, features);
  }
  return current;
}

Transition::Transition(const std::string& prefix, std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : norm(prefix + "/norm", in_channels),
      conv(prefix + "/conv/weight", conv_init(out_channels, in_channels, 1, rng)),
      out_channels(out_channels) {}

Var Transition::forward(Tape& tape, const Var& x, Mode mode) {
  Var h = relu(tape, norm.forward(tape, x, mode));
  h = conv2d(tape, h, tape.parameter(conv), std::nullopt, 1, 0);
  return avgpool2d(tape, h, 2, 2);
}

// ---------------------------------------------------------------------------

struct Network::Body {
  NetworkConfig config;
  Parameter stem_conv;
  std::optional<BatchNorm> stem_norm;
  std::vector<DenseBlock> blocks;
  std::vector<Transition> transitions;
  std::optional<BatchNorm> final_norm;
  Parameter classifier_weight;
  Parameter classifier_bias;
  std::vector<Parameter*> registry;
  std::vector<BatchNorm*> norms;

  void collect() {
    registry.clear();
    norms.clear();
    auto add_norm = [&](BatchNorm& n) {
      registry.push_back(&n.gamma);
      registry.push_back(&n.beta);
      norms.push_back(&n);
    };
    registry.push_back(&stem_conv);
    add_norm(*stem_norm);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (auto& layer : blocks[b].layers) {
        add_norm(layer.norm1);
        registry.push_back(&layer.conv1);
        add_norm(layer.norm2);
        for (Parameter* p : layer.conv2.parameters()) registry.push_back(p);
      }
      if (b < transitions.size()) {
        add_norm(transitions[b].norm);
        registry.push_back(&transitions[b].conv);
      }
    }
    add_norm(*final_norm);
    registry.push_back(&classifier_weight);
    registry.push_back(&classifier_bias);
  }
};

Network::Network(std::unique_ptr<Body> body) : body_(std::move(body)) {}
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;
Network::~Network() = default;

Network Network::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  auto body = std::make_unique<Body>();
  body->config = config;
  Rng rng(seed);
  const auto& c = config;

  body->stem_conv = Parameter("stem/conv/weight", conv_init(c.stem.channels, c.in_channels, c.stem.kernel, rng));
  body->stem_norm.emplace("stem/norm", c.stem.channels);

  std::size_t h = conv_out(c.input_height, c.stem.kernel, c.stem.stride, c.stem.kernel / 2);
  std::size_t w = conv_out(c.input_width, c.stem.kernel, c.stem.stride, c.stem.kernel / 2);
  if (c.stem.max_pool) {
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  }

  const auto placement = c.attention_layers();
  const std::size_t bottleneck = c.bottleneck_factor * c.growth_rate;
  std::size_t channels = c.stem.channels;
  body->blocks.reserve(c.block_layout.size());
  body->transitions.reserve(c.block_layout.size());
  for (std::size_t b = 0; b < c.block_layout.size(); ++b) {
    DenseBlock block(channels, c.growth_rate);
    block.height = h;
    block.width = w;
    block.layers.reserve(c.block_layout[b]);
    for (std::size_t l = 0; l < c.block_layout[b]; ++l) {
      AttentionConfig attn{.output_dim = 0};
      if (placement.count({b, l})) attn = c.attention_config(h, w);
      block.layers.emplace_back(layer_prefix(b, l), channels + l * c.growth_rate, bottleneck, c.growth_rate, attn,
                                rng);
    }
    channels = block.out_channels();
    body->blocks.push_back(std::move(block));
    if (b + 1 < c.block_layout.size()) {
      const auto out = static_cast<std::size_t>(std::floor(c.compression * static_cast<double>(channels)));
      if (out == 0) throw std::invalid_argument("network: compression leaves a transition with no channels");
      body->transitions.emplace_back("transition" + std::to_string(b + 1), channels, out, rng);
      channels = out;
      h /= 2;
      w /= 2;
    }
  }
  body->final_norm.emplace("final_norm", channels);
  body->classifier_weight =
      Parameter("classifier/weight", linear_uniform({channels, c.num_classes}, channels, rng));
  body->classifier_bias = Parameter("classifier/bias", linear_uniform({c.num_classes}, channels, rng));
  body->collect();
  return Network(std::move(body));
}

Var Network::forward(Tape& tape, const Var& batch, Mode mode) {
  auto& b = *body_;
  const auto& c = b.config;
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != c.in_channels || s[2] != c.input_height || s[3] != c.input_width) {
    std::string got;
    for (std::size_t i = 0; i < s.size(); ++i) got += (i ? "x" : "") + std::to_string(s[i]);
    throw ShapeError("network expects B x " + std::to_string(c.in_channels) + " x " +
                     std::to_string(c.input_height) + " x " + std::to_string(c.input_width) + " input, got " +
                     got);
  }
  Var h = conv2d(tape, batch, tape.parameter(b.stem_conv), std::nullopt, c.stem.stride, c.stem.kernel / 2);
  h = relu(tape, b.stem_norm->forward(tape, h, mode));
  if (c.stem.max_pool) h = maxpool2d(tape, h, 3, 2, 1);
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    h = b.blocks[i].forward(tape, h, mode);
    if (i < b.transitions.size()) h = b.transitions[i].forward(tape, h, mode);
  }
  h = relu(tape, b.final_norm->forward(tape, h, mode));
  h = global_avgpool(tape, h);
  h = reshape(tape, h, {h.dim(0), h.dim(1)});
  return linear(tape, h, tape.parameter(b.classifier_weight), tape.parameter(b.classifier_bias));
}

Tensor Network::logits(const Tensor& batch, Mode mode) {
  Tape tape(false);
  return forward(tape, tape.constant(batch), mode).value();
}

Tensor Network::predict_probabilities(const Tensor& batch) {
  Tensor z = logits(batch, Mode::eval);
  for (double& v : z.data()) v = stable_sigmoid(v);
  return z;
}

const NetworkConfig& Network::config() const { return body_->config; }
const std::vector<Parameter*>& Network::parameters() const { return body_->registry; }

Parameter* Network::find_parameter(const std::string& name) const {
  for (Parameter* p : body_->registry) {
    if (p->name() == name) return p;
  }
  return nullptr;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : body_->registry) n += p->value().size();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> Network::buffers() const {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (BatchNorm* n : body_->norms) {
    out.emplace_back(n->prefix + "/running_mean", &n->state.running_mean);
    out.emplace_back(n->prefix + "/running_var", &n->state.running_var);
  }
  return out;
}

void Network::zero_grad() {
  for (Parameter* p : body_->registry) p->zero_grad();
}

std::vector<DenseBlock>& Network::blocks() { return body_->blocks; }
const std::vector<DenseBlock>& Network::blocks() const { return body_->blocks; }
const std::vector<Transition>& Network::transitions() const { return body_->transitions; }

Archive Network::export_weights() const {
  Archive a;
  a.manifest["network"] = body_->config.to_json();
  for (const Parameter* p : body_->registry) a.records.emplace_back(p->name(), p->value());
  for (const auto& [name, t] : buffers()) a.records.emplace_back(name, *t);
  return a;
}

ImportReport Network::import_weights(const Archive& archive, bool strict) {
  ImportReport report;
  std::vector<std::pair<std::string, Tensor*>> targets;
  for (Parameter* p : body_->registry) targets.emplace_back(p->name(), &p->value());
  for (const auto& entry : buffers()) targets.push_back(entry);

  // Validate everything first so a strict failure leaves the network untouched.
  std::vector<std::pair<Tensor*, const Tensor*>> copies;
  for (const auto& [name, dst] : targets) {
    const Tensor* src = archive.find(name);
    if (!src) {
      report.skipped.push_back(name + ": missing from archive");
    } else if (src->shape() != dst->shape()) {
      report.skipped.push_back(name + ": shape mismatch");
    } else {
      copies.emplace_back(dst, src);
      report.loaded.push_back(name);
    }
  }
  for (const auto& [name, t] : archive.records) {
    if (name.rfind("adam/", 0) == 0) continue;
    const bool known = std::any_of(targets.begin(), targets.end(), [&](const auto& e) { return e.first == name; });
    if (!known) report.skipped.push_back(name + ": not in network");
  }
  if (strict && !report.skipped.empty()) {
    throw std::runtime_error("strict import failed: " + report.skipped.front() + " (" +
                             std::to_string(report.skipped.size()) + " mismatches)");
  }
  for (auto& [dst, src] : copies) *dst = *src;
  return report;
}

ImportReport Network::import_pretrained(const std::filesystem::path& archive_path, bool strict) {
  return import_weights(load_archive(archive_path), strict);
}

}  // namespace sacn
