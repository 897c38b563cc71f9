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

#include "sacn/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "sacn/metrics.hpp"
#include "sacn/ops.hpp"
#include "sacn/random.hpp"

namespace sacn {

namespace {

void check_targets(const Tensor& a, const Tensor& targets, const char* who) {
  if (!a.same_shape(targets)) {
    throw ShapeError(std::string(who) + ": shape " + to_string(a.shape()) + " vs targets " +
                     to_string(targets.shape()));
  }
  if (targets.empty()) throw ShapeError(std::string(who) + ": empty input");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != 0.0 && targets[i] != 1.0) {
      throw std::invalid_argument(std::string(who) + ": target " + std::to_string(targets[i]) + " at index " +
                                  std::to_string(i) + " is not 0 or 1");
    }
  }
}

// Unclamped logistic; exact enough that sigmoid(z) - y is the true gradient.
double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bce_logit_term(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

std::string epoch_file(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%04zu.sack", epoch);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("train config: " + msg);
  };
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0, 1]");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must be in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must be in [0, 1)");
  require(epsilon > 0.0, "epsilon must be positive");
  require(max_epochs >= 1, "max_epochs must be >= 1");
  require(ensemble_size >= 1, "ensemble_size must be >= 1");
  require(threads >= 1, "threads must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size}, {"lr", lr},         {"lr_decay", lr_decay},     {"beta1", beta1},
          {"beta2", beta2},           {"epsilon", epsilon}, {"max_epochs", max_epochs}, {"patience", patience},
          {"seed", seed},             {"ensemble_size", ensemble_size}, {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.ensemble_size = j.value("ensemble_size", c.ensemble_size);
  c.threads = j.value("threads", c.threads);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

double bce_loss(const Tensor& probabilities, const Tensor& targets) {
  check_targets(probabilities, targets, "bce_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("bce_loss: probability outside [0, 1]");
    total += targets[i] == 1.0 ? -std::log(p) : -std::log1p(-p);
  }
  return total / static_cast<double>(targets.size());
}

Tensor bce_grad_probabilities(const Tensor& probabilities, const Tensor& targets) {
  check_targets(probabilities, targets, "bce_grad_probabilities");
  const double n = static_cast<double>(targets.size());
  Tensor g(probabilities.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = probabilities[i];
    g[i] = (targets[i] == 1.0 ? -1.0 / p : 1.0 / (1.0 - p)) / n;
  }
  return g;
}

double bce_with_logits(const Tensor& logits, const Tensor& targets) {
  check_targets(logits, targets, "bce_with_logits");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) total += bce_logit_term(logits[i], targets[i]);
  return total / static_cast<double>(targets.size());
}

Var bce_with_logits(Tape& tape, const Var& logits, const Tensor& targets) {
  const double value = bce_with_logits(logits.value(), targets);
  Var result = tape.make_result(Tensor::scalar(value), {&logits});
  tape.record(result, [logits, result, targets] {
    const Tensor& dout = result.node()->grad;
    if (dout.empty()) return;
    const double g = dout[0] / static_cast<double>(targets.size());
    Tensor& dz = logits.grad_buffer();
    const Tensor& z = logits.value();
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += g * (logistic(z[i]) - targets[i]);
  });
  return result;
}

// ---------------------------------------------------------------------------

void adam_step(const std::vector<Parameter*>& params, OptimizerState& state, const AdamConfig& config, double lr) {
  if (state.m.empty() && state.v.empty()) {
    for (const Parameter* p : params) {
      state.m.emplace_back(p->value().shape(), 0.0);
      state.v.emplace_back(p->value().shape(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match the parameter list");
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k]->value();
    const Tensor& g = params[k]->grad();
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    if (!m.same_shape(w) || !v.same_shape(w)) {
      throw ShapeError("adam_step: moment shape mismatch for " + params[k]->name());
    }
    const bool has_grad = !g.empty();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------

Checkpoint make_checkpoint(const Network& net, const OptimizerState& optimizer, std::size_t epoch, std::uint64_t step,
                           double val_mean_auc, double lr, const TrainConfig& config) {
  Checkpoint c;
  c.weights = net.export_weights();
  c.optimizer = optimizer;
  c.epoch = epoch;
  c.step = step;
  c.val_mean_auc = val_mean_auc;
  c.lr = lr;
  c.train_config = config.to_json();
  return c;
}

Archive checkpoint_to_archive(const Checkpoint& ckpt, const std::vector<std::string>& param_names) {
  if (!(ckpt.val_mean_auc >= 0.0 && ckpt.val_mean_auc <= 1.0)) {
    throw std::invalid_argument("checkpoint: validation score must be in [0, 1]");
  }
  Archive a = ckpt.weights;
  a.manifest["checkpoint"] = {{"epoch", ckpt.epoch},
                              {"step", ckpt.step},
                              {"val_mean_auc", ckpt.val_mean_auc},
                              {"lr", ckpt.lr},
                              {"adam_t", ckpt.optimizer.t},
                              {"train", ckpt.train_config}};
  if (!ckpt.optimizer.m.empty()) {
    if (ckpt.optimizer.m.size() != param_names.size() || ckpt.optimizer.v.size() != param_names.size()) {
      throw std::invalid_argument("checkpoint: optimizer state does not match the parameter list");
    }
    for (std::size_t k = 0; k < param_names.size(); ++k) a.records.emplace_back("adam/m/" + param_names[k], ckpt.optimizer.m[k]);
    for (std::size_t k = 0; k < param_names.size(); ++k) a.records.emplace_back("adam/v/" + param_names[k], ckpt.optimizer.v[k]);
  }
  return a;
}

namespace {

std::vector<std::string> parameter_names_of(const Archive& weights) {
  // Parameters come first in an export, buffers after; rebuild the network
  // to tell them apart.
  const NetworkConfig config = NetworkConfig::from_json(weights.manifest.at("network"));
  Network net = Network::build(config, 0);
  std::vector<std::string> names;
  for (const Parameter* p : net.parameters()) names.push_back(p->name());
  return names;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  save_archive(path, checkpoint_to_archive(ckpt, parameter_names_of(ckpt.weights)));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Archive a = load_archive(path);
  if (!a.manifest.contains("network") || !a.manifest.contains("checkpoint")) {
    throw FormatError(path.string() + ": not a checkpoint (manifest lacks network/checkpoint entries)");
  }
  Checkpoint c;
  const auto& meta = a.manifest.at("checkpoint");
  c.epoch = meta.at("epoch").get<std::size_t>();
  c.step = meta.at("step").get<std::uint64_t>();
  c.val_mean_auc = meta.at("val_mean_auc").get<double>();
  c.lr = meta.at("lr").get<double>();
  c.optimizer.t = meta.at("adam_t").get<std::uint64_t>();
  c.train_config = meta.at("train");
  c.weights.manifest = a.manifest;
  c.weights.manifest.erase("checkpoint");
  for (auto& [name, t] : a.records) {
    if (name.rfind("adam/m/", 0) == 0) {
      c.optimizer.m.push_back(std::move(t));
    } else if (name.rfind("adam/v/", 0) == 0) {
      c.optimizer.v.push_back(std::move(t));
    } else {
      c.weights.records.emplace_back(name, std::move(t));
    }
  }
  if (c.optimizer.m.size() != c.optimizer.v.size()) throw FormatError(path.string() + ": unpaired Adam moments");
  return c;
}

Network restore_network(const Checkpoint& ckpt) {
  Network net = Network::build(NetworkConfig::from_json(ckpt.weights.manifest.at("network")), 0);
  net.import_weights(ckpt.weights, true);
  return net;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json LogRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  j["val_mean_auc"] = val_mean_auc ? nlohmann::ordered_json(*val_mean_auc) : nlohmann::ordered_json(nullptr);
  return j;
}

Tensor predict_dataset(Network& net, const Dataset& data, std::size_t batch_size, std::size_t threads) {
  const std::size_t n = data.size();
  const std::size_t classes = net.config().num_classes;
  Tensor out({n, classes});
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(data, idx, 0, false, threads);
    const Tensor p = net.predict_probabilities(b.images);
    std::copy_n(p.raw(), p.size(), out.raw() + start * classes);
  }
  return out;
}

double validation_mean_auc(Network& net, const Dataset& data, std::size_t batch_size, std::size_t threads) {
  const Tensor probs = predict_dataset(net, data, batch_size, threads);
  Tensor targets({data.size(), kNumLabels});
  for (std::size_t i = 0; i < data.size(); ++i) {
    const BinaryLabels& y = data.target(i);
    std::copy(y.begin(), y.end(), targets.raw() + i * kNumLabels);
  }
  std::vector<std::string> names;
  for (auto n : label_names()) names.emplace_back(n);
  try {
    return evaluate(probs, targets, names).mean_auc;
  } catch (const UndefinedAuc&) {
    return 0.0;
  }
}

TrainResult train(Network& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (val_set.size() == 0) throw std::invalid_argument("train: empty validation set");
  if (net.config().num_classes != kNumLabels) {
    throw std::invalid_argument("train: network must have " + std::to_string(kNumLabels) + " outputs");
  }
  std::ofstream log_file;
  std::filesystem::path ckpt_dir;
  if (options.run_dir) {
    ckpt_dir = *options.run_dir / "checkpoints";
    std::filesystem::create_directories(ckpt_dir);
    log_file.open(*options.run_dir / "log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write " + (*options.run_dir / "log.jsonl").string());
  }
  std::vector<std::string> param_names;
  for (const Parameter* p : net.parameters()) param_names.push_back(p->name());

  const AdamConfig adam{config.beta1, config.beta2, config.epsilon};
  OptimizerState state;
  TrainResult result;
  double lr = config.lr;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  std::uint64_t step = 0;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, 0x7a41, epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + config.batch_size)));
      const Batch batch = make_batch(train_set, idx, epoch, true, config.threads);
      net.zero_grad();
      Tape tape;
      Var logits = net.forward(tape, tape.constant(batch.images), Mode::train);
      Var loss = bce_with_logits(tape, logits, batch.targets);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingAborted("training aborted: loss is " + std::to_string(value) + " at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(step) +
                              " (lr " + std::to_string(lr) + ")");
      }
      tape.backward(loss);
      adam_step(net.parameters(), state, adam, lr);
      loss_sum += value;
      ++batches;
      ++step;
    }
    const double score = validation_mean_auc(net, val_set, config.batch_size, config.threads);
    LogRecord record{epoch, step, loss_sum / static_cast<double>(batches), lr, score};
    result.log.push_back(record);
    if (log_file) {
      log_file << record.to_json().dump() << '\n';
      log_file.flush();
    }

    // Top-K by score; an equal score never displaces an earlier epoch.
    const bool qualifies = result.best.size() < config.ensemble_size || score > result.best.back().val_mean_auc;
    if (qualifies) {
      Checkpoint ckpt = make_checkpoint(net, state, epoch, step, score, lr, config);
      if (!ckpt_dir.empty()) save_archive(ckpt_dir / epoch_file(epoch), checkpoint_to_archive(ckpt, param_names));
      const auto pos = std::find_if(result.best.begin(), result.best.end(),
                                    [&](const Checkpoint& c) { return score > c.val_mean_auc; });
      result.best.insert(pos, std::move(ckpt));
      if (result.best.size() > config.ensemble_size) {
        if (!ckpt_dir.empty()) std::filesystem::remove(ckpt_dir / epoch_file(result.best.back().epoch));
        result.best.pop_back();
      }
    }

    if (score > best_score) {
      best_score = score;
      bad_epochs = 0;
    } else if (++bad_epochs > config.patience) {
      lr *= config.lr_decay;
      bad_epochs = 0;
    }

    const bool last = epoch + 1 == config.max_epochs;
    const bool stop = options.on_epoch && options.on_epoch(record, net);
    if (last || stop) {
      result.final_state = make_checkpoint(net, state, epoch, step, score, lr, config);
      break;
    }
  }
  result.final_lr = lr;
  if (options.run_dir) {
    save_archive(*options.run_dir / "final.sack", checkpoint_to_archive(result.final_state, param_names));
  }
  return result;
}

Tensor ensemble_predict(const std::vector<Network*>& members, const Tensor& batch) {
  if (members.empty()) throw std::invalid_argument("ensemble_predict: no members");
  for (const Network* m : members) {
    if (!(m->config() == members.front()->config())) {
      throw std::invalid_argument("ensemble_predict: members have different network configs");
    }
  }
  std::vector<Tensor> outputs;
  outputs.reserve(members.size());
  for (Network* m : members) outputs.push_back(m->predict_probabilities(batch));
  Tensor mean(outputs.front().shape());
  std::vector<double> column(members.size());
  const double k = static_cast<double>(members.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    for (std::size_t j = 0; j < outputs.size(); ++j) column[j] = outputs[j][i];
    std::sort(column.begin(), column.end());
    double total = 0.0;
    for (double v : column) total += v;
    mean[i] = total / k;
  }
  return mean;
}

}  // namespace sacn
