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
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sacn/archive.hpp"
#include "sacn/autograd.hpp"
#include "sacn/dataset.hpp"
#include "sacn/network.hpp"
#include "json.hpp"

namespace sacn {

struct TrainConfig {
  std::size_t batch_size = 8;
  double lr = 1e-4;
  double lr_decay = 0.97;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t max_epochs = 30;
  /// Non-improving epochs tolerated before the learning rate decays.
  std::size_t patience = 1;
  std::uint64_t seed = 0;
  std::size_t ensemble_size = 10;
  /// Data-loading workers.
  std::size_t threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Binary cross-entropy, averaged over batch x classes.

/// Mean of -[y log p + (1 - y) log(1 - p)]. Targets must be 0 or 1 and p in
/// (0, 1).
double bce_loss(const Tensor& probabilities, const Tensor& targets);
/// d(bce_loss)/dp.
Tensor bce_grad_probabilities(const Tensor& probabilities, const Tensor& targets);

/// Fused form on logits z: mean of max(z, 0) - z y + log(1 + exp(-|z|)).
/// Its gradient is (sigmoid(z) - y) / count, finite for every finite z.
Var bce_with_logits(Tape& tape, const Var& logits, const Tensor& targets);
double bce_with_logits(const Tensor& logits, const Tensor& targets);

// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<Tensor> m;  // one per parameter, registry order
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over each parameter's accumulated gradient. Moments
/// are created on the first step. A parameter without a gradient buffer is
/// treated as having a zero gradient.
void adam_step(const std::vector<Parameter*>& params, OptimizerState& state, const AdamConfig& config, double lr);

// ---------------------------------------------------------------------------

struct Checkpoint {
  Archive weights;  // Network::export_weights()
  OptimizerState optimizer;
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double val_mean_auc = 0.0;
  double lr = 0.0;
  nlohmann::json train_config = nlohmann::json::object();
};

/// Snapshot of a network and its optimizer.
Checkpoint make_checkpoint(const Network& net, const OptimizerState& optimizer, std::size_t epoch, std::uint64_t step,
                           double val_mean_auc, double lr, const TrainConfig& config);

/// One archive: network records, "adam/m/<param>" and "adam/v/<param>"
/// records, and a manifest holding the network config, epoch, step,
/// validation score, learning rate, Adam step count and training config.
Archive checkpoint_to_archive(const Checkpoint& ckpt, const std::vector<std::string>& param_names);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Network rebuilt from the checkpoint's config with its weights loaded.
Network restore_network(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------

struct LogRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double loss = 0.0;  // mean training loss over the epoch
  double lr = 0.0;    // rate used during the epoch
  std::optional<double> val_mean_auc;

  nlohmann::ordered_json to_json() const;
};

/// Raised when a training loss is NaN or infinite.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  /// When set, checkpoints/epoch-NNNN.sack (the current best), final.sack
  /// and log.jsonl are written here.
  std::optional<std::filesystem::path> run_dir;
  /// Called after each epoch; returning true stops training early.
  std::function<bool(const LogRecord&, Network&)> on_epoch;
};

struct TrainResult {
  /// Best checkpoints by validation mean AUC, descending; ties keep the
  /// earlier epoch first. At most ensemble_size entries.
  std::vector<Checkpoint> best;
  Checkpoint final_state;
  std::vector<LogRecord> log;
  double final_lr = 0.0;
};

/// Mean AUC of eval-mode predictions over a dataset; classes lacking either
/// label are skipped and a set with no scorable class scores 0.
double validation_mean_auc(Network& net, const Dataset& data, std::size_t batch_size, std::size_t threads = 1);

/// Eval-mode probabilities for a whole dataset, N x num_classes.
Tensor predict_dataset(Network& net, const Dataset& data, std::size_t batch_size, std::size_t threads = 1);

/// Shuffled minibatches, fused BCE, Adam; per epoch a validation score
/// drives top-K selection and plateau decay: after more than `patience`
/// consecutive epochs without a strictly better score the rate is
/// multiplied by lr_decay and the count restarts.
TrainResult train(Network& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                  const TrainOptions& options = {});

/// Arithmetic mean of member probabilities. Members must share a network
/// config. Each entry is summed in sorted order, so the result does not
/// depend on member order.
Tensor ensemble_predict(const std::vector<Network*>& members, const Tensor& batch);

}  // namespace sacn
