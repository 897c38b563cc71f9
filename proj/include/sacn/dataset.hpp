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
#include <vector>

#include "sacn/image.hpp"
#include "sacn/labels.hpp"
#include "sacn/manifest.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

/// Indexed source of (image, binary target) pairs. Implementations must be
/// safe to call concurrently for different indices.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  /// Network-ready 3 x H x W image. `train` enables augmentation, whose
  /// randomness depends only on (seed, index, epoch).
  virtual Tensor image(std::size_t index, std::uint64_t epoch, bool train) const = 0;
  virtual const BinaryLabels& target(std::size_t index) const = 0;
};

/// Preprocessed tensors held in memory; images are returned unchanged.
class InMemoryDataset : public Dataset {
 public:
  InMemoryDataset(std::vector<Tensor> images, std::vector<BinaryLabels> targets);
  std::size_t size() const override { return images_.size(); }
  Tensor image(std::size_t index, std::uint64_t epoch, bool train) const override;
  const BinaryLabels& target(std::size_t index) const override;

 private:
  std::vector<Tensor> images_;
  std::vector<BinaryLabels> targets_;
};

/// Rows of a manifest decoded on demand. Labels go through the uncertainty
/// policy at construction; under U-Ignore rows with an Uncertain entry are
/// dropped.
class ManifestDataset : public Dataset {
 public:
  ManifestDataset(const std::filesystem::path& manifest_path, const std::vector<ManifestRow>& rows,
                  UncertaintyPolicy policy, PipelineConfig pipeline, std::uint64_t seed);
  std::size_t size() const override { return paths_.size(); }
  Tensor image(std::size_t index, std::uint64_t epoch, bool train) const override;
  const BinaryLabels& target(std::size_t index) const override;
  std::size_t dropped() const { return dropped_; }

 private:
  std::vector<std::filesystem::path> paths_;
  std::vector<BinaryLabels> targets_;
  PipelineConfig pipeline_;
  std::uint64_t seed_;
  std::size_t dropped_ = 0;
};

struct Batch {
  Tensor images;   // B x 3 x H x W
  Tensor targets;  // B x 14
};

/// Gathers `indices` into one batch, decoding on up to `threads` workers.
/// The result does not depend on the thread count.
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::uint64_t epoch, bool train,
                 std::size_t threads = 1);

}  // namespace sacn
