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

#include "sacn/dataset.hpp"

#include <algorithm>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace sacn {

InMemoryDataset::InMemoryDataset(std::vector<Tensor> images, std::vector<BinaryLabels> targets)
    : images_(std::move(images)), targets_(std::move(targets)) {
  if (images_.size() != targets_.size()) throw std::invalid_argument("InMemoryDataset: image/target count mismatch");
  for (const Tensor& t : images_) {
    if (t.rank() != 3 || !t.same_shape(images_.front())) {
      throw ShapeError("InMemoryDataset: images must share one C x H x W shape");
    }
  }
}

Tensor InMemoryDataset::image(std::size_t index, std::uint64_t, bool) const { return images_.at(index); }

const BinaryLabels& InMemoryDataset::target(std::size_t index) const { return targets_.at(index); }

ManifestDataset::ManifestDataset(const std::filesystem::path& manifest_path, const std::vector<ManifestRow>& rows,
                                 UncertaintyPolicy policy, PipelineConfig pipeline, std::uint64_t seed)
    : pipeline_(std::move(pipeline)), seed_(seed) {
  pipeline_.augment.validate();
  for (const ManifestRow& row : rows) {
    auto target = apply_policy(row.labels, policy);
    if (!target) {
      ++dropped_;
      continue;
    }
    paths_.push_back(resolve_image_path(manifest_path, row));
    targets_.push_back(*target);
  }
}

Tensor ManifestDataset::image(std::size_t index, std::uint64_t epoch, bool train) const {
  const auto& path = paths_.at(index);
  return train ? train_transform(path, pipeline_, seed_, index, epoch) : eval_transform(path, pipeline_);
}

const BinaryLabels& ManifestDataset::target(std::size_t index) const { return targets_.at(index); }

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::uint64_t epoch, bool train,
                 std::size_t threads) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  std::vector<Tensor> images(indices.size());
  std::exception_ptr failure;
  std::mutex failure_lock;
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < indices.size(); i += stride) {
      try {
        images[i] = data.image(indices[i], epoch, train);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_lock);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, indices.size());
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  const Shape& s = images.front().shape();
  if (s.size() != 3) throw ShapeError("make_batch: images must be C x H x W");
  Batch batch{Tensor({indices.size(), s[0], s[1], s[2]}), Tensor({indices.size(), kNumLabels})};
  const std::size_t per = images.front().size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (images[i].shape() != s) throw ShapeError("make_batch: images differ in shape");
    std::copy_n(images[i].raw(), per, batch.images.raw() + i * per);
    const BinaryLabels& y = data.target(indices[i]);
    std::copy(y.begin(), y.end(), batch.targets.raw() + i * kNumLabels);
  }
  return batch;
}

}  // namespace sacn
