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

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "sacn/tensor.hpp"

namespace sacn {

/// Decodes PNG or binary/ASCII PPM/PGM (JPEG when built with SACN_WITH_JPEG)
/// into a 3 x H x W tensor in [0, 1]. Grayscale is replicated to three
/// channels and any alpha channel is discarded. The container is detected from the file
/// header, not the extension.
Tensor decode_image(const std::filesystem::path& path);

/// Writes a 3 x H x W (or 1 x H x W) tensor in [0, 1] as 8-bit PNG or
/// binary PNM (P5 for one channel, P6 for three).
void write_png(const std::filesystem::path& path, const Tensor& image);
void write_pnm(const std::filesystem::path& path, const Tensor& image);

/// Bilinear resampling of C x H x W with half-pixel centres and clamped
/// borders. Aspect ratio is not preserved; same-size input is returned
/// unchanged.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

Tensor decode_and_resize(const std::filesystem::path& path, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------

/// Augmentation vocabulary, in application order. There is deliberately no
/// vertical flip.
enum class AugmentOp { horizontal_flip, rotate, scale, crop, translate, contrast, noise };

const std::vector<AugmentOp>& all_augment_ops();
std::string_view augment_op_name(AugmentOp op);
AugmentOp parse_augment_op(std::string_view name);

struct AugmentConfig {
  double horizontal_flip_prob = 0.5;
  double rotation_max_degrees = 10.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  std::size_t crop_height = 0;  // 0 = input height
  std::size_t crop_width = 0;
  double translate_max = 0.05;  // fraction of each extent
  double contrast_max = 0.1;    // multiplicative deviation around the mean
  double noise_sigma = 0.01;
  std::vector<AugmentOp> enabled{AugmentOp::horizontal_flip, AugmentOp::rotate, AugmentOp::scale, AugmentOp::crop};

  bool has(AugmentOp op) const;
  /// Throws invalid_argument on out-of-range values.
  void validate() const;
};

/// Deterministic in (seed, sample, epoch). Output stays in [0, 1].
/// Throws invalid_argument when the crop exceeds the image after scaling.
Tensor augment(const Tensor& image, const AugmentConfig& config, std::uint64_t seed, std::uint64_t sample,
               std::uint64_t epoch);

// Individual transforms, exposed for tests and reuse.
Tensor flip_horizontal(const Tensor& image);
/// Counter-clockwise rotation about the centre; uncovered pixels are 0.
Tensor rotate(const Tensor& image, double degrees);
Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);
/// Shift by (dy, dx) pixels with zero fill.
Tensor translate(const Tensor& image, long dy, long dx);

struct NormalizationSpec {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

/// (x - mean_c) / std_c per channel of a 3 x H x W tensor.
Tensor normalize(const Tensor& image, const NormalizationSpec& spec = {});
Tensor denormalize(const Tensor& image, const NormalizationSpec& spec = {});

struct PipelineConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  /// Training images are resized to this before augmentation; 0 picks
  /// round(8/7 x input), so a 224 input loads at 256.
  std::size_t load_height = 0;
  std::size_t load_width = 0;
  AugmentConfig augment;
  NormalizationSpec normalization;

  std::size_t effective_load_height() const;
  std::size_t effective_load_width() const;
};

/// decode -> resize -> normalize. No randomness.
Tensor eval_transform(const std::filesystem::path& path, const PipelineConfig& config);
/// decode -> resize to load size -> augment (crop to input size) -> normalize.
Tensor train_transform(const std::filesystem::path& path, const PipelineConfig& config, std::uint64_t seed,
                       std::uint64_t sample, std::uint64_t epoch);
/// The same steps on an already-decoded image in [0, 1].
Tensor eval_transform(const Tensor& image, const PipelineConfig& config);
Tensor train_transform(const Tensor& image, const PipelineConfig& config, std::uint64_t seed, std::uint64_t sample,
                       std::uint64_t epoch);

}  // namespace sacn
