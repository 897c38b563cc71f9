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

#include "sacn/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

#ifdef SACN_WITH_JPEG
#include <jpeglib.h>

#include <csetjmp>
#endif

#include "sacn/random.hpp"

namespace sacn {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Interleaved samples (rows x cols x channels) scaled by 1/maxval into CHW.
Tensor from_interleaved(const std::vector<double>& samples, std::size_t h, std::size_t w, std::size_t channels) {
  Tensor out({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t base = (y * w + x) * channels;
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * h + y) * w + x] = samples[base + (channels >= 3 ? c : 0)];
      }
    }
  }
  return out;
}

Tensor decode_png(const std::string& bytes, const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError("png " + path.string() + ": " + image.message);
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  // Read with alpha so that libpng does not composite; alpha is skipped below.
  image.format = gray ? PNG_FORMAT_GA : PNG_FORMAT_RGBA;
  const std::size_t channels = gray ? 2 : 4;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("png " + path.string() + ": " + msg);
  }
  std::vector<double> samples(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) samples[i] = buffer[i] / 255.0;
  return from_interleaved(samples, image.height, image.width, channels);
}

Tensor decode_pnm(const std::string& bytes, const std::filesystem::path& path) {
  std::size_t pos = 2;
  auto fail = [&](const std::string& msg) -> Tensor { throw FormatError("pnm " + path.string() + ": " + msg); };
  auto next_number = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw FormatError("pnm " + path.string() + ": malformed header");
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 30)) throw FormatError("pnm " + path.string() + ": header value too large");
      ++pos;
    }
    return v;
  };
  const char kind = bytes[1];
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  const bool binary = kind == '5' || kind == '6';
  const std::size_t w = next_number(), h = next_number(), maxval = next_number();
  if (w == 0 || h == 0) return fail("zero extent");
  if (maxval == 0 || maxval > 65535) return fail("maxval out of range");
  const std::size_t count = w * h * channels;
  std::vector<double> samples(count);
  if (binary) {
    ++pos;  // single whitespace after maxval
    const std::size_t width = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + count * width) return fail("truncated pixel data");
    for (std::size_t i = 0; i < count; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * width);
      const std::size_t v = width == 2 ? (std::size_t{p[0]} << 8) | p[1] : p[0];
      if (v > maxval) return fail("sample exceeds maxval");
      samples[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t v = next_number();
      if (v > maxval) return fail("sample exceeds maxval");
      samples[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
  }
  return from_interleaved(samples, h, w, channels);
}

#ifdef SACN_WITH_JPEG
struct JpegError {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

Tensor decode_jpeg(const std::string& bytes, const std::filesystem::path& path) {
  jpeg_decompress_struct info{};
  JpegError err{};
  info.err = jpeg_std_error(&err.base);
  err.base.error_exit = [](j_common_ptr cinfo) {
    auto* e = reinterpret_cast<JpegError*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, e->message);
    std::longjmp(e->jump, 1);
  };
  std::vector<unsigned char> pixels;
  std::size_t h = 0, w = 0, channels = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    throw FormatError("jpeg " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&info);
  jpeg_mem_src(&info, reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  jpeg_read_header(&info, TRUE);
  info.out_color_space = info.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&info);
  h = info.output_height;
  w = info.output_width;
  channels = static_cast<std::size_t>(info.output_components);
  pixels.resize(h * w * channels);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = pixels.data() + info.output_scanline * w * channels;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  std::vector<double> samples(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) samples[i] = pixels[i] / 255.0;
  return from_interleaved(samples, h, w, channels);
}
#endif

void check_image(const Tensor& image, const char* who) {
  if (image.rank() != 3 || image.dim(1) == 0 || image.dim(2) == 0) {
    throw ShapeError(std::string(who) + ": expected C x H x W, got " + to_string(image.shape()));
  }
}

std::vector<unsigned char> to_bytes(const Tensor& image, std::size_t& channels) {
  check_image(image, "write image");
  channels = image.dim(0);
  if (channels != 1 && channels != 3) throw ShapeError("write image: need 1 or 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> out(h * w * channels);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = std::clamp(image[(c * h + y) * w + x], 0.0, 1.0);
        out[(y * w + x) * channels + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  return out;
}

// Bilinear sample with zero outside the image.
double sample_zero(const Tensor& img, std::size_t c, double y, double x) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  const double fy = std::floor(y), fx = std::floor(x);
  const double dy = y - fy, dx = x - fx;
  double acc = 0.0;
  for (int oy = 0; oy < 2; ++oy) {
    const double wy = oy ? dy : 1.0 - dy;
    const double yy = fy + oy;
    if (wy == 0.0 || yy < 0 || yy >= static_cast<double>(h)) continue;
    for (int ox = 0; ox < 2; ++ox) {
      const double wx = ox ? dx : 1.0 - dx;
      const double xx = fx + ox;
      if (wx == 0.0 || xx < 0 || xx >= static_cast<double>(w)) continue;
      acc += wy * wx * img[(c * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
    }
  }
  return acc;
}

}  // namespace

Tensor decode_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0) {
    return decode_png(bytes, path);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '2' && bytes[1] <= '6' && bytes[1] != '4') {
    return decode_pnm(bytes, path);
  }
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
      static_cast<unsigned char>(bytes[1]) == 0xD8 && static_cast<unsigned char>(bytes[2]) == 0xFF) {
#ifdef SACN_WITH_JPEG
    return decode_jpeg(bytes, path);
#else
    throw FormatError("jpeg " + path.string() + ": JPEG support not built (configure with -DSACN_WITH_JPEG=ON)");
#endif
  }
  throw FormatError("unsupported image container: " + path.string());
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  std::size_t channels = 0;
  const auto bytes = to_bytes(image, channels);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.dim(2));
  png.height = static_cast<png_uint_32>(image.dim(1));
  png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write png " + path.string() + ": " + png.message);
  }
}

void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  std::size_t channels = 0;
  const auto bytes = to_bytes(image, channels);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (channels == 1 ? "P5" : "P6") << "\n" << image.dim(2) << " " << image.dim(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("error writing " + path.string());
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  check_image(image, "resize_bilinear");
  if (height == 0 || width == 0) throw ShapeError("resize_bilinear: zero target extent");
  const std::size_t c_n = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  Tensor out({c_n, height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double src_y = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(src_y);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = src_y - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double src_x = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(src_x);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = src_x - static_cast<double>(x0);
      for (std::size_t c = 0; c < c_n; ++c) {
        const double* p = image.raw() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bottom = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(c * height + y) * width + x] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

Tensor decode_and_resize(const std::filesystem::path& path, std::size_t height, std::size_t width) {
  return resize_bilinear(decode_image(path), height, width);
}

// ---------------------------------------------------------------------------

const std::vector<AugmentOp>& all_augment_ops() {
  static const std::vector<AugmentOp> ops{AugmentOp::horizontal_flip, AugmentOp::rotate,   AugmentOp::scale,
                                          AugmentOp::crop,            AugmentOp::translate, AugmentOp::contrast,
                                          AugmentOp::noise};
  return ops;
}

std::string_view augment_op_name(AugmentOp op) {
  switch (op) {
    case AugmentOp::horizontal_flip: return "horizontal_flip";
    case AugmentOp::rotate: return "rotate";
    case AugmentOp::scale: return "scale";
    case AugmentOp::crop: return "crop";
    case AugmentOp::translate: return "translate";
    case AugmentOp::contrast: return "contrast";
    case AugmentOp::noise: return "noise";
  }
  return "";
}

AugmentOp parse_augment_op(std::string_view name) {
  for (AugmentOp op : all_augment_ops()) {
    if (augment_op_name(op) == name) return op;
  }
  throw std::invalid_argument("unknown augmentation op '" + std::string(name) + "'");
}

bool AugmentConfig::has(AugmentOp op) const { return std::find(enabled.begin(), enabled.end(), op) != enabled.end(); }

void AugmentConfig::validate() const {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(std::string("augment: ") + msg);
  };
  require(horizontal_flip_prob >= 0.0 && horizontal_flip_prob <= 1.0, "horizontal_flip_prob must be in [0, 1]");
  require(rotation_max_degrees >= 0.0 && rotation_max_degrees <= 180.0, "rotation_max_degrees must be in [0, 180]");
  require(scale_min > 0.0 && scale_min <= scale_max, "need 0 < scale_min <= scale_max");
  require(translate_max >= 0.0 && translate_max < 1.0, "translate_max must be in [0, 1)");
  require(contrast_max >= 0.0 && contrast_max < 1.0, "contrast_max must be in [0, 1)");
  require(noise_sigma >= 0.0, "noise_sigma must be >= 0");
}

Tensor flip_horizontal(const Tensor& image) {
  check_image(image, "flip_horizontal");
  const std::size_t c_n = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = image[(c * h + y) * w + (w - 1 - x)];
    }
  }
  return out;
}

Tensor rotate(const Tensor& image, double degrees) {
  check_image(image, "rotate");
  if (degrees == 0.0) return image;
  const std::size_t c_n = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Inverse map; image y grows downward, so this turns the content
      // counter-clockwise on screen.
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      for (std::size_t c = 0; c < c_n; ++c) out[(c * h + y) * w + x] = sample_zero(image, c, sy, sx);
    }
  }
  return out;
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  check_image(image, "crop");
  const std::size_t c_n = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (height == 0 || width == 0 || top + height > h || left + width > w) {
    throw std::invalid_argument("crop " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                                std::to_string(top) + "," + std::to_string(left) + ") exceeds image " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor out({c_n, height, width});
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      std::copy_n(image.raw() + (c * h + top + y) * w + left, width, out.raw() + (c * height + y) * width);
    }
  }
  return out;
}

Tensor translate(const Tensor& image, long dy, long dx) {
  check_image(image, "translate");
  const long c_n = static_cast<long>(image.dim(0)), h = static_cast<long>(image.dim(1)),
             w = static_cast<long>(image.dim(2));
  Tensor out(image.shape());
  for (long c = 0; c < c_n; ++c) {
    for (long y = 0; y < h; ++y) {
      const long sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (long x = 0; x < w; ++x) {
        const long sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        out[static_cast<std::size_t>((c * h + y) * w + x)] = image[static_cast<std::size_t>((c * h + sy) * w + sx)];
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& config, std::uint64_t seed, std::uint64_t sample,
               std::uint64_t epoch) {
  check_image(image, "augment");
  config.validate();
  Rng rng(derive_seed(seed, sample, epoch));
  Tensor x = image;
  if (config.has(AugmentOp::horizontal_flip) && rng.bernoulli(config.horizontal_flip_prob)) x = flip_horizontal(x);
  if (config.has(AugmentOp::rotate)) {
    x = rotate(x, rng.uniform(-config.rotation_max_degrees, config.rotation_max_degrees));
  }
  if (config.has(AugmentOp::scale)) {
    const double s = config.scale_min == config.scale_max ? config.scale_min
                                                          : rng.uniform(config.scale_min, config.scale_max);
    const auto nh = static_cast<std::size_t>(std::max(1L, std::lround(s * static_cast<double>(x.dim(1)))));
    const auto nw = static_cast<std::size_t>(std::max(1L, std::lround(s * static_cast<double>(x.dim(2)))));
    x = resize_bilinear(x, nh, nw);
  }
  if (config.has(AugmentOp::crop)) {
    const std::size_t ch = config.crop_height ? config.crop_height : image.dim(1);
    const std::size_t cw = config.crop_width ? config.crop_width : image.dim(2);
    if (ch > x.dim(1) || cw > x.dim(2)) {
      throw std::invalid_argument("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) +
                                  " larger than scaled image " + std::to_string(x.dim(1)) + "x" +
                                  std::to_string(x.dim(2)));
    }
    const std::size_t top = static_cast<std::size_t>(rng.below(x.dim(1) - ch + 1));
    const std::size_t left = static_cast<std::size_t>(rng.below(x.dim(2) - cw + 1));
    x = crop(x, top, left, ch, cw);
  }
  if (config.has(AugmentOp::translate)) {
    const double t = config.translate_max;
    const long dy = std::lround(rng.uniform(-t, t) * static_cast<double>(x.dim(1)));
    const long dx = std::lround(rng.uniform(-t, t) * static_cast<double>(x.dim(2)));
    x = translate(x, dy, dx);
  }
  if (config.has(AugmentOp::contrast)) {
    const double factor = 1.0 + rng.uniform(-config.contrast_max, config.contrast_max);
    double mean = 0.0;
    for (double v : x.data()) mean += v;
    mean /= static_cast<double>(x.size());
    for (double& v : x.data()) v = std::clamp(mean + factor * (v - mean), 0.0, 1.0);
  }
  if (config.has(AugmentOp::noise)) {
    for (double& v : x.data()) v = std::clamp(v + config.noise_sigma * rng.normal(), 0.0, 1.0);
  }
  for (double& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

Tensor normalize(const Tensor& image, const NormalizationSpec& spec) {
  check_image(image, "normalize");
  if (image.dim(0) != 3) throw ShapeError("normalize: expected 3 channels, got " + std::to_string(image.dim(0)));
  const std::size_t plane = image.dim(1) * image.dim(2);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(spec.std[c] > 0.0)) throw std::invalid_argument("normalize: std entries must be positive");
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (image[c * plane + i] - spec.mean[c]) / spec.std[c];
  }
  return out;
}

Tensor denormalize(const Tensor& image, const NormalizationSpec& spec) {
  check_image(image, "denormalize");
  if (image.dim(0) != 3) throw ShapeError("denormalize: expected 3 channels, got " + std::to_string(image.dim(0)));
  const std::size_t plane = image.dim(1) * image.dim(2);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = image[c * plane + i] * spec.std[c] + spec.mean[c];
  }
  return out;
}

std::size_t PipelineConfig::effective_load_height() const {
  return load_height ? load_height : static_cast<std::size_t>(std::lround(static_cast<double>(height) * 8.0 / 7.0));
}

std::size_t PipelineConfig::effective_load_width() const {
  return load_width ? load_width : static_cast<std::size_t>(std::lround(static_cast<double>(width) * 8.0 / 7.0));
}

Tensor eval_transform(const Tensor& image, const PipelineConfig& config) {
  return normalize(resize_bilinear(image, config.height, config.width), config.normalization);
}

Tensor train_transform(const Tensor& image, const PipelineConfig& config, std::uint64_t seed, std::uint64_t sample,
                       std::uint64_t epoch) {
  AugmentConfig aug = config.augment;
  aug.crop_height = config.height;
  aug.crop_width = config.width;
  Tensor x = resize_bilinear(image, config.effective_load_height(), config.effective_load_width());
  x = augment(x, aug, seed, sample, epoch);
  x = resize_bilinear(x, config.height, config.width);
  return normalize(x, config.normalization);
}

Tensor eval_transform(const std::filesystem::path& path, const PipelineConfig& config) {
  return eval_transform(decode_image(path), config);
}

Tensor train_transform(const std::filesystem::path& path, const PipelineConfig& config, std::uint64_t seed,
                       std::uint64_t sample, std::uint64_t epoch) {
  return train_transform(decode_image(path), config, seed, sample, epoch);
}

}  // namespace sacn
