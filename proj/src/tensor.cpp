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

#include "sacn/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace sacn {

namespace {

constexpr char kTensorMagic[4] = {'S', 'A', 'T', 'N'};
constexpr std::uint32_t kTensorVersion = 1;

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > Tensor::kMaxRank) {
    throw ShapeError("tensor rank must be in [1, 4], got " + std::to_string(shape.size()));
  }
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
  }
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_shape(shape_);
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t i, std::size_t j) {
  if (rank() != 2 || i >= shape_[0] || j >= shape_[1]) throw std::out_of_range("Tensor::at(i, j)");
  return data_[i * shape_[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  return const_cast<Tensor*>(this)->at(i, j);
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (rank() != 4 || n >= shape_[0] || c >= shape_[1] || h >= shape_[2] || w >= shape_[3]) {
    throw std::out_of_range("Tensor::at(n, c, h, w)");
  }
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  return const_cast<Tensor*>(this)->at(n, c, h, w);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {
template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}
}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("unexpected end of stream");
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v;
  read_exact(in, reinterpret_cast<char*>(&v), sizeof v);
  return to_little(v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v;
  read_exact(in, reinterpret_cast<char*>(&v), sizeof v);
  return to_little(v);
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

}  // namespace io

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  io::write_u32(out, kTensorVersion);
  io::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::write_u64(out, e);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * 8));
  } else {
    for (double v : t.data()) io::write_f64(out, v);
  }
  if (!out) throw FormatError("failed to write tensor");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  io::read_exact(in, magic, 4);
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  auto version = io::read_u32(in);
  if (version != kTensorVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  auto rank = io::read_u32(in);
  if (rank == 0 || rank > Tensor::kMaxRank) throw FormatError("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    auto v = io::read_u64(in);
    if (v == 0 || v > (std::uint64_t{1} << 40)) throw FormatError("bad tensor extent");
    e = static_cast<std::size_t>(v);
    count *= v;
    if (count > (std::uint64_t{1} << 40)) throw FormatError("tensor too large");
  }
  std::vector<double> values(static_cast<std::size_t>(count));
  if constexpr (std::endian::native == std::endian::little) {
    io::read_exact(in, reinterpret_cast<char*>(values.data()), values.size() * 8);
  } else {
    for (auto& v : values) v = io::read_f64(in);
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace sacn
