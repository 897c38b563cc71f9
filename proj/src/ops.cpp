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

#include "sacn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace sacn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

bool has_grad(const Var& v) { return v.requires_grad(); }

// Gradient of the output, or nullptr when nothing reached it.
const Tensor* upstream(const Var& out) {
  const Tensor& g = out.node()->grad;
  return g.empty() ? nullptr : &g;
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                     to_string(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t f, kh, kw;
  std::size_t stride, pad;
  std::size_t oh, ow;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// cols has shape (C*KH*KW) x (OH*OW) for one sample.
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const double* plane = x + ch * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((ch * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? plane[iy * static_cast<long>(g.w) + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t p = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    double* plane = dx + ch * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((ch * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            plane[iy * static_cast<long>(g.w) + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

// Splits a shape around `axis` into outer x axis x inner.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i < axis) s.outer *= shape[i];
    else if (i == axis) s.len = shape[i];
    else s.inner *= shape[i];
  }
  return s;
}

}  // namespace

double stable_sigmoid(double z) {
  constexpr double kLow = std::numeric_limits<double>::denorm_min();
  constexpr double kHigh = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  double y;
  if (z >= 0) {
    y = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    y = e / (1.0 + e);
  }
  return std::clamp(y, kLow, kHigh);
}

Var conv2d(Tape& tape, const Var& input, const Var& weight, const std::optional<Var>& bias,
           std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.c) {
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels but weight expects " +
                     std::to_string(weight.dim(1)) + " (weight " + to_string(weight.shape()) + ")");
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " does not fit padded input " +
                     to_string(input.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->dim(0) != g.f)) {
    throw ShapeError("conv2d: bias must have " + std::to_string(g.f) + " entries");
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  Tensor out({g.n, g.f, g.oh, g.ow});
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.f * g.positions();
  ConstMatMap wmat(weight.value().raw(), static_cast<long>(g.f), static_cast<long>(g.patch()));
  std::vector<double> cols(g.pointwise() ? 0 : g.patch() * g.positions());
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* x = input.value().raw() + n * in_stride;
    const double* src = x;
    if (!g.pointwise()) {
      im2col(x, g, cols.data());
      src = cols.data();
    }
    ConstMatMap cmat(src, static_cast<long>(g.patch()), static_cast<long>(g.positions()));
    MatMap omat(out.raw() + n * out_stride, static_cast<long>(g.f), static_cast<long>(g.positions()));
    omat.noalias() = wmat * cmat;
    if (bias) {
      for (std::size_t f = 0; f < g.f; ++f) omat.row(static_cast<long>(f)).array() += bias->value()[f];
    }
  }

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  Var result = tape.make_result(std::move(out), inputs);
  tape.record(result, [input, weight, bias, result, g, in_stride, out_stride] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    ConstMatMap wmat(weight.value().raw(), static_cast<long>(g.f), static_cast<long>(g.patch()));
    std::vector<double> cols(g.pointwise() ? 0 : g.patch() * g.positions());
    std::vector<double> dcols(g.patch() * g.positions());
    for (std::size_t n = 0; n < g.n; ++n) {
      ConstMatMap dmat(dout->raw() + n * out_stride, static_cast<long>(g.f),
                       static_cast<long>(g.positions()));
      if (has_grad(weight)) {
        const double* x = input.value().raw() + n * in_stride;
        const double* src = x;
        if (!g.pointwise()) {
          im2col(x, g, cols.data());
          src = cols.data();
        }
        ConstMatMap cmat(src, static_cast<long>(g.patch()), static_cast<long>(g.positions()));
        MatMap dw(weight.grad_buffer().raw(), static_cast<long>(g.f), static_cast<long>(g.patch()));
        dw.noalias() += dmat * cmat.transpose();
      }
      if (bias && has_grad(*bias)) {
        double* db = bias->grad_buffer().raw();
        for (std::size_t f = 0; f < g.f; ++f) db[f] += dmat.row(static_cast<long>(f)).sum();
      }
      if (has_grad(input)) {
        double* dx = input.grad_buffer().raw() + n * in_stride;
        if (g.pointwise()) {
          MatMap dxm(dx, static_cast<long>(g.c), static_cast<long>(g.positions()));
          dxm.noalias() += wmat.transpose() * dmat;
        } else {
          MatMap dc(dcols.data(), static_cast<long>(g.patch()), static_cast<long>(g.positions()));
          dc.noalias() = wmat.transpose() * dmat;
          col2im(dcols.data(), g, dx);
        }
      }
    }
  });
  return result;
}

Var matmul(Tape& tape, const Var& a, const Var& b) {
  const auto ra = a.value().rank();
  const auto rb = b.value().rank();
  if (ra < 2 || ra > 3 || rb < 2 || rb > 3) {
    throw ShapeError("matmul: operands must be rank 2 or 3, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t ba = ra == 3 ? a.dim(0) : 1;
  const std::size_t bb = rb == 3 ? b.dim(0) : 1;
  if (ba != bb && ba != 1 && bb != 1) {
    throw ShapeError("matmul: batch extents " + std::to_string(ba) + " and " + std::to_string(bb) +
                     " do not broadcast");
  }
  const std::size_t batch = std::max(ba, bb);
  const std::size_t m = a.dim(ra - 2), k = a.dim(ra - 1);
  const std::size_t k2 = b.dim(rb - 2), n = b.dim(rb - 1);
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const bool batched = ra == 3 || rb == 3;
  Tensor out = batched ? Tensor({batch, m, n}) : Tensor({m, n});
  const std::size_t sa = ba == 1 ? 0 : m * k;
  const std::size_t sb = bb == 1 ? 0 : k * n;
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatMap am(a.value().raw() + i * sa, static_cast<long>(m), static_cast<long>(k));
    ConstMatMap bm(b.value().raw() + i * sb, static_cast<long>(k), static_cast<long>(n));
    MatMap om(out.raw() + i * m * n, static_cast<long>(m), static_cast<long>(n));
    om.noalias() = am * bm;
  }
  Var result = tape.make_result(std::move(out), {&a, &b});
  tape.record(result, [a, b, result, batch, m, k, n, sa, sb] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap dm(dout->raw() + i * m * n, static_cast<long>(m), static_cast<long>(n));
      if (has_grad(a)) {
        ConstMatMap bm(b.value().raw() + i * sb, static_cast<long>(k), static_cast<long>(n));
        MatMap da(a.grad_buffer().raw() + i * sa, static_cast<long>(m), static_cast<long>(k));
        da.noalias() += dm * bm.transpose();
      }
      if (has_grad(b)) {
        ConstMatMap am(a.value().raw() + i * sa, static_cast<long>(m), static_cast<long>(k));
        MatMap db(b.grad_buffer().raw() + i * sb, static_cast<long>(k), static_cast<long>(n));
        db.noalias() += am.transpose() * dm;
      }
    }
  });
  return result;
}

Var transpose_last(Tape& tape, const Var& a) {
  const auto r = a.value().rank();
  if (r != 2 && r != 3) throw ShapeError("transpose_last: rank must be 2 or 3");
  const std::size_t batch = r == 3 ? a.dim(0) : 1;
  const std::size_t m = a.dim(r - 2), n = a.dim(r - 1);
  Shape shape = a.shape();
  std::swap(shape[r - 2], shape[r - 1]);
  Tensor out(shape);
  for (std::size_t b = 0; b < batch; ++b) {
    ConstMatMap src(a.value().raw() + b * m * n, static_cast<long>(m), static_cast<long>(n));
    MatMap dst(out.raw() + b * m * n, static_cast<long>(n), static_cast<long>(m));
    dst = src.transpose();
  }
  Var result = tape.make_result(std::move(out), {&a});
  tape.record(result, [a, result, batch, m, n] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMatMap d(dout->raw() + b * m * n, static_cast<long>(n), static_cast<long>(m));
      MatMap da(a.grad_buffer().raw() + b * m * n, static_cast<long>(m), static_cast<long>(n));
      da += d.transpose();
    }
  });
  return result;
}

Var softmax(Tape& tape, const Var& input, std::size_t axis) {
  if (axis >= input.value().rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(input.shape()));
  }
  const AxisSplit s = split_axis(input.shape(), axis);
  Tensor out(input.shape());
  const double* x = input.value().raw();
  double* y = out.raw();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.len; ++i) mx = std::max(mx, x[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(x[base + i * s.inner] - mx);
        y[base + i * s.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t i = 0; i < s.len; ++i) y[base + i * s.inner] *= inv;
    }
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, s] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    const double* y = result.value().raw();
    const double* dy = dout->raw();
    double* dx = input.grad_buffer().raw();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) dot += dy[base + i * s.inner] * y[base + i * s.inner];
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t idx = base + i * s.inner;
          dx[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
  return result;
}

Var sigmoid(Tape& tape, const Var& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(input.value()[i]);
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    Tensor& dx = input.grad_buffer();
    const Tensor& y = result.value();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += (*dout)[i] * y[i] * (1.0 - y[i]);
  });
  return result;
}

namespace {
thread_local KinkMonitor* g_kink_monitor = nullptr;
}  // namespace

KinkMonitor::KinkMonitor() {
  if (g_kink_monitor != nullptr) throw std::logic_error("kink monitors do not nest");
  g_kink_monitor = this;
}

KinkMonitor::~KinkMonitor() { g_kink_monitor = nullptr; }

KinkMonitor* KinkMonitor::active() { return g_kink_monitor; }

Var relu(Tape& tape, const Var& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, input.value()[i]);
  if (KinkMonitor* m = KinkMonitor::active()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      word = (word << 1) | (input.value()[i] > 0.0 ? 1u : 0u);
      if (i % 64 == 63 || i + 1 == out.size()) {
        m->fold(word);
        word = 0;
      }
    }
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    Tensor& dx = input.grad_buffer();
    const Tensor& x = input.value();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (x[i] > 0.0) dx[i] += (*dout)[i];
    }
  });
  return result;
}

Var add(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  Var result = tape.make_result(std::move(out), {&a, &b});
  tape.record(result, [a, b, result] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    if (has_grad(a)) accumulate(a.grad_buffer(), *dout);
    if (has_grad(b)) accumulate(b.grad_buffer(), *dout);
  });
  return result;
}

Var mul(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  Var result = tape.make_result(std::move(out), {&a, &b});
  tape.record(result, [a, b, result] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    if (has_grad(a)) {
      Tensor& da = a.grad_buffer();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += (*dout)[i] * b.value()[i];
    }
    if (has_grad(b)) {
      Tensor& db = b.grad_buffer();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += (*dout)[i] * a.value()[i];
    }
  });
  return result;
}

Var scale(Tape& tape, const Var& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  Var result = tape.make_result(std::move(out), {&a});
  tape.record(result, [a, result, s] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    Tensor& da = a.grad_buffer();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += (*dout)[i] * s;
  });
  return result;
}

Var sum(Tape& tape, const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  Var result = tape.make_result(Tensor::scalar(total), {&a});
  tape.record(result, [a, result] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    const double g = (*dout)[0];
    for (double& v : a.grad_buffer().data()) v += g;
  });
  return result;
}

Var concat(Tape& tape, const std::vector<Var>& inputs, std::size_t axis) {
  if (inputs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = inputs.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& v : inputs) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: " + to_string(s) + " does not match " + to_string(first) +
                       " outside axis " + std::to_string(axis));
    }
    shape[axis] += s[axis];
  }
  const AxisSplit outer = split_axis(shape, axis);
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& v : inputs) {
    offsets.push_back(offset);
    const std::size_t len = v.dim(axis);
    const std::size_t chunk = len * outer.inner;
    for (std::size_t o = 0; o < outer.outer; ++o) {
      std::copy_n(v.value().raw() + o * chunk, chunk,
                  out.raw() + (o * outer.len + offset) * outer.inner);
    }
    offset += len;
  }
  Var result = tape.make_result(std::move(out), inputs);
  tape.record(result, [inputs, result, outer, offsets, axis] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Var& v = inputs[k];
      if (!has_grad(v)) continue;
      const std::size_t chunk = v.dim(axis) * outer.inner;
      double* dx = v.grad_buffer().raw();
      for (std::size_t o = 0; o < outer.outer; ++o) {
        const double* src = dout->raw() + (o * outer.len + offsets[k]) * outer.inner;
        for (std::size_t i = 0; i < chunk; ++i) dx[o * chunk + i] += src[i];
      }
    }
  });
  return result;
}

Var avgpool2d(Tape& tape, const Var& input, std::size_t window, std::size_t stride) {
  require_rank(input, 4, "avgpool2d");
  if (window == 0 || stride == 0) throw ShapeError("avgpool2d: window and stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window > h || window > w) {
    throw ShapeError("avgpool2d: window " + std::to_string(window) + " larger than input " +
                     to_string(input.shape()));
  }
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor out({n, c, oh, ow});
  const double* x = input.value().raw();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < window; ++ky) {
          const double* row = x + (p * h + oy * stride + ky) * w + ox * stride;
          for (std::size_t kx = 0; kx < window; ++kx) acc += row[kx];
        }
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, n, c, h, w, oh, ow, window, stride, inv] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    double* dx = input.grad_buffer().raw();
    for (std::size_t p = 0; p < n * c; ++p) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double g = (*dout)[(p * oh + oy) * ow + ox] * inv;
          for (std::size_t ky = 0; ky < window; ++ky) {
            double* row = dx + (p * h + oy * stride + ky) * w + ox * stride;
            for (std::size_t kx = 0; kx < window; ++kx) row[kx] += g;
          }
        }
      }
    }
  });
  return result;
}

Var global_avgpool(Tape& tape, const Var& input) {
  require_rank(input, 4, "global_avgpool");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  Tensor out({n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += input.value()[p * hw + i];
    out[p] = acc * inv;
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, n, c, hw, inv] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    double* dx = input.grad_buffer().raw();
    for (std::size_t p = 0; p < n * c; ++p) {
      const double g = (*dout)[p] * inv;
      for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] += g;
    }
  });
  return result;
}

Var maxpool2d(Tape& tape, const Var& input, std::size_t window, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "maxpool2d");
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window > h + 2 * padding || window > w + 2 * padding) {
    throw ShapeError("maxpool2d: window larger than padded input");
  }
  const std::size_t oh = (h + 2 * padding - window) / stride + 1;
  const std::size_t ow = (w + 2 * padding - window) / stride + 1;
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const double* x = input.value().raw();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < window; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < window; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t idx = (p * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
            if (x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  if (KinkMonitor* m = KinkMonitor::active()) {
    for (std::size_t idx : argmax) m->fold(idx);
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, argmax = std::move(argmax)] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    double* dx = input.grad_buffer().raw();
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += (*dout)[o];
  });
  return result;
}

Var upsample_nearest(Tape& tape, const Var& input, std::size_t factor, std::size_t out_height,
                     std::size_t out_width) {
  require_rank(input, 4, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  auto src_row = [&](std::size_t y) { return std::min(y / factor, h - 1); };
  auto src_col = [&](std::size_t x) { return std::min(x / factor, w - 1); };
  Tensor out({n, c, out_height, out_width});
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < out_height; ++y) {
      for (std::size_t x = 0; x < out_width; ++x) {
        out[(p * out_height + y) * out_width + x] = input.value()[(p * h + src_row(y)) * w + src_col(x)];
      }
    }
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, n, c, h, w, factor, out_height, out_width] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    double* dx = input.grad_buffer().raw();
    for (std::size_t p = 0; p < n * c; ++p) {
      for (std::size_t y = 0; y < out_height; ++y) {
        const std::size_t sy = std::min(y / factor, h - 1);
        for (std::size_t x = 0; x < out_width; ++x) {
          const std::size_t sx = std::min(x / factor, w - 1);
          dx[(p * h + sy) * w + sx] += (*dout)[(p * out_height + y) * out_width + x];
        }
      }
    }
  });
  return result;
}

Var batchnorm2d(Tape& tape, const Var& input, const Var& gamma, const Var& beta,
                BatchNormState& state, Mode mode, double momentum, double epsilon) {
  require_rank(input, 4, "batchnorm2d");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("batchnorm2d: gamma/beta need " + std::to_string(c) + " entries");
  }
  const std::size_t m = n * hw;
  std::vector<double> mean(c), inv_std(c);
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* x = input.value().raw() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += x[i];
      }
      const double mu = acc / static_cast<double>(m);
      double var = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* x = input.value().raw() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) var += (x[i] - mu) * (x[i] - mu);
      }
      var /= static_cast<double>(m);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + epsilon);
      if (state.initialized()) {
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        state.running_mean[ch] = (1.0 - momentum) * state.running_mean[ch] + momentum * mu;
        state.running_var[ch] = (1.0 - momentum) * state.running_var[ch] + momentum * unbiased;
      }
    }
  } else {
    if (!state.initialized()) throw std::logic_error("batchnorm2d: eval mode with uninitialized running state");
    if (state.running_mean.size() != c) throw ShapeError("batchnorm2d: running state channel mismatch");
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + epsilon);
    }
  }
  Tensor xhat(input.shape());
  Tensor out(input.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      const double g = gamma.value()[ch], be = beta.value()[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (input.value()[base + i] - mean[ch]) * inv_std[ch];
        xhat[base + i] = xh;
        out[base + i] = g * xh + be;
      }
    }
  }
  Var result = tape.make_result(std::move(out), {&input, &gamma, &beta});
  tape.record(result, [input, gamma, beta, result, xhat = std::move(xhat), inv_std, n, c, hw, m, mode] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += (*dout)[base + i];
          sum_dy_xhat += (*dout)[base + i] * xhat[base + i];
        }
      }
      if (has_grad(gamma)) gamma.grad_buffer()[ch] += sum_dy_xhat;
      if (has_grad(beta)) beta.grad_buffer()[ch] += sum_dy;
      if (!has_grad(input)) continue;
      const double g = gamma.value()[ch];
      double* dx = input.grad_buffer().raw();
      if (mode == Mode::train) {
        const double k = g * inv_std[ch] / static_cast<double>(m);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            dx[base + i] += k * (static_cast<double>(m) * (*dout)[base + i] - sum_dy -
                                 xhat[base + i] * sum_dy_xhat);
          }
        }
      } else {
        const double k = g * inv_std[ch];
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) dx[base + i] += k * (*dout)[base + i];
        }
      }
    }
  });
  return result;
}

Var reshape(Tape& tape, const Var& input, Shape shape) {
  Tensor out = input.value().reshaped(std::move(shape));
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += (*dout)[i];
  });
  return result;
}

Var to_positions(Tape& tape, const Var& input) {
  require_rank(input, 4, "to_positions");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  Tensor out({n, hw, c});
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatMap src(input.value().raw() + b * c * hw, static_cast<long>(c), static_cast<long>(hw));
    MatMap dst(out.raw() + b * c * hw, static_cast<long>(hw), static_cast<long>(c));
    dst = src.transpose();
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, n, c, hw] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    for (std::size_t b = 0; b < n; ++b) {
      ConstMatMap d(dout->raw() + b * c * hw, static_cast<long>(hw), static_cast<long>(c));
      MatMap dx(input.grad_buffer().raw() + b * c * hw, static_cast<long>(c), static_cast<long>(hw));
      dx += d.transpose();
    }
  });
  return result;
}

Var from_positions(Tape& tape, const Var& input, std::size_t height, std::size_t width) {
  require_rank(input, 3, "from_positions");
  const std::size_t n = input.dim(0), hw = input.dim(1), c = input.dim(2);
  if (hw != height * width) {
    throw ShapeError("from_positions: " + std::to_string(hw) + " positions do not form " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  Tensor out({n, c, height, width});
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatMap src(input.value().raw() + b * c * hw, static_cast<long>(hw), static_cast<long>(c));
    MatMap dst(out.raw() + b * c * hw, static_cast<long>(c), static_cast<long>(hw));
    dst = src.transpose();
  }
  Var result = tape.make_result(std::move(out), {&input});
  tape.record(result, [input, result, n, c, hw] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    for (std::size_t b = 0; b < n; ++b) {
      ConstMatMap d(dout->raw() + b * c * hw, static_cast<long>(c), static_cast<long>(hw));
      MatMap dx(input.grad_buffer().raw() + b * c * hw, static_cast<long>(hw), static_cast<long>(c));
      dx += d.transpose();
    }
  });
  return result;
}

Var linear(Tape& tape, const Var& input, const Var& weight, const Var& bias) {
  require_rank(input, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const std::size_t n = input.dim(0), c = input.dim(1), f = weight.dim(1);
  if (weight.dim(0) != c) {
    throw ShapeError("linear: input has " + std::to_string(c) + " features, weight " +
                     to_string(weight.shape()));
  }
  if (bias.value().size() != f) throw ShapeError("linear: bias size mismatch");
  Tensor out({n, f});
  ConstMatMap x(input.value().raw(), static_cast<long>(n), static_cast<long>(c));
  ConstMatMap wm(weight.value().raw(), static_cast<long>(c), static_cast<long>(f));
  MatMap o(out.raw(), static_cast<long>(n), static_cast<long>(f));
  o.noalias() = x * wm;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] += bias.value()[j];
  }
  Var result = tape.make_result(std::move(out), {&input, &weight, &bias});
  tape.record(result, [input, weight, bias, result, n, c, f] {
    const Tensor* dout = upstream(result);
    if (!dout) return;
    ConstMatMap d(dout->raw(), static_cast<long>(n), static_cast<long>(f));
    if (has_grad(input)) {
      ConstMatMap wm(weight.value().raw(), static_cast<long>(c), static_cast<long>(f));
      MatMap dx(input.grad_buffer().raw(), static_cast<long>(n), static_cast<long>(c));
      dx.noalias() += d * wm.transpose();
    }
    if (has_grad(weight)) {
      ConstMatMap x(input.value().raw(), static_cast<long>(n), static_cast<long>(c));
      MatMap dw(weight.grad_buffer().raw(), static_cast<long>(c), static_cast<long>(f));
      dw.noalias() += x.transpose() * d;
    }
    if (has_grad(bias)) {
      double* db = bias.grad_buffer().raw();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < f; ++j) db[j] += (*dout)[i * f + j];
      }
    }
  });
  return result;
}

}  // namespace sacn
