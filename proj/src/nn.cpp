// Copyright 2026 The keyvol Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "keyvol/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "keyvol/errors.hpp"
#include "keyvol/tensor_io.hpp"

namespace keyvol {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowConst = Eigen::Map<const RowMat>;

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x6b76u};
  return std::mt19937_64(seq);
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

namespace nn {

void leaky_relu_(Tensor& x, double slope) {
  for (auto& v : x.values()) {
    if (v < 0.0) v *= slope;
  }
}

void leaky_relu_backward_(Tensor& grad, const Tensor& pre, double slope) {
  for (std::size_t i = 0; i < grad.numel(); ++i) {
    if (pre[i] < 0.0) grad[i] *= slope;
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

ConvParams init_conv(Shape weight_shape, int fan_in, std::mt19937_64& rng, double gain) {
  ConvParams p;
  const double stddev = gain * std::sqrt(2.0 / std::max(1, fan_in));
  p.bias = Tensor({weight_shape[0]});
  p.weight = normal_tensor(std::move(weight_shape), stddev, rng);
  return p;
}

struct Geometry2d {
  int cin, h, w, k, stride, pad, ho, wo;
};

Geometry2d geometry2d(const Tensor& input, int k, int stride, int pad) {
  if (input.rank() != 3) throw ShapeError("conv2d input must be C x H x W, got " + shape_string(input.shape()));
  Geometry2d g{static_cast<int>(input.dim(0)), static_cast<int>(input.dim(1)),
               static_cast<int>(input.dim(2)), k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d output would be empty");
  return g;
}

RowMat im2col2d(const Tensor& input, const Geometry2d& g) {
  RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(g.cin) * g.k * g.k,
                             static_cast<Eigen::Index>(g.ho) * g.wo);
  const double* in = input.data();
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols.row((c * g.k + ky) * g.k + kx).data();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = in + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          double* dst = row + static_cast<std::size_t>(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

void col2im2d(const RowMat& cols, const Geometry2d& g, Tensor& grad_input) {
  double* out = grad_input.data();
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = cols.row((c * g.k + ky) * g.k + kx).data();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = out + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          const double* src = row + static_cast<std::size_t>(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct Geometry3d {
  int cin, m, k, pad;  // cubic volumes, stride 1, same-size output
};

Geometry3d geometry3d(const Tensor& input, int k, int pad) {
  if (input.rank() != 4 || input.dim(1) != input.dim(2) || input.dim(2) != input.dim(3)) {
    throw ShapeError("conv3d input must be C x M x M x M, got " + shape_string(input.shape()));
  }
  if (2 * pad != k - 1) throw ShapeError("conv3d supports same padding only");
  return {static_cast<int>(input.dim(0)), static_cast<int>(input.dim(1)), k, pad};
}

void check_conv_params(const ConvParams& conv, int cin, std::size_t spatial_rank) {
  if (conv.weight.rank() != 2 + spatial_rank || conv.weight.dim(1) != cin ||
      conv.bias.numel() != static_cast<std::size_t>(conv.weight.dim(0))) {
    throw ShapeError("conv weight " + shape_string(conv.weight.shape()) + " does not accept " +
                     std::to_string(cin) + " input channels");
  }
}

}  // namespace

ConvParams init_conv2d(int in_channels, int out_channels, int kernel, std::mt19937_64& rng,
                       double gain) {
  return init_conv({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel,
                   rng, gain);
}

ConvParams init_conv3d(int in_channels, int out_channels, int kernel, std::mt19937_64& rng,
                       double gain) {
  return init_conv({out_channels, in_channels, kernel, kernel, kernel},
                   in_channels * kernel * kernel * kernel, rng, gain);
}

namespace {

// Stride-1 2D convolution by shifted products over a zero-padded plane,
// same layout idea as the 3D case below.
struct Padded2d {
  int h, w, ph, pw, ho, wo;
  Eigen::Index span;
  std::vector<Eigen::Index> offsets;
};

Padded2d padded2d(const Geometry2d& g) {
  Padded2d d{g.h, g.w, g.h + 2 * g.pad, g.w + 2 * g.pad, g.ho, g.wo, 0, {}};
  for (int ky = 0; ky < g.k; ++ky) {
    for (int kx = 0; kx < g.k; ++kx) d.offsets.push_back(static_cast<Eigen::Index>(ky) * d.pw + kx);
  }
  d.span = static_cast<Eigen::Index>(g.ho - 1) * d.pw + g.wo;
  return d;
}

RowMat pad_plane(const double* src, int channels, const Padded2d& d, int pad) {
  RowMat out = RowMat::Zero(channels, static_cast<Eigen::Index>(d.ph) * d.pw);
  for (int c = 0; c < channels; ++c) {
    double* dst = out.row(c).data();
    const double* s = src + static_cast<std::size_t>(c) * d.h * d.w;
    for (int y = 0; y < d.h; ++y) {
      std::copy_n(s + static_cast<std::size_t>(y) * d.w, d.w, dst + static_cast<Eigen::Index>(y + pad) * d.pw + pad);
    }
  }
  return out;
}

RowMat tap_weight2d(const ConvParams& conv, int tap, int taps) {
  const Eigen::Index cout = conv.weight.dim(0), cin = conv.weight.dim(1);
  RowMat w(cout, cin);
  for (Eigen::Index o = 0; o < cout; ++o) {
    for (Eigen::Index i = 0; i < cin; ++i) w(o, i) = conv.weight[static_cast<std::size_t>((o * cin + i) * taps + tap)];
  }
  return w;
}

Tensor conv2d_shifted(const Tensor& input, const ConvParams& conv, const Geometry2d& g) {
  const auto cout = conv.weight.dim(0);
  const Padded2d d = padded2d(g);
  const RowMat x = pad_plane(input.data(), g.cin, d, g.pad);
  RowMat acc = RowMat::Zero(cout, d.span);
  const int taps = g.k * g.k;
  for (int t = 0; t < taps; ++t) {
    acc.noalias() += tap_weight2d(conv, t, taps) * x.middleCols(d.offsets[static_cast<std::size_t>(t)], d.span);
  }
  Tensor out({cout, g.ho, g.wo});
  for (Eigen::Index c = 0; c < cout; ++c) {
    const double b = conv.bias[static_cast<std::size_t>(c)];
    for (int y = 0; y < g.ho; ++y) {
      const double* s = acc.row(c).data() + static_cast<Eigen::Index>(y) * d.pw;
      double* o = out.data() + (static_cast<std::size_t>(c) * g.ho + y) * g.wo;
      for (int xx = 0; xx < g.wo; ++xx) o[xx] = s[xx] + b;
    }
  }
  return out;
}

ConvGrads conv2d_shifted_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& conv,
                                  const Geometry2d& g, bool need_input_grad) {
  const auto cout = conv.weight.dim(0);
  const Padded2d d = padded2d(g);
  const RowMat x = pad_plane(input.data(), g.cin, d, g.pad);
  RowMat go = RowMat::Zero(cout, d.span);
  ConvGrads grads;
  grads.bias = Tensor({cout});
  for (Eigen::Index c = 0; c < cout; ++c) {
    double sum = 0.0;
    for (int y = 0; y < g.ho; ++y) {
      const double* s = grad_out.data() + (static_cast<std::size_t>(c) * g.ho + y) * g.wo;
      double* o = go.row(c).data() + static_cast<Eigen::Index>(y) * d.pw;
      for (int xx = 0; xx < g.wo; ++xx) {
        o[xx] = s[xx];
        sum += s[xx];
      }
    }
    grads.bias[static_cast<std::size_t>(c)] = sum;
  }
  const int taps = g.k * g.k;
  grads.weight = Tensor(conv.weight.shape());
  RowMat gx;
  if (need_input_grad) gx = RowMat::Zero(g.cin, x.cols());
  for (int t = 0; t < taps; ++t) {
    const Eigen::Index off = d.offsets[static_cast<std::size_t>(t)];
    const RowMat gw = go * x.middleCols(off, d.span).transpose();
    for (Eigen::Index o = 0; o < cout; ++o) {
      for (Eigen::Index i = 0; i < g.cin; ++i) {
        grads.weight[static_cast<std::size_t>((o * g.cin + i) * taps + t)] = gw(o, i);
      }
    }
    if (need_input_grad) gx.middleCols(off, d.span).noalias() += tap_weight2d(conv, t, taps).transpose() * go;
  }
  if (need_input_grad) {
    grads.input = Tensor(input.shape());
    for (int c = 0; c < g.cin; ++c) {
      for (int y = 0; y < g.h; ++y) {
        std::copy_n(gx.row(c).data() + static_cast<Eigen::Index>(y + g.pad) * d.pw + g.pad, g.w,
                    grads.input.data() + (static_cast<std::size_t>(c) * g.h + y) * g.w);
      }
    }
  }
  return grads;
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvParams& conv, int stride, int pad) {
  const auto g = geometry2d(input, static_cast<int>(conv.weight.dim(2)), stride, pad);
  check_conv_params(conv, g.cin, 2);
  if (stride == 1) return conv2d_shifted(input, conv, g);
  const auto cout = conv.weight.dim(0);
  const RowMat cols = im2col2d(input, g);
  Tensor out({cout, g.ho, g.wo});
  MapRow o(out.data(), cout, static_cast<Eigen::Index>(g.ho) * g.wo);
  MapRowConst w(conv.weight.data(), cout, cols.rows());
  o.noalias() = w * cols;
  for (Eigen::Index c = 0; c < cout; ++c) o.row(c).array() += conv.bias[static_cast<std::size_t>(c)];
  return out;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& conv,
                          int stride, int pad, bool need_input_grad) {
  const auto g = geometry2d(input, static_cast<int>(conv.weight.dim(2)), stride, pad);
  const auto cout = conv.weight.dim(0);
  grad_out.expect_shape({cout, g.ho, g.wo}, "conv2d grad");
  if (stride == 1) return conv2d_shifted_backward(grad_out, input, conv, g, need_input_grad);
  const RowMat cols = im2col2d(input, g);
  MapRowConst go(grad_out.data(), cout, cols.cols());
  ConvGrads grads;
  grads.weight = Tensor(conv.weight.shape());
  MapRow gw(grads.weight.data(), cout, cols.rows());
  gw.noalias() = go * cols.transpose();
  grads.bias = Tensor({cout});
  for (Eigen::Index c = 0; c < cout; ++c) grads.bias[static_cast<std::size_t>(c)] = go.row(c).sum();
  if (need_input_grad) {
    MapRowConst w(conv.weight.data(), cout, cols.rows());
    const RowMat gcols = w.transpose() * go;
    grads.input = Tensor(input.shape());
    col2im2d(gcols, g, grads.input);
  }
  return grads;
}

namespace {

// A same-padded stride-1 conv on a cube is a sum over kernel taps of
// (cout x cin) * (cin x L) products, where the input is zero padded to side
// P and flattened. Output voxel (z, y, x) lives at column z*P*P + y*P + x.
struct Padded3d {
  int m, p, k;
  Eigen::Index span;  // columns computed per tap
  std::vector<Eigen::Index> offsets;
};

Padded3d padded3d(const Geometry3d& g) {
  Padded3d d{g.m, g.m + 2 * g.pad, g.k, 0, {}};
  const Eigen::Index p = d.p;
  for (int kz = 0; kz < g.k; ++kz) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) d.offsets.push_back((kz * p + ky) * p + kx);
    }
  }
  d.span = ((g.m - 1) * p + (g.m - 1)) * p + g.m;
  return d;
}

RowMat pad_volume(const double* src, int channels, const Padded3d& d, int pad) {
  const Eigen::Index p = d.p;
  RowMat out = RowMat::Zero(channels, p * p * p);
  const int m = d.m;
  for (int c = 0; c < channels; ++c) {
    double* dst = out.row(c).data();
    const double* s = src + static_cast<std::size_t>(c) * m * m * m;
    for (int z = 0; z < m; ++z) {
      for (int y = 0; y < m; ++y) {
        std::copy_n(s + (static_cast<std::size_t>(z) * m + y) * m, m,
                    dst + ((z + pad) * p + (y + pad)) * p + pad);
      }
    }
  }
  return out;
}

RowMat tap_weight(const ConvParams& conv, int tap, int taps) {
  const Eigen::Index cout = conv.weight.dim(0), cin = conv.weight.dim(1);
  RowMat w(cout, cin);
  for (Eigen::Index o = 0; o < cout; ++o) {
    for (Eigen::Index i = 0; i < cin; ++i) w(o, i) = conv.weight[static_cast<std::size_t>((o * cin + i) * taps + tap)];
  }
  return w;
}

}  // namespace

Tensor conv3d(const Tensor& input, const ConvParams& conv, int pad) {
  const auto g = geometry3d(input, static_cast<int>(conv.weight.dim(2)), pad);
  check_conv_params(conv, g.cin, 3);
  const auto cout = conv.weight.dim(0);
  const Padded3d d = padded3d(g);
  const RowMat x = pad_volume(input.data(), g.cin, d, pad);
  RowMat acc = RowMat::Zero(cout, d.span);
  const int taps = g.k * g.k * g.k;
  for (int t = 0; t < taps; ++t) {
    acc.noalias() += tap_weight(conv, t, taps) * x.middleCols(d.offsets[static_cast<std::size_t>(t)], d.span);
  }
  const int m = g.m;
  Tensor out({cout, m, m, m});
  for (Eigen::Index c = 0; c < cout; ++c) {
    const double b = conv.bias[static_cast<std::size_t>(c)];
    const double* src = acc.row(c).data();
    double* dst = out.data() + static_cast<std::size_t>(c) * m * m * m;
    for (int z = 0; z < m; ++z) {
      for (int y = 0; y < m; ++y) {
        const double* s = src + (static_cast<Eigen::Index>(z) * d.p + y) * d.p;
        double* o = dst + (static_cast<std::size_t>(z) * m + y) * m;
        for (int xx = 0; xx < m; ++xx) o[xx] = s[xx] + b;
      }
    }
  }
  return out;
}

ConvGrads conv3d_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& conv,
                          int pad, bool need_input_grad) {
  const auto g = geometry3d(input, static_cast<int>(conv.weight.dim(2)), pad);
  const auto cout = conv.weight.dim(0);
  grad_out.expect_shape({cout, g.m, g.m, g.m}, "conv3d grad");
  const Padded3d d = padded3d(g);
  const RowMat x = pad_volume(input.data(), g.cin, d, pad);
  // Output gradient laid out on the padded lattice, zero off the valid voxels.
  const int m = g.m;
  RowMat go = RowMat::Zero(cout, d.span);
  ConvGrads grads;
  grads.bias = Tensor({cout});
  for (Eigen::Index c = 0; c < cout; ++c) {
    const double* src = grad_out.data() + static_cast<std::size_t>(c) * m * m * m;
    double* dst = go.row(c).data();
    double sum = 0.0;
    for (int z = 0; z < m; ++z) {
      for (int y = 0; y < m; ++y) {
        const double* s = src + (static_cast<std::size_t>(z) * m + y) * m;
        double* o = dst + (static_cast<Eigen::Index>(z) * d.p + y) * d.p;
        for (int xx = 0; xx < m; ++xx) {
          o[xx] = s[xx];
          sum += s[xx];
        }
      }
    }
    grads.bias[static_cast<std::size_t>(c)] = sum;
  }
  const int taps = g.k * g.k * g.k;
  grads.weight = Tensor(conv.weight.shape());
  RowMat gx;
  if (need_input_grad) gx = RowMat::Zero(g.cin, x.cols());
  for (int t = 0; t < taps; ++t) {
    const Eigen::Index off = d.offsets[static_cast<std::size_t>(t)];
    const RowMat gw = go * x.middleCols(off, d.span).transpose();
    for (Eigen::Index o = 0; o < cout; ++o) {
      for (Eigen::Index i = 0; i < g.cin; ++i) {
        grads.weight[static_cast<std::size_t>((o * g.cin + i) * taps + t)] = gw(o, i);
      }
    }
    if (need_input_grad) gx.middleCols(off, d.span).noalias() += tap_weight(conv, t, taps).transpose() * go;
  }
  if (need_input_grad) {
    grads.input = Tensor(input.shape());
    const Eigen::Index p = d.p;
    for (int c = 0; c < g.cin; ++c) {
      const double* src = gx.row(c).data();
      double* dst = grads.input.data() + static_cast<std::size_t>(c) * m * m * m;
      for (int z = 0; z < m; ++z) {
        for (int y = 0; y < m; ++y) {
          std::copy_n(src + ((z + pad) * p + (y + pad)) * p + pad, m, dst + (static_cast<std::size_t>(z) * m + y) * m);
        }
      }
    }
  }
  return grads;
}

namespace {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

AxisTaps axis_taps(int in, int out) {
  AxisTaps t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(s));
    t.lo[static_cast<std::size_t>(o)] = lo;
    t.hi[static_cast<std::size_t>(o)] = std::min(lo + 1, in - 1);
    t.frac[static_cast<std::size_t>(o)] = s - lo;
  }
  return t;
}

std::pair<std::size_t, Shape> batch_and_shape(const Shape& shape, int out_h, int out_w) {
  if (shape.size() < 2) throw ShapeError("resize needs at least two axes");
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < shape.size(); ++i) batch *= static_cast<std::size_t>(shape[i]);
  Shape out = shape;
  out[out.size() - 2] = out_h;
  out[out.size() - 1] = out_w;
  return {batch, out};
}

}  // namespace

Tensor resize_bilinear(const Tensor& input, int out_h, int out_w) {
  const auto [batch, out_shape] = batch_and_shape(input.shape(), out_h, out_w);
  const int h = static_cast<int>(input.dim(input.rank() - 2));
  const int w = static_cast<int>(input.dim(input.rank() - 1));
  const AxisTaps ty = axis_taps(h, out_h), tx = axis_taps(w, out_w);
  Tensor out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = input.data() + b * static_cast<std::size_t>(h) * w;
    double* dst = out.data() + b * static_cast<std::size_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = ty.frac[static_cast<std::size_t>(oy)];
      const double* r0 = src + static_cast<std::size_t>(ty.lo[static_cast<std::size_t>(oy)]) * w;
      const double* r1 = src + static_cast<std::size_t>(ty.hi[static_cast<std::size_t>(oy)]) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto xi = static_cast<std::size_t>(ox);
        const double fx = tx.frac[xi];
        const double top = r0[tx.lo[xi]] * (1.0 - fx) + r0[tx.hi[xi]] * fx;
        const double bot = r1[tx.lo[xi]] * (1.0 - fx) + r1[tx.hi[xi]] * fx;
        dst[static_cast<std::size_t>(oy) * out_w + xi] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return out;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, const Shape& input_shape) {
  const int out_h = static_cast<int>(grad_out.dim(grad_out.rank() - 2));
  const int out_w = static_cast<int>(grad_out.dim(grad_out.rank() - 1));
  const auto [batch, out_shape] = batch_and_shape(input_shape, out_h, out_w);
  grad_out.expect_shape(out_shape, "resize_bilinear grad");
  const int h = static_cast<int>(input_shape[input_shape.size() - 2]);
  const int w = static_cast<int>(input_shape[input_shape.size() - 1]);
  const AxisTaps ty = axis_taps(h, out_h), tx = axis_taps(w, out_w);
  Tensor grad(input_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = grad.data() + b * static_cast<std::size_t>(h) * w;
    const double* src = grad_out.data() + b * static_cast<std::size_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = ty.frac[static_cast<std::size_t>(oy)];
      double* r0 = dst + static_cast<std::size_t>(ty.lo[static_cast<std::size_t>(oy)]) * w;
      double* r1 = dst + static_cast<std::size_t>(ty.hi[static_cast<std::size_t>(oy)]) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto xi = static_cast<std::size_t>(ox);
        const double fx = tx.frac[xi];
        const double g = src[static_cast<std::size_t>(oy) * out_w + xi];
        r0[tx.lo[xi]] += g * (1.0 - fy) * (1.0 - fx);
        r0[tx.hi[xi]] += g * (1.0 - fy) * fx;
        r1[tx.lo[xi]] += g * fy * (1.0 - fx);
        r1[tx.hi[xi]] += g * fy * fx;
      }
    }
  }
  return grad;
}

Tensor avg_pool2(const Tensor& input) {
  const int h = static_cast<int>(input.dim(input.rank() - 2));
  const int w = static_cast<int>(input.dim(input.rank() - 1));
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("avg_pool2 needs even spatial size");
  const auto [batch, out_shape] = batch_and_shape(input.shape(), h / 2, w / 2);
  Tensor out(out_shape);
  const int oh = h / 2, ow = w / 2;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = input.data() + b * static_cast<std::size_t>(h) * w;
    double* dst = out.data() + b * static_cast<std::size_t>(oh) * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double* p = src + static_cast<std::size_t>(2 * y) * w + 2 * x;
        dst[static_cast<std::size_t>(y) * ow + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return out;
}

Tensor avg_pool2_backward(const Tensor& grad_out, const Shape& input_shape) {
  const int h = static_cast<int>(input_shape[input_shape.size() - 2]);
  const int w = static_cast<int>(input_shape[input_shape.size() - 1]);
  const int oh = h / 2, ow = w / 2;
  const auto [batch, out_shape] = batch_and_shape(input_shape, oh, ow);
  grad_out.expect_shape(out_shape, "avg_pool2 grad");
  Tensor grad(input_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = grad.data() + b * static_cast<std::size_t>(h) * w;
    const double* src = grad_out.data() + b * static_cast<std::size_t>(oh) * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double g = 0.25 * src[static_cast<std::size_t>(y) * ow + x];
        double* p = dst + static_cast<std::size_t>(2 * y) * w + 2 * x;
        p[0] += g;
        p[1] += g;
        p[w] += g;
        p[w + 1] += g;
      }
    }
  }
  return grad;
}

Tensor upsample_nearest2(const Tensor& input) {
  const int h = static_cast<int>(input.dim(input.rank() - 2));
  const int w = static_cast<int>(input.dim(input.rank() - 1));
  const auto [batch, out_shape] = batch_and_shape(input.shape(), 2 * h, 2 * w);
  Tensor out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = input.data() + b * static_cast<std::size_t>(h) * w;
    double* dst = out.data() + b * static_cast<std::size_t>(4) * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < 2 * w; ++x) {
        dst[static_cast<std::size_t>(y) * 2 * w + x] = src[static_cast<std::size_t>(y / 2) * w + x / 2];
      }
    }
  }
  return out;
}

Tensor upsample_nearest2_backward(const Tensor& grad_out, const Shape& input_shape) {
  const int h = static_cast<int>(input_shape[input_shape.size() - 2]);
  const int w = static_cast<int>(input_shape[input_shape.size() - 1]);
  const auto [batch, out_shape] = batch_and_shape(input_shape, 2 * h, 2 * w);
  grad_out.expect_shape(out_shape, "upsample_nearest2 grad");
  Tensor grad(input_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = grad.data() + b * static_cast<std::size_t>(h) * w;
    const double* src = grad_out.data() + b * static_cast<std::size_t>(4) * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < 2 * w; ++x) {
        dst[static_cast<std::size_t>(y / 2) * w + x / 2] += src[static_cast<std::size_t>(y) * 2 * w + x];
      }
    }
  }
  return grad;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw ShapeError("concat_channels: " + shape_string(sa) + " vs " + shape_string(sb));
  }
  Shape out_shape = sa;
  out_shape[0] += sb[0];
  std::vector<double> values(a.storage());
  values.insert(values.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(out_shape), std::move(values));
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::int64_t channels_a) {
  Shape sa = t.shape(), sb = t.shape();
  sa[0] = channels_a;
  sb[0] = t.dim(0) - channels_a;
  const auto n_a = static_cast<std::ptrdiff_t>(shape_numel(sa));
  std::vector<double> va(t.storage().begin(), t.storage().begin() + n_a);
  std::vector<double> vb(t.storage().begin() + n_a, t.storage().end());
  return {Tensor(std::move(sa), std::move(va)), Tensor(std::move(sb), std::move(vb))};
}

}  // namespace nn

double clip_grad_norm(std::span<const ParamRef> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad->dot(*p.grad);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& p : params) p.grad->scale_(scale);
  }
  return norm;
}

AdamW::AdamW(std::vector<double> group_lrs, Options options)
    : lrs_(std::move(group_lrs)), opt_(options) {}

void AdamW::ensure_state(std::span<const ParamRef> params) {
  if (m_.size() == params.size()) return;
  m_.clear();
  v_.clear();
  for (const auto& p : params) {
    m_.push_back(Tensor::zeros_like(*p.value));
    v_.push_back(Tensor::zeros_like(*p.value));
  }
}

void AdamW::step(std::span<const ParamRef> params) {
  ensure_state(params);
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamRef& p = params[i];
    const double lr = lrs_.at(static_cast<std::size_t>(p.group));
    double* w = p.value->data();
    const double* g = p.grad->data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double decay = 1.0 - lr * opt_.weight_decay;
    for (std::size_t j = 0; j < p.value->numel(); ++j) {
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] = w[j] * decay - lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

void AdamW::save(TensorArchive& archive, std::span<const ParamRef> params) const {
  archive.meta()["adam_steps"] = t_;
  for (std::size_t i = 0; i < params.size() && i < m_.size(); ++i) {
    archive.put("adam_m." + params[i].name, m_[i], DType::kFloat64);
    archive.put("adam_v." + params[i].name, v_[i], DType::kFloat64);
  }
}

void AdamW::load(const TensorArchive& archive, std::span<const ParamRef> params) {
  t_ = archive.meta().value("adam_steps", std::int64_t{0});
  m_.clear();
  v_.clear();
  if (t_ == 0) return;
  for (const auto& p : params) {
    m_.push_back(archive.get("adam_m." + p.name, p.value->shape()));
    v_.push_back(archive.get("adam_v." + p.name, p.value->shape()));
  }
}

}  // namespace keyvol
