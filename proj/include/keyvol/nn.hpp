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

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "keyvol/tensor.hpp"

namespace keyvol {

class TensorArchive;

// Deterministic generator for a (seed, stream) pair; streams separate
// independent uses of one user-facing seed.
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0);

// Values drawn from N(0, stddev^2).
Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

namespace nn {

// ---- activations -------------------------------------------------------

void leaky_relu_(Tensor& x, double slope);
// grad *= f'(pre) in place, where pre is the pre-activation input.
void leaky_relu_backward_(Tensor& grad, const Tensor& pre, double slope);

double sigmoid(double x);

// ---- convolutions ------------------------------------------------------
//
// 2D tensors are C x H x W, 3D tensors are C x D x H x W. Weights are
// Cout x Cin x k x k (x k). Padding is zero padding.

struct ConvParams {
  Tensor weight;
  Tensor bias;
};

// He-normal weights, zero bias. `gain` scales the standard deviation.
ConvParams init_conv2d(int in_channels, int out_channels, int kernel, std::mt19937_64& rng,
                       double gain = 1.0);
ConvParams init_conv3d(int in_channels, int out_channels, int kernel, std::mt19937_64& rng,
                       double gain = 1.0);

struct ConvGrads {
  Tensor input;  // empty when not requested
  Tensor weight;
  Tensor bias;
};

Tensor conv2d(const Tensor& input, const ConvParams& conv, int stride, int pad);
ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& conv,
                          int stride, int pad, bool need_input_grad = true);

Tensor conv3d(const Tensor& input, const ConvParams& conv, int pad);
ConvGrads conv3d_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& conv,
                          int pad, bool need_input_grad = true);

// ---- resampling --------------------------------------------------------

// Bilinear resize of the two trailing axes with half-pixel centers
// (src = (dst + 0.5) * in / out - 0.5, clamped to the edge). Leading axes
// are treated as a batch. Equal sizes reproduce the input exactly.
Tensor resize_bilinear(const Tensor& input, int out_h, int out_w);
Tensor resize_bilinear_backward(const Tensor& grad_out, const Shape& input_shape);

// 2x2 average pooling and nearest 2x upsampling over trailing axes.
Tensor avg_pool2(const Tensor& input);
Tensor avg_pool2_backward(const Tensor& grad_out, const Shape& input_shape);
Tensor upsample_nearest2(const Tensor& input);
Tensor upsample_nearest2_backward(const Tensor& grad_out, const Shape& input_shape);

// Stack channel-first tensors along axis 0 (all trailing dims equal).
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Inverse: split grad of a concatenation into the first `channels_a` and rest.
std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::int64_t channels_a);

}  // namespace nn

// ---- optimization ------------------------------------------------------

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  int group = 0;
};

// Scales all gradients so that their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(std::span<const ParamRef> params, double max_norm);

/// Adam with decoupled weight decay, one learning rate per parameter group.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(std::vector<double> group_lrs, Options options);

  void step(std::span<const ParamRef> params);
  std::int64_t steps_taken() const { return t_; }

  void save(TensorArchive& archive, std::span<const ParamRef> params) const;
  void load(const TensorArchive& archive, std::span<const ParamRef> params);

 private:
  void ensure_state(std::span<const ParamRef> params);

  std::vector<double> lrs_;
  Options opt_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace keyvol
