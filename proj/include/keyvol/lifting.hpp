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

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "keyvol/geometry.hpp"
#include "keyvol/tensor.hpp"

namespace keyvol {

/// M x M x M voxel centers spanning an axis-aligned box, offset half a voxel
/// from the faces. Volumes are stored [channel][z][y][x] with x fastest.
struct VoxelGrid {
  int resolution = 24;
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);

  std::size_t num_voxels() const {
    return static_cast<std::size_t>(resolution) * resolution * resolution;
  }
  Vec3 center(int ix, int iy, int iz) const;
  Vec3 center(std::size_t flat) const;
  Points3 centers() const;
  double diagonal() const { return (hi - lo).norm(); }
  bool contains(const Vec3& p, double tol = 0.0) const;
  void validate() const;
};

// ---- multi-layer feature aggregation -----------------------------------

/// Per-layer scalar weights and 1x1 bottlenecks onto C' channels.
struct AggregatorParams {
  Tensor layer_weights;             // L
  std::vector<Tensor> bottlenecks;  // each C' x C_l
  ImageSize target;

  int num_layers() const { return static_cast<int>(bottlenecks.size()); }
  int out_channels() const { return bottlenecks.empty() ? 0 : static_cast<int>(bottlenecks[0].dim(0)); }

  static AggregatorParams init(const std::vector<int>& layer_channels, int out_channels,
                               ImageSize target, std::mt19937_64& rng);
};

struct AggregateCache {
  std::vector<Tensor> upsampled;  // C_l x K x H x W
  std::vector<Tensor> projected;  // C' x K x H x W, before the layer weight
};

struct AggregatorGrads {
  Tensor layer_weights;
  std::vector<Tensor> bottlenecks;
  std::vector<Tensor> stack;  // empty unless requested
};

// F = sum_l w_l * B_l(upsample(f_l)); inputs C_l x K x h_l x w_l, output
// C' x K x H x W.
Tensor aggregate_features(std::span<const Tensor> stack, const AggregatorParams& params,
                          AggregateCache* cache = nullptr);
AggregatorGrads aggregate_features_backward(const Tensor& grad_out, std::span<const Tensor> stack,
                                            const AggregatorParams& params,
                                            const AggregateCache& cache, bool need_stack_grad);

// ---- keypoint head -------------------------------------------------------

/// Two per-pixel linear layers with a leaky rectifier between them.
struct HeadParams {
  Tensor w1, b1;  // hidden x C', hidden
  Tensor w2, b2;  // N x hidden, N
  double slope = 0.1;

  int num_keypoints() const { return static_cast<int>(w2.dim(0)); }
  static HeadParams init(int in_channels, int hidden, int num_keypoints, std::mt19937_64& rng);
  static HeadParams zeros(int in_channels, int hidden, int num_keypoints);
};

struct HeadCache {
  Tensor pre;     // hidden x (K H W)
  Tensor hidden;  // after the nonlinearity
};

struct HeadGrads {
  Tensor w1, b1, w2, b2;
  Tensor input;
};

// C' x K x H x W -> N x K x H x W.
Tensor keypoint_head(const Tensor& f_agg, const HeadParams& params, HeadCache* cache = nullptr);
HeadGrads keypoint_head_backward(const Tensor& grad_out, const Tensor& f_agg,
                                 const HeadParams& params, const HeadCache& cache,
                                 bool need_input_grad);

// ---- unprojection --------------------------------------------------------

/// Precomputed bilinear taps of every voxel center in every view. Samples
/// that land outside the hull of pixel centers, or whose depth is not above
/// eps, are invalid and read as 0.
struct UnprojectionPlan {
  int num_views = 0;
  ImageSize feature_size;
  VoxelGrid grid;
  std::vector<std::array<std::int32_t, 4>> taps;  // (view, voxel) -> flat pixel indices
  std::vector<std::array<double, 4>> weights;
  std::vector<std::uint8_t> valid;
};

UnprojectionPlan plan_unprojection(const CameraRig& rig, const VoxelGrid& grid,
                                   ImageSize feature_size,
                                   double eps_depth = kDefaultDepthEpsilon);

// N x K x H x W -> N x K x M x M x M.
Tensor unproject(const Tensor& f_kp, const UnprojectionPlan& plan);
Tensor unproject(const Tensor& f_kp, const CameraRig& rig, const VoxelGrid& grid);
Tensor unproject_backward(const Tensor& grad, const UnprojectionPlan& plan);

// Bilinear read at continuous (row, col) with integer values at pixel
// centers; 0 outside [0, h-1] x [0, w-1].
double bilinear_sample(std::span<const double> image, ImageSize size, double row, double col);

// ---- view fusion ---------------------------------------------------------

struct FeatureVolume {
  Tensor values;  // N x M x M x M
  VoxelGrid grid;
};

// Per voxel and channel: weights softmax_k(f_k / temperature), output
// sum_k w_k f_k.
FeatureVolume attention_fuse(const Tensor& per_view, const VoxelGrid& grid, double temperature = 1.0);
Tensor attention_fuse_backward(const Tensor& grad, const Tensor& per_view,
                               const FeatureVolume& fused, double temperature = 1.0);

}  // namespace keyvol
