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

#include <random>
#include <vector>

#include "json.hpp"

#include "keyvol/lifting.hpp"
#include "keyvol/nn.hpp"

namespace keyvol {

struct HeatmapVolume {
  Tensor values;  // N x M x M x M logits
  VoxelGrid grid;
};

struct KeypointSet3D {
  Points3 positions;  // N x 3
  VoxelGrid grid;

  int size() const { return static_cast<int>(positions.rows()); }
};

struct VolumeNetParams {
  std::vector<nn::ConvParams> layers;  // kernel 3, same padding
  double slope = 0.1;

  int num_keypoints() const { return static_cast<int>(layers.back().weight.dim(0)); }

  // Widths N -> 2N -> 2N -> N. The last layer starts small so the first
  // heatmaps are close to uniform.
  static VolumeNetParams init(int num_keypoints, std::mt19937_64& rng, double final_gain = 0.1);
  // Same shapes, last layer zeroed.
  static VolumeNetParams zero_final(int num_keypoints, std::mt19937_64& rng);
};

struct VolumeNetCache {
  std::vector<Tensor> inputs;  // input of each layer
  std::vector<Tensor> pre;     // pre-activation of each hidden layer
};

struct VolumeNetGrads {
  std::vector<nn::ConvGrads> layers;
  Tensor input;
};

HeatmapVolume volume_net_apply(const FeatureVolume& volume, const VolumeNetParams& params,
                               VolumeNetCache* cache = nullptr);
VolumeNetGrads volume_net_backward(const Tensor& grad_logits, const VolumeNetParams& params,
                                   const VolumeNetCache& cache, bool need_input_grad = true);

struct IntegralCache {
  Tensor probabilities;  // N x M^3 softmax weights
};

KeypointSet3D integral_regression(const HeatmapVolume& heatmaps, IntegralCache* cache = nullptr);
// grad_positions: N x 3. Returns N x M x M x M.
Tensor integral_regression_backward(const Points3& grad_positions, const KeypointSet3D& keypoints,
                                    const IntegralCache& cache);

nlohmann::json keypoints_to_json(const KeypointSet3D& keypoints);
KeypointSet3D keypoints_from_json(const nlohmann::json& doc);

nlohmann::json grid_to_json(const VoxelGrid& grid);
VoxelGrid grid_from_json(const nlohmann::json& doc);

}  // namespace keyvol
