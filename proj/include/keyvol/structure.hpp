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
#include <vector>

#include <Eigen/Core>

#include "keyvol/geometry.hpp"
#include "keyvol/tensor.hpp"

namespace keyvol {

using MatX = Eigen::MatrixXd;

// sigmoid((A + A^T) / 2) with a zero diagonal.
MatX adjacency_weights(const MatX& logits);
MatX adjacency_weights_backward(const MatX& grad_weights, const MatX& logits);

double default_sigma_line(ImageSize size);

// Pixel (row, col) sits at continuous coordinate from_array_index((row, col)).
Tensor render_gaussian_line(const Vec2& p, const Vec2& q, ImageSize size, double sigma_line);

struct LineSample {
  double value = 0.0;
  Vec2 grad_p = Vec2::Zero();
  Vec2 grad_q = Vec2::Zero();
};

// Value and gradients at one continuous point u.
LineSample gaussian_line_at(const Vec2& u, const Vec2& p, const Vec2& q, double sigma_line);

struct EdgeMap {
  Tensor values;  // 1 x H x W
  int view = 0;
};

struct EdgeMapCache {
  std::vector<std::int32_t> winner;  // per pixel pair index into `pairs`, -1 when empty
  std::vector<std::pair<int, int>> pairs;
};

EdgeMap render_edge_map(const Points2& kps2d, const std::vector<std::uint8_t>& valid,
                        const MatX& weights, ImageSize size, double sigma_line,
                        EdgeMapCache* cache = nullptr, int view = 0);
EdgeMap render_edge_map(const Points2& kps2d, const MatX& weights, ImageSize size,
                        double sigma_line);

struct EdgeMapGrads {
  Points2 keypoints;  // N x 2
  MatX weights;       // N x N, only i < j entries are filled
};

EdgeMapGrads render_edge_map_backward(const Tensor& grad, const Points2& kps2d,
                                      const MatX& weights, ImageSize size, double sigma_line,
                                      const EdgeMapCache& cache);

}  // namespace keyvol
