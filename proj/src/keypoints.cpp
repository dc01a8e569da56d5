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

#include "keyvol/keypoints.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "keyvol/errors.hpp"

namespace keyvol {

VolumeNetParams VolumeNetParams::init(int num_keypoints, std::mt19937_64& rng, double final_gain) {
  if (num_keypoints < 1) throw ValidationError("volume net needs at least one keypoint");
  const int n = num_keypoints;
  VolumeNetParams p;
  p.layers.push_back(nn::init_conv3d(n, 2 * n, 3, rng));
  p.layers.push_back(nn::init_conv3d(2 * n, 2 * n, 3, rng));
  p.layers.push_back(nn::init_conv3d(2 * n, n, 3, rng, final_gain));
  return p;
}

VolumeNetParams VolumeNetParams::zero_final(int num_keypoints, std::mt19937_64& rng) {
  VolumeNetParams p = init(num_keypoints, rng);
  p.layers.back().weight.fill(0.0);
  p.layers.back().bias.fill(0.0);
  return p;
}

HeatmapVolume volume_net_apply(const FeatureVolume& volume, const VolumeNetParams& params,
                               VolumeNetCache* cache) {
  const Tensor& v = volume.values;
  if (params.layers.empty()) throw ValidationError("volume net has no layers");
  if (v.rank() != 4 || v.dim(0) != params.layers.front().weight.dim(1)) {
    throw ShapeError("volume net expects " + std::to_string(params.layers.front().weight.dim(1)) +
                     " x M x M x M, got " + shape_string(v.shape()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Tensor x = v;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    Tensor y = nn::conv3d(x, params.layers[i], 1);
    if (cache) cache->inputs.push_back(std::move(x));
    if (i + 1 < params.layers.size()) {
      if (cache) cache->pre.push_back(y);
      nn::leaky_relu_(y, params.slope);
    }
    x = std::move(y);
  }
  return {std::move(x), volume.grid};
}

VolumeNetGrads volume_net_backward(const Tensor& grad_logits, const VolumeNetParams& params,
                                   const VolumeNetCache& cache, bool need_input_grad) {
  VolumeNetGrads grads;
  grads.layers.resize(params.layers.size());
  Tensor g = grad_logits;
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    if (i + 1 < params.layers.size()) nn::leaky_relu_backward_(g, cache.pre[i], params.slope);
    const bool want_input = i > 0 || need_input_grad;
    grads.layers[i] = nn::conv3d_backward(g, cache.inputs[i], params.layers[i], 1, want_input);
    if (want_input) g = std::move(grads.layers[i].input);
  }
  if (need_input_grad) grads.input = std::move(g);
  return grads;
}

KeypointSet3D integral_regression(const HeatmapVolume& heatmaps, IntegralCache* cache) {
  const Tensor& h = heatmaps.values;
  const VoxelGrid& grid = heatmaps.grid;
  const auto V = static_cast<std::int64_t>(grid.num_voxels());
  if (h.rank() != 4 || h.dim(1) != grid.resolution || h.dim(2) != grid.resolution ||
      h.dim(3) != grid.resolution) {
    throw ShapeError("heatmaps must be N x M x M x M with M=" + std::to_string(grid.resolution) +
                     ", got " + shape_string(h.shape()));
  }
  const std::int64_t N = h.dim(0);
  const Points3 centers = grid.centers();
  KeypointSet3D out{Points3::Zero(N, 3), grid};
  Tensor probs({N, V});
  for (std::int64_t n = 0; n < N; ++n) {
    const double* src = h.data() + n * V;
    double* p = probs.data() + n * V;
    const double mx = *std::max_element(src, src + V);
    double z = 0.0;
    for (std::int64_t v = 0; v < V; ++v) {
      p[v] = std::exp(src[v] - mx);
      z += p[v];
    }
    Vec3 s = Vec3::Zero();
    for (std::int64_t v = 0; v < V; ++v) {
      p[v] /= z;
      s += p[v] * centers.row(v).transpose();
    }
    out.positions.row(n) = s.transpose();
  }
  if (cache) cache->probabilities = std::move(probs);
  return out;
}

Tensor integral_regression_backward(const Points3& grad_positions, const KeypointSet3D& keypoints,
                                    const IntegralCache& cache) {
  const VoxelGrid& grid = keypoints.grid;
  const auto V = static_cast<std::int64_t>(grid.num_voxels());
  const std::int64_t N = keypoints.positions.rows();
  const std::int64_t M = grid.resolution;
  const Points3 centers = grid.centers();
  Tensor out({N, M, M, M});
  for (std::int64_t n = 0; n < N; ++n) {
    const Vec3 g = grad_positions.row(n).transpose();
    const double gs = g.dot(keypoints.positions.row(n).transpose());
    const double* p = cache.probabilities.data() + n * V;
    double* dst = out.data() + n * V;
    for (std::int64_t v = 0; v < V; ++v) {
      dst[v] = p[v] * (g.dot(centers.row(v).transpose()) - gs);
    }
  }
  return out;
}

nlohmann::json grid_to_json(const VoxelGrid& grid) {
  return {{"resolution", grid.resolution},
          {"lo", {grid.lo.x(), grid.lo.y(), grid.lo.z()}},
          {"hi", {grid.hi.x(), grid.hi.y(), grid.hi.z()}}};
}

VoxelGrid grid_from_json(const nlohmann::json& doc) {
  VoxelGrid g;
  g.resolution = doc.at("resolution").get<int>();
  const auto lo = doc.at("lo").get<std::vector<double>>();
  const auto hi = doc.at("hi").get<std::vector<double>>();
  if (lo.size() != 3 || hi.size() != 3) throw DataError("grid bounds must have three entries");
  g.lo = Vec3(lo[0], lo[1], lo[2]);
  g.hi = Vec3(hi[0], hi[1], hi[2]);
  g.validate();
  return g;
}

nlohmann::json keypoints_to_json(const KeypointSet3D& keypoints) {
  nlohmann::json pts = nlohmann::json::array();
  for (Eigen::Index i = 0; i < keypoints.positions.rows(); ++i) {
    pts.push_back({keypoints.positions(i, 0), keypoints.positions(i, 1), keypoints.positions(i, 2)});
  }
  return {{"format", "keyvol-keypoints"},
          {"format_version", 1},
          {"keypoints", std::move(pts)},
          {"grid", grid_to_json(keypoints.grid)}};
}

KeypointSet3D keypoints_from_json(const nlohmann::json& doc) {
  if (doc.value("format_version", 0) != 1) throw DataError("unsupported keypoint file version");
  KeypointSet3D out;
  out.grid = grid_from_json(doc.at("grid"));
  const auto& pts = doc.at("keypoints");
  out.positions = Points3(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto p = pts[i].get<std::vector<double>>();
    if (p.size() != 3) throw DataError("keypoint " + std::to_string(i) + " does not have three coordinates");
    out.positions.row(static_cast<Eigen::Index>(i)) = Eigen::RowVector3d(p[0], p[1], p[2]);
  }
  return out;
}

}  // namespace keyvol
