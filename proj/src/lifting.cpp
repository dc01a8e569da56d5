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

#include "keyvol/lifting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "keyvol/errors.hpp"
#include "keyvol/nn.hpp"

namespace keyvol {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowConst = Eigen::Map<const RowMat>;

Vec3 VoxelGrid::center(int ix, int iy, int iz) const {
  const Vec3 step = (hi - lo) / resolution;
  return lo + Vec3((ix + 0.5) * step.x(), (iy + 0.5) * step.y(), (iz + 0.5) * step.z());
}

Vec3 VoxelGrid::center(std::size_t flat) const {
  const auto m = static_cast<std::size_t>(resolution);
  return center(static_cast<int>(flat % m), static_cast<int>((flat / m) % m),
                static_cast<int>(flat / (m * m)));
}

Points3 VoxelGrid::centers() const {
  Points3 out(static_cast<Eigen::Index>(num_voxels()), 3);
  for (std::size_t i = 0; i < num_voxels(); ++i) out.row(static_cast<Eigen::Index>(i)) = center(i).transpose();
  return out;
}

bool VoxelGrid::contains(const Vec3& p, double tol) const {
  return (p.array() >= lo.array() - tol).all() && (p.array() <= hi.array() + tol).all();
}

void VoxelGrid::validate() const {
  if (resolution < 2) throw ValidationError("voxel grid resolution must be at least 2");
  if (!((hi - lo).array() > 0.0).all()) throw ValidationError("voxel grid bounds are empty");
}

// ---- aggregation ---------------------------------------------------------

AggregatorParams AggregatorParams::init(const std::vector<int>& layer_channels, int out_channels,
                                        ImageSize target, std::mt19937_64& rng) {
  if (layer_channels.empty()) throw ValidationError("aggregator needs at least one layer");
  AggregatorParams p;
  p.target = target;
  const auto L = static_cast<std::int64_t>(layer_channels.size());
  p.layer_weights = Tensor({L}, 1.0 / static_cast<double>(L));
  for (int c : layer_channels) {
    p.bottlenecks.push_back(normal_tensor({out_channels, c}, 1.0 / std::sqrt(std::max(1, c)), rng));
  }
  return p;
}

namespace {

void check_stack(std::span<const Tensor> stack, const AggregatorParams& params) {
  if (static_cast<int>(stack.size()) != params.num_layers()) {
    throw ValidationError("feature stack has " + std::to_string(stack.size()) +
                          " layers, aggregator expects " + std::to_string(params.num_layers()));
  }
  if (params.layer_weights.numel() != stack.size()) {
    throw ShapeError("aggregator layer weight count does not match its bottlenecks");
  }
  for (std::size_t l = 0; l < stack.size(); ++l) {
    const Tensor& f = stack[l];
    if (f.rank() != 4 || f.dim(0) != params.bottlenecks[l].dim(1) || f.dim(1) != stack[0].dim(1)) {
      throw ShapeError("feature layer " + std::to_string(l) + " has shape " + shape_string(f.shape()) +
                       ", bottleneck expects " + std::to_string(params.bottlenecks[l].dim(1)) +
                       " channels");
    }
  }
}

}  // namespace

Tensor aggregate_features(std::span<const Tensor> stack, const AggregatorParams& params,
                          AggregateCache* cache) {
  check_stack(stack, params);
  const std::int64_t K = stack[0].dim(1);
  const int H = params.target.height, W = params.target.width;
  const std::int64_t cout = params.out_channels();
  const Eigen::Index P = K * H * W;
  Tensor out({cout, K, H, W});
  MapRow o(out.data(), cout, P);
  if (cache) {
    cache->upsampled.clear();
    cache->projected.clear();
  }
  for (std::size_t l = 0; l < stack.size(); ++l) {
    Tensor up = nn::resize_bilinear(stack[l], H, W);
    const Tensor& B = params.bottlenecks[l];
    Tensor proj({cout, K, H, W});
    MapRow pr(proj.data(), cout, P);
    pr.noalias() = MapRowConst(B.data(), cout, B.dim(1)) * MapRowConst(up.data(), B.dim(1), P);
    o += params.layer_weights[l] * pr;
    if (cache) {
      cache->upsampled.push_back(std::move(up));
      cache->projected.push_back(std::move(proj));
    }
  }
  return out;
}

AggregatorGrads aggregate_features_backward(const Tensor& grad_out, std::span<const Tensor> stack,
                                            const AggregatorParams& params,
                                            const AggregateCache& cache, bool need_stack_grad) {
  check_stack(stack, params);
  const std::int64_t cout = params.out_channels();
  const Eigen::Index P = static_cast<Eigen::Index>(grad_out.numel()) / cout;
  MapRowConst g(grad_out.data(), cout, P);
  AggregatorGrads grads;
  grads.layer_weights = Tensor({params.num_layers()});
  for (std::size_t l = 0; l < stack.size(); ++l) {
    grads.layer_weights[l] = grad_out.dot(cache.projected[l]);
    const Tensor& B = params.bottlenecks[l];
    const Eigen::Index cin = B.dim(1);
    const double w = params.layer_weights[l];
    Tensor gB(B.shape());
    MapRow(gB.data(), cout, cin).noalias() =
        w * (g * MapRowConst(cache.upsampled[l].data(), cin, P).transpose());
    grads.bottlenecks.push_back(std::move(gB));
    if (need_stack_grad) {
      Tensor gup(cache.upsampled[l].shape());
      MapRow(gup.data(), cin, P).noalias() = w * (MapRowConst(B.data(), cout, cin).transpose() * g);
      grads.stack.push_back(nn::resize_bilinear_backward(gup, stack[l].shape()));
    }
  }
  return grads;
}

// ---- keypoint head -------------------------------------------------------

HeadParams HeadParams::init(int in_channels, int hidden, int num_keypoints, std::mt19937_64& rng) {
  HeadParams p;
  p.w1 = normal_tensor({hidden, in_channels}, std::sqrt(2.0 / in_channels), rng);
  p.b1 = Tensor({hidden});
  p.w2 = normal_tensor({num_keypoints, hidden}, std::sqrt(1.0 / hidden), rng);
  p.b2 = Tensor({num_keypoints});
  return p;
}

HeadParams HeadParams::zeros(int in_channels, int hidden, int num_keypoints) {
  HeadParams p;
  p.w1 = Tensor({hidden, in_channels});
  p.b1 = Tensor({hidden});
  p.w2 = Tensor({num_keypoints, hidden});
  p.b2 = Tensor({num_keypoints});
  return p;
}

Tensor keypoint_head(const Tensor& f_agg, const HeadParams& params, HeadCache* cache) {
  if (f_agg.rank() != 4 || f_agg.dim(0) != params.w1.dim(1)) {
    throw ShapeError("keypoint head expects " + std::to_string(params.w1.dim(1)) +
                     " input channels, got shape " + shape_string(f_agg.shape()));
  }
  const Eigen::Index hidden = params.w1.dim(0), cin = params.w1.dim(1), N = params.w2.dim(0);
  const Eigen::Index P = f_agg.dim(1) * f_agg.dim(2) * f_agg.dim(3);
  Tensor pre({hidden, P});
  MapRow pm(pre.data(), hidden, P);
  pm.noalias() = MapRowConst(params.w1.data(), hidden, cin) * MapRowConst(f_agg.data(), cin, P);
  for (Eigen::Index h = 0; h < hidden; ++h) pm.row(h).array() += params.b1[static_cast<std::size_t>(h)];
  Tensor act = pre;
  nn::leaky_relu_(act, params.slope);
  Tensor out({N, f_agg.dim(1), f_agg.dim(2), f_agg.dim(3)});
  MapRow om(out.data(), N, P);
  om.noalias() = MapRowConst(params.w2.data(), N, hidden) * MapRowConst(act.data(), hidden, P);
  for (Eigen::Index n = 0; n < N; ++n) om.row(n).array() += params.b2[static_cast<std::size_t>(n)];
  if (cache) {
    cache->pre = std::move(pre);
    cache->hidden = std::move(act);
  }
  return out;
}

HeadGrads keypoint_head_backward(const Tensor& grad_out, const Tensor& f_agg,
                                 const HeadParams& params, const HeadCache& cache,
                                 bool need_input_grad) {
  const Eigen::Index hidden = params.w1.dim(0), cin = params.w1.dim(1), N = params.w2.dim(0);
  const Eigen::Index P = f_agg.dim(1) * f_agg.dim(2) * f_agg.dim(3);
  MapRowConst g(grad_out.data(), N, P);
  MapRowConst hid(cache.hidden.data(), hidden, P);
  HeadGrads grads;
  grads.w2 = Tensor(params.w2.shape());
  MapRow(grads.w2.data(), N, hidden).noalias() = g * hid.transpose();
  grads.b2 = Tensor({N});
  for (Eigen::Index n = 0; n < N; ++n) grads.b2[static_cast<std::size_t>(n)] = g.row(n).sum();
  Tensor gpre({hidden, P});
  MapRow(gpre.data(), hidden, P).noalias() = MapRowConst(params.w2.data(), N, hidden).transpose() * g;
  nn::leaky_relu_backward_(gpre, cache.pre, params.slope);
  MapRowConst gp(gpre.data(), hidden, P);
  grads.w1 = Tensor(params.w1.shape());
  MapRow(grads.w1.data(), hidden, cin).noalias() = gp * MapRowConst(f_agg.data(), cin, P).transpose();
  grads.b1 = Tensor({hidden});
  for (Eigen::Index h = 0; h < hidden; ++h) grads.b1[static_cast<std::size_t>(h)] = gp.row(h).sum();
  if (need_input_grad) {
    grads.input = Tensor(f_agg.shape());
    MapRow(grads.input.data(), cin, P).noalias() =
        MapRowConst(params.w1.data(), hidden, cin).transpose() * gp;
  }
  return grads;
}

// ---- unprojection --------------------------------------------------------

namespace {

struct Taps {
  std::array<std::int32_t, 4> index{};
  std::array<double, 4> weight{};
  bool valid = false;
};

Taps bilinear_taps(ImageSize size, double row, double col) {
  Taps t;
  const int h = size.height, w = size.width;
  if (!(row >= 0.0 && row <= h - 1 && col >= 0.0 && col <= w - 1)) return t;
  const int r0 = std::min(static_cast<int>(std::floor(row)), std::max(h - 2, 0));
  const int c0 = std::min(static_cast<int>(std::floor(col)), std::max(w - 2, 0));
  const int r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  const double fr = row - r0, fc = col - c0;
  t.index = {r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1};
  t.weight = {(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc};
  t.valid = true;
  return t;
}

}  // namespace

double bilinear_sample(std::span<const double> image, ImageSize size, double row, double col) {
  const Taps t = bilinear_taps(size, row, col);
  if (!t.valid) return 0.0;
  double v = 0.0;
  for (int i = 0; i < 4; ++i) v += t.weight[static_cast<std::size_t>(i)] * image[static_cast<std::size_t>(t.index[static_cast<std::size_t>(i)])];
  return v;
}

UnprojectionPlan plan_unprojection(const CameraRig& rig, const VoxelGrid& grid,
                                   ImageSize feature_size, double eps_depth) {
  grid.validate();
  UnprojectionPlan plan;
  plan.num_views = rig.num_views();
  plan.feature_size = feature_size;
  plan.grid = grid;
  const std::size_t V = grid.num_voxels();
  const std::size_t total = V * static_cast<std::size_t>(plan.num_views);
  plan.taps.resize(total);
  plan.weights.resize(total);
  plan.valid.assign(total, 0);
  const Points3 centers = grid.centers();
  // Camera pixels are in image units; rescale when features are smaller.
  const double sx = static_cast<double>(feature_size.width) / rig.image_size.width;
  const double sy = static_cast<double>(feature_size.height) / rig.image_size.height;
  for (int k = 0; k < plan.num_views; ++k) {
    const ProjectedPoints proj = project_points(centers, rig.cameras[static_cast<std::size_t>(k)], eps_depth);
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t slot = static_cast<std::size_t>(k) * V + v;
      if (!proj.valid[v] || !(proj.depths(static_cast<Eigen::Index>(v)) > eps_depth)) continue;
      const Vec2 px(proj.pixels(static_cast<Eigen::Index>(v), 0) * sx,
                    proj.pixels(static_cast<Eigen::Index>(v), 1) * sy);
      const Vec2 rc = to_array_index(px, feature_size);
      const Taps t = bilinear_taps(feature_size, rc.x(), rc.y());
      if (!t.valid) continue;
      plan.taps[slot] = t.index;
      plan.weights[slot] = t.weight;
      plan.valid[slot] = 1;
    }
  }
  return plan;
}

Tensor unproject(const Tensor& f_kp, const UnprojectionPlan& plan) {
  if (f_kp.rank() != 4 || f_kp.dim(1) != plan.num_views ||
      f_kp.dim(2) != plan.feature_size.height || f_kp.dim(3) != plan.feature_size.width) {
    throw ShapeError("unproject: features " + shape_string(f_kp.shape()) + " do not match a rig of " +
                     std::to_string(plan.num_views) + " views at " +
                     std::to_string(plan.feature_size.height) + "x" +
                     std::to_string(plan.feature_size.width));
  }
  const std::int64_t N = f_kp.dim(0), K = plan.num_views, M = plan.grid.resolution;
  const std::size_t V = plan.grid.num_voxels();
  const std::size_t plane = static_cast<std::size_t>(plan.feature_size.height) * plan.feature_size.width;
  Tensor out({N, K, M, M, M});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t k = 0; k < K; ++k) {
      const double* img = f_kp.data() + static_cast<std::size_t>(n * K + k) * plane;
      double* dst = out.data() + static_cast<std::size_t>(n * K + k) * V;
      const std::size_t base = static_cast<std::size_t>(k) * V;
      for (std::size_t v = 0; v < V; ++v) {
        if (!plan.valid[base + v]) continue;
        const auto& idx = plan.taps[base + v];
        const auto& w = plan.weights[base + v];
        dst[v] = w[0] * img[idx[0]] + w[1] * img[idx[1]] + w[2] * img[idx[2]] + w[3] * img[idx[3]];
      }
    }
  }
  return out;
}

Tensor unproject(const Tensor& f_kp, const CameraRig& rig, const VoxelGrid& grid) {
  if (f_kp.rank() != 4) throw ShapeError("unproject expects N x K x H x W features");
  return unproject(f_kp, plan_unprojection(rig, grid, {static_cast<int>(f_kp.dim(2)),
                                                       static_cast<int>(f_kp.dim(3))}));
}

Tensor unproject_backward(const Tensor& grad, const UnprojectionPlan& plan) {
  const std::int64_t N = grad.dim(0), K = plan.num_views;
  const std::size_t V = plan.grid.num_voxels();
  const std::size_t plane = static_cast<std::size_t>(plan.feature_size.height) * plan.feature_size.width;
  Tensor out({N, K, plan.feature_size.height, plan.feature_size.width});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t k = 0; k < K; ++k) {
      double* img = out.data() + static_cast<std::size_t>(n * K + k) * plane;
      const double* src = grad.data() + static_cast<std::size_t>(n * K + k) * V;
      const std::size_t base = static_cast<std::size_t>(k) * V;
      for (std::size_t v = 0; v < V; ++v) {
        if (!plan.valid[base + v]) continue;
        const auto& idx = plan.taps[base + v];
        const auto& w = plan.weights[base + v];
        const double g = src[v];
        img[idx[0]] += w[0] * g;
        img[idx[1]] += w[1] * g;
        img[idx[2]] += w[2] * g;
        img[idx[3]] += w[3] * g;
      }
    }
  }
  return out;
}

// ---- view fusion ---------------------------------------------------------

FeatureVolume attention_fuse(const Tensor& per_view, const VoxelGrid& grid, double temperature) {
  if (per_view.rank() != 5 || per_view.dim(2) != grid.resolution) {
    throw ShapeError("attention_fuse expects N x K x M x M x M, got " + shape_string(per_view.shape()));
  }
  if (!(temperature > 0.0)) throw ValidationError("attention temperature must be positive");
  const std::int64_t N = per_view.dim(0), K = per_view.dim(1), M = grid.resolution;
  if (K < 1) throw ShapeError("attention_fuse needs at least one view");
  const std::size_t V = grid.num_voxels();
  FeatureVolume out{Tensor({N, M, M, M}), grid};
  std::vector<double> w(static_cast<std::size_t>(K));
  for (std::int64_t n = 0; n < N; ++n) {
    const double* src = per_view.data() + static_cast<std::size_t>(n * K) * V;
    double* dst = out.values.data() + static_cast<std::size_t>(n) * V;
    for (std::size_t v = 0; v < V; ++v) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < K; ++k) mx = std::max(mx, src[static_cast<std::size_t>(k) * V + v]);
      double z = 0.0;
      for (std::int64_t k = 0; k < K; ++k) {
        w[static_cast<std::size_t>(k)] = std::exp((src[static_cast<std::size_t>(k) * V + v] - mx) / temperature);
        z += w[static_cast<std::size_t>(k)];
      }
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k) acc += w[static_cast<std::size_t>(k)] * src[static_cast<std::size_t>(k) * V + v];
      dst[v] = acc / z;
    }
  }
  return out;
}

Tensor attention_fuse_backward(const Tensor& grad, const Tensor& per_view,
                               const FeatureVolume& fused, double temperature) {
  const std::int64_t N = per_view.dim(0), K = per_view.dim(1);
  const std::size_t V = fused.grid.num_voxels();
  Tensor out(per_view.shape());
  std::vector<double> w(static_cast<std::size_t>(K));
  for (std::int64_t n = 0; n < N; ++n) {
    const double* src = per_view.data() + static_cast<std::size_t>(n * K) * V;
    double* dst = out.data() + static_cast<std::size_t>(n * K) * V;
    const double* g = grad.data() + static_cast<std::size_t>(n) * V;
    const double* fv = fused.values.data() + static_cast<std::size_t>(n) * V;
    for (std::size_t v = 0; v < V; ++v) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < K; ++k) mx = std::max(mx, src[static_cast<std::size_t>(k) * V + v]);
      double z = 0.0;
      for (std::int64_t k = 0; k < K; ++k) {
        w[static_cast<std::size_t>(k)] = std::exp((src[static_cast<std::size_t>(k) * V + v] - mx) / temperature);
        z += w[static_cast<std::size_t>(k)];
      }
      // dV/df_k = w_k (1 + (f_k - V) / T)
      for (std::int64_t k = 0; k < K; ++k) {
        const std::size_t i = static_cast<std::size_t>(k) * V + v;
        const double wk = w[static_cast<std::size_t>(k)] / z;
        dst[i] = g[v] * wk * (1.0 + (src[i] - fv[v]) / temperature);
      }
    }
  }
  return out;
}

}  // namespace keyvol
