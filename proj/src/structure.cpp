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

#include "keyvol/structure.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "keyvol/errors.hpp"
#include "keyvol/nn.hpp"

namespace keyvol {

MatX adjacency_weights(const MatX& logits) {
  if (logits.rows() != logits.cols()) {
    throw ValidationError("adjacency logits must be square, got " + std::to_string(logits.rows()) +
                          "x" + std::to_string(logits.cols()));
  }
  const Eigen::Index n = logits.rows();
  MatX w(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      w(i, j) = i == j ? 0.0 : nn::sigmoid(0.5 * (logits(i, j) + logits(j, i)));
    }
  }
  return w;
}

MatX adjacency_weights_backward(const MatX& grad_weights, const MatX& logits) {
  const Eigen::Index n = logits.rows();
  MatX g = MatX::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double s = nn::sigmoid(0.5 * (logits(i, j) + logits(j, i)));
      g(i, j) = 0.5 * s * (1.0 - s) * (grad_weights(i, j) + grad_weights(j, i));
    }
  }
  return g;
}

double default_sigma_line(ImageSize size) { return 1.5 * size.width / 64.0; }

LineSample gaussian_line_at(const Vec2& u, const Vec2& p, const Vec2& q, double sigma_line) {
  const Vec2 d = q - p;
  const double len2 = d.squaredNorm();
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp((u - p).dot(d) / len2, 0.0, 1.0);
  const Vec2 r = u - (p + t * d);
  const double s2 = sigma_line * sigma_line;
  LineSample out;
  out.value = std::exp(-r.squaredNorm() / (2.0 * s2));
  // The closest-point parameter is stationary, so only the explicit
  // dependence on p and q contributes.
  out.grad_p = out.value * (1.0 - t) / s2 * r;
  out.grad_q = out.value * t / s2 * r;
  return out;
}

Tensor render_gaussian_line(const Vec2& p, const Vec2& q, ImageSize size, double sigma_line) {
  if (!(sigma_line > 0.0)) throw ValidationError("sigma_line must be positive");
  Tensor out({size.height, size.width});
  for (int r = 0; r < size.height; ++r) {
    for (int c = 0; c < size.width; ++c) {
      const Vec2 u = from_array_index(Vec2(r, c), size);
      out[static_cast<std::size_t>(r) * size.width + c] = gaussian_line_at(u, p, q, sigma_line).value;
    }
  }
  return out;
}

EdgeMap render_edge_map(const Points2& kps2d, const std::vector<std::uint8_t>& valid,
                        const MatX& weights, ImageSize size, double sigma_line,
                        EdgeMapCache* cache, int view) {
  if (!(sigma_line > 0.0)) throw ValidationError("sigma_line must be positive");
  const Eigen::Index n = kps2d.rows();
  if (weights.rows() != n || weights.cols() != n) {
    throw ShapeError("edge map weights must be " + std::to_string(n) + "x" + std::to_string(n));
  }
  if (valid.size() != static_cast<std::size_t>(n)) throw ShapeError("edge map validity flags size mismatch");
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (valid[static_cast<std::size_t>(i)] && valid[static_cast<std::size_t>(j)]) pairs.emplace_back(i, j);
    }
  }
  const std::size_t P = static_cast<std::size_t>(size.height) * size.width;
  EdgeMap out{Tensor({1, size.height, size.width}), view};
  std::vector<std::int32_t> winner(P, -1);
  if (pairs.empty()) {
    spdlog::debug("edge map for view {} has fewer than two valid keypoints", view);
  } else {
    for (int r = 0; r < size.height; ++r) {
      for (int c = 0; c < size.width; ++c) {
        const Vec2 u = from_array_index(Vec2(r, c), size);
        double best = -1.0;
        std::int32_t arg = -1;
        for (std::size_t k = 0; k < pairs.size(); ++k) {
          const auto [i, j] = pairs[k];
          const double v = weights(i, j) *
                           gaussian_line_at(u, kps2d.row(i).transpose(), kps2d.row(j).transpose(), sigma_line).value;
          if (v > best) {
            best = v;
            arg = static_cast<std::int32_t>(k);
          }
        }
        const std::size_t idx = static_cast<std::size_t>(r) * size.width + c;
        out.values[idx] = best;
        winner[idx] = arg;
      }
    }
  }
  if (cache) {
    cache->winner = std::move(winner);
    cache->pairs = std::move(pairs);
  }
  return out;
}

EdgeMap render_edge_map(const Points2& kps2d, const MatX& weights, ImageSize size,
                        double sigma_line) {
  return render_edge_map(kps2d, std::vector<std::uint8_t>(static_cast<std::size_t>(kps2d.rows()), 1),
                         weights, size, sigma_line);
}

EdgeMapGrads render_edge_map_backward(const Tensor& grad, const Points2& kps2d,
                                      const MatX& weights, ImageSize size, double sigma_line,
                                      const EdgeMapCache& cache) {
  const Eigen::Index n = kps2d.rows();
  EdgeMapGrads out{Points2::Zero(n, 2), MatX::Zero(n, n)};
  for (int r = 0; r < size.height; ++r) {
    for (int c = 0; c < size.width; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * size.width + c;
      const std::int32_t k = cache.winner[idx];
      const double g = grad[idx];
      if (k < 0 || g == 0.0) continue;
      const auto [i, j] = cache.pairs[static_cast<std::size_t>(k)];
      const Vec2 u = from_array_index(Vec2(r, c), size);
      const LineSample s =
          gaussian_line_at(u, kps2d.row(i).transpose(), kps2d.row(j).transpose(), sigma_line);
      out.weights(i, j) += g * s.value;
      const double w = weights(i, j);
      out.keypoints.row(i) += g * w * s.grad_p.transpose();
      out.keypoints.row(j) += g * w * s.grad_q.transpose();
    }
  }
  return out;
}

}  // namespace keyvol
