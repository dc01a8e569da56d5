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
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "keyvol/geometry.hpp"
#include "keyvol/nn.hpp"
#include "keyvol/tensor.hpp"

namespace keyvol::testing {

struct GradCheck {
  int checked = 0;
  int failed = 0;
  double max_rel = 0.0;
  std::string worst;  // description of the worst coordinate

  bool ok(int wanted) const { return failed == 0 && checked >= wanted; }
};

// Central differences on `count` distinct random coordinates of `values`. `loss`
// re-evaluates the scalar objective from the current contents of `values`.
// `admissible(i)` may reject a coordinate, e.g. near a kink.
GradCheck check_gradient(std::span<double> values, std::span<const double> analytic,
                         const std::function<double()>& loss, int count, std::mt19937_64& rng,
                         const std::function<bool(std::size_t)>& admissible = {},
                         double step = 1e-5, double tolerance = 1e-3, double floor = 1e-6);

inline std::span<double> span_of(Tensor& t) { return t.values(); }
inline std::span<const double> span_of(const Tensor& t) { return t.values(); }

template <typename Derived>
std::span<double> span_of(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename Derived>
std::span<const double> span_of(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

// Infinity when the shapes differ.
double max_abs_diff(const Tensor& a, const Tensor& b);
Mat3 random_rotation(std::mt19937_64& rng);
Points3 random_points(int n, std::mt19937_64& rng, double scale = 1.0);

// Direct loops, for checking the fast paths.
Tensor naive_conv2d(const Tensor& input, const nn::ConvParams& conv, int stride, int pad);
Tensor naive_conv3d(const Tensor& input, const nn::ConvParams& conv, int pad);

// Minimum total cost over every labeled spanning tree of the complete graph,
// enumerated through Pruefer sequences.
double brute_force_mst_cost(const Eigen::MatrixXd& costs);

}  // namespace keyvol::testing
