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

#include <doctest.h>

#include <cmath>

#include "keyvol/errors.hpp"
#include "keyvol/structure.hpp"
#include "testing.hpp"

using namespace keyvol;

namespace {

Points2 random_pixels(int n, std::mt19937_64& rng, ImageSize size) {
  std::uniform_real_distribution<double> ux(-0.45 * size.width, 0.45 * size.width);
  std::uniform_real_distribution<double> uy(-0.45 * size.height, 0.45 * size.height);
  Points2 p(n, 2);
  for (int i = 0; i < n; ++i) p.row(i) << ux(rng), uy(rng);
  return p;
}

MatX random_weights(int n, std::mt19937_64& rng) {
  MatX logits(n, n);
  std::normal_distribution<double> g(0.0, 1.5);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) logits(i, j) = g(rng);
  }
  return adjacency_weights(logits);
}

double line_value(const Vec2& u, const Vec2& p, const Vec2& q, double sigma) {
  const Vec2 d = q - p;
  const double len2 = d.squaredNorm();
  const double t = len2 > 0 ? std::clamp((u - p).dot(d) / len2, 0.0, 1.0) : 0.0;
  return std::exp(-(u - p - t * d).squaredNorm() / (2 * sigma * sigma));
}

}  // namespace

TEST_SUITE("structure") {

TEST_CASE("adjacency weights") {
  const MatX w = adjacency_weights(MatX::Zero(4, 4));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) CHECK(w(i, j) == (i == j ? 0.0 : 0.5));
  }
  MatX l = MatX::Zero(3, 3);
  l(0, 2) = 20.0;
  l(2, 0) = 20.0;
  const MatX s = adjacency_weights(l);
  CHECK(std::abs(s(0, 2) - s(2, 0)) < 1e-9);
  CHECK(s(0, 2) > 0.9999);
  std::mt19937_64 rng(1);
  MatX r = MatX::Random(5, 5);
  CHECK(adjacency_weights(r) == adjacency_weights(MatX(r.transpose())));
  CHECK_THROWS_AS(adjacency_weights(MatX::Zero(2, 3)), ValidationError);
}

TEST_CASE("adjacency gradient") {
  std::mt19937_64 rng(2);
  MatX logits = MatX::Random(4, 4) * 2.0;
  const MatX probe = MatX::Random(4, 4);
  auto loss = [&] { return (adjacency_weights(logits).array() * probe.array()).sum(); };
  const MatX grad = adjacency_weights_backward(probe, logits);
  auto off_diag = [](std::size_t i) { return i % 5 != 0; };
  CHECK(testing::check_gradient(testing::span_of(logits), testing::span_of(grad), loss, 10, rng, off_diag).ok(10));
}

TEST_CASE("gaussian line values") {
  const ImageSize size{16, 16};
  const Vec2 p(-4.5, 0.5), q(5.5, 0.5);
  const Tensor m = render_gaussian_line(p, q, size, 1.5);
  // (row 8, col 8) is the pixel centre (0.5, 0.5), on the segment.
  CHECK(m.at({8, 8}) == doctest::Approx(1.0));
  const Vec2 off = from_array_index(Vec2(8, 8), size) + Vec2(0.0, 1.5);
  CHECK(gaussian_line_at(off, p, q, 1.5).value == doctest::Approx(std::exp(-0.5)));
  const Tensor blob = render_gaussian_line(p, p, size, 2.0);
  for (int r = 0; r < 16; ++r) {
    for (int c = 0; c < 16; ++c) {
      const Vec2 u = from_array_index(Vec2(r, c), size);
      CHECK(blob.at({r, c}) == doctest::Approx(std::exp(-(u - p).squaredNorm() / 8.0)));
    }
  }
}

TEST_CASE("edge map examples") {
  const ImageSize size{16, 16};
  Points2 k(2, 2);
  k << -3.0, 2.0, 4.0, -1.0;
  MatX w = MatX::Zero(2, 2);
  w(0, 1) = w(1, 0) = 1.0;
  CHECK(render_edge_map(k, w, size, 1.5).values.reshaped({16, 16}) == render_gaussian_line(k.row(0), k.row(1), size, 1.5));
  CHECK(render_edge_map(k, MatX::Zero(2, 2), size, 1.5).values.max_abs() == 0.0);
  const std::vector<std::uint8_t> one_valid{1, 0};
  CHECK(render_edge_map(k, one_valid, w, size, 1.5).values.max_abs() == 0.0);
}

TEST_CASE("edge map equals the brute-force maximum over pairs") {
  std::mt19937_64 rng(3);
  const ImageSize size{16, 16};
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 5;
    const Points2 k = random_pixels(n, rng, size);
    const MatX w = random_weights(n, rng);
    std::vector<std::uint8_t> valid(n, 1);
    valid[static_cast<std::size_t>(trial % n)] = trial % 2;
    const Tensor e = render_edge_map(k, valid, w, size, 1.5).values;
    double wmax = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        if (valid[static_cast<std::size_t>(i)] && valid[static_cast<std::size_t>(j)]) wmax = std::max(wmax, w(i, j));
      }
    }
    for (int r = 0; r < 16; ++r) {
      for (int c = 0; c < 16; ++c) {
        const Vec2 u = from_array_index(Vec2(r, c), size);
        double best = 0.0;
        for (int i = 0; i < n; ++i) {
          for (int j = i + 1; j < n; ++j) {
            if (!valid[static_cast<std::size_t>(i)] || !valid[static_cast<std::size_t>(j)]) continue;
            best = std::max(best, w(i, j) * line_value(u, k.row(i), k.row(j), 1.5));
          }
        }
        const double v = e.at({0, r, c});
        CHECK(v == doctest::Approx(best).epsilon(1e-12));
        CHECK(v <= wmax + 1e-15);
      }
    }
  }
}

TEST_CASE("edge map permutation invariance and monotonicity") {
  std::mt19937_64 rng(4);
  const ImageSize size{20, 20};
  const Points2 k = random_pixels(6, rng, size);
  const MatX w = random_weights(6, rng);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Points2 kp(6, 2);
  MatX wp(6, 6);
  for (int i = 0; i < 6; ++i) {
    kp.row(i) = k.row(perm[static_cast<std::size_t>(i)]);
    for (int j = 0; j < 6; ++j) wp(i, j) = w(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  const Tensor a = render_edge_map(k, w, size, 1.5).values;
  CHECK(testing::max_abs_diff(render_edge_map(kp, wp, size, 1.5).values, a) < 1e-12);
  MatX up = w;
  up(1, 4) = up(4, 1) = std::min(1.0, w(1, 4) + 0.3);
  const Tensor b = render_edge_map(k, up, size, 1.5).values;
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(b[i] >= a[i]);
}

TEST_CASE("edge map gradients away from winner switches") {
  std::mt19937_64 rng(5);
  const ImageSize size{16, 16};
  Points2 k = random_pixels(5, rng, size);
  MatX w = random_weights(5, rng);
  const std::vector<std::uint8_t> valid(5, 1);
  const Tensor probe = testing::random_tensor({1, 16, 16}, rng);
  auto loss = [&] { return render_edge_map(k, valid, w, size, 1.5).values.dot(probe); };
  EdgeMapCache cache;
  render_edge_map(k, valid, w, size, 1.5, &cache);
  const EdgeMapGrads g = render_edge_map_backward(probe, k, w, size, 1.5, cache);
  auto stable = [&](std::span<double> values, std::size_t i) {
    const double saved = values[i];
    bool same = true;
    for (double h : {1e-5, -1e-5}) {
      values[i] = saved + h;
      EdgeMapCache c;
      render_edge_map(k, valid, w, size, 1.5, &c);
      same = same && c.winner == cache.winner;
    }
    values[i] = saved;
    return same;
  };
  auto ks = testing::span_of(k);
  const auto rk = testing::check_gradient(ks, testing::span_of(g.keypoints), loss, 10, rng,
                                          [&](std::size_t i) { return stable(ks, i); });
  CHECK_MESSAGE(rk.ok(10), rk.worst);
  auto ws = testing::span_of(w);
  // Only the upper triangle is a free parameter here; keep w symmetric by hand.
  auto wloss = [&] {
    MatX sym = w.triangularView<Eigen::StrictlyUpper>();
    sym += MatX(sym.transpose());
    return render_edge_map(k, valid, sym, size, 1.5).values.dot(probe);
  };
  auto upper = [&](std::size_t i) { return static_cast<Eigen::Index>(i) / 5 > static_cast<Eigen::Index>(i) % 5 && stable(ws, i); };
  const auto rw = testing::check_gradient(ws, testing::span_of(g.weights), wloss, 5, rng, upper);
  CHECK_MESSAGE(rw.ok(5), rw.worst);
}

}  // TEST_SUITE
