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

#include <Eigen/Dense>

#include "keyvol/errors.hpp"
#include "keyvol/evaluation.hpp"
#include "testing.hpp"

using namespace keyvol;

namespace {

Points3 similarity(const Points3& p, const Mat3& R, double s, const Vec3& t) {
  Points3 out = (s * (p * R.transpose())).rowwise() + t.transpose();
  return out;
}

Points3 centered(const Points3& p) { return p.rowwise() - p.colwise().mean(); }

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("mpjpe examples") {
  Points3 a(1, 3), b(1, 3);
  a << 0, 0, 0;
  b << 3, 4, 0;
  CHECK(mpjpe(a, b) == 5.0);
  CHECK(mpjpe(b, b) == 0.0);
  Points3 c(2, 3), d(2, 3);
  c << 0, 0, 0, 0, 0, 0;
  d << 0, 0, 0, 10, 0, 0;
  CHECK(mpjpe(c, d) == 5.0);
  CHECK_THROWS_AS(mpjpe(a, c), ValidationError);
  std::mt19937_64 rng(1);
  const Points3 x = testing::random_points(6, rng), y = testing::random_points(6, rng);
  CHECK(mpjpe(x, y) == mpjpe(y, x));
}

TEST_CASE("n_mpjpe") {
  std::mt19937_64 rng(2);
  const Points3 gt = testing::random_points(6, rng);
  CHECK(n_mpjpe(2.0 * gt, gt) < 1e-12);
  CHECK(n_mpjpe(gt, gt) == doctest::Approx(mpjpe(centered(gt), centered(gt))));
  CHECK(n_mpjpe(Points3::Zero(6, 3), gt) == doctest::Approx(mpjpe(Points3::Zero(6, 3), centered(gt))));
  for (int trial = 0; trial < 20; ++trial) {
    const Points3 p = testing::random_points(6, rng), g = testing::random_points(6, rng);
    const double n = n_mpjpe(p, g);
    CHECK(n <= mpjpe(centered(p), centered(g)) + 1e-12);
    // The closed-form scale minimises the squared error, so a sweep can only
    // beat it on the mean distance by a little.
    const Points3 pc = centered(p), gc = centered(g);
    const double s_raw = (pc.array() * gc.array()).sum() / pc.squaredNorm();
    const double s_star = std::max(0.0, s_raw);
    const double span = 2.0 * std::max(std::abs(s_raw), 1.0);
    double best_sq = 1e300;
    for (int i = 0; i <= 400; ++i) best_sq = std::min(best_sq, (span * i / 400.0 * pc - gc).squaredNorm());
    CHECK((s_star * pc - gc).squaredNorm() <= best_sq + 1e-12);
  }
}

TEST_CASE("p_mpjpe") {
  std::mt19937_64 rng(3);
  const Points3 gt = testing::random_points(7, rng);
  CHECK(p_mpjpe(gt, gt) < 1e-12);
  const Points3 moved = similarity(gt, testing::random_rotation(rng), 1.7, Vec3(0.3, -2.0, 1.0));
  CHECK(p_mpjpe(moved, gt) < 1e-9);
  const Points3 pred = testing::random_points(7, rng);
  const double base = p_mpjpe(pred, gt);
  for (int i = 0; i < 20; ++i) {
    std::uniform_real_distribution<double> s(0.2, 3.0);
    const Points3 t = similarity(pred, testing::random_rotation(rng), s(rng), testing::random_points(1, rng).row(0).transpose());
    CHECK(std::abs(p_mpjpe(t, gt) - base) < 1e-9);
  }
  CHECK(std::abs(p_mpjpe(pred, gt) - p_mpjpe(gt, pred)) > 1e-6);
  Points3 line(4, 3);
  line << 0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0;
  CHECK(procrustes_align(line, gt.topRows(4)).degenerate);
  CHECK_FALSE(procrustes_align(pred, gt).degenerate);
}

TEST_CASE("linear regressor") {
  std::mt19937_64 rng(4);
  std::vector<Points3> x, y;
  const Eigen::MatrixXd map = Eigen::MatrixXd::Random(9, 12);
  for (int i = 0; i < 40; ++i) {
    x.push_back(testing::random_points(3, rng));
    Eigen::RowVectorXd flat(9);
    for (int j = 0; j < 3; ++j) flat.segment<3>(3 * j) = x.back().row(j);
    const Eigen::RowVectorXd out = flat * map;
    Points3 t(4, 3);
    for (int j = 0; j < 4; ++j) t.row(j) = out.segment<3>(3 * j);
    y.push_back(t);
  }
  SUBCASE("identity targets") {
    const Regressor r = fit_regressor(x, x, RegressorSpec::linear(), 0);
    double worst = 0;
    for (const auto& p : x) worst = std::max(worst, (r.predict(p) - p).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-8);
  }
  SUBCASE("planted map") {
    const Regressor r = fit_regressor(x, y, RegressorSpec::linear(), 0);
    CHECK((r.linear - map).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("mlp regressor") {
  std::mt19937_64 rng(5);
  std::vector<Points3> x, y;
  for (int i = 0; i < 60; ++i) {
    x.push_back(testing::random_points(3, rng));
    y.push_back(x.back().topRows(2) * 2.0);
  }
  RegressorSpec spec = RegressorSpec::mlp();
  spec.max_epochs = 0;
  const Regressor a = fit_regressor(x, y, spec, 9), b = fit_regressor(x, y, spec, 9);
  CHECK(a.epochs_run == 0);
  CHECK(a.predict(x[0]) == b.predict(x[0]));
  spec.max_epochs = 200;
  const Regressor trained = fit_regressor(x, y, spec, 9);
  double before = 0, after = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    before += mpjpe(a.predict(x[i]), y[i]);
    after += mpjpe(trained.predict(x[i]), y[i]);
  }
  CHECK(after < 0.5 * before);
  CHECK(RegressorSpec::parse("mlp").hidden == std::vector<int>{50, 50});
  CHECK_THROWS_AS(RegressorSpec::parse("svm"), ConfigError);
}

TEST_CASE("alignment residuals are ordered on random pairs") {
  // The alignments are least-squares fits, so the ordering is exact for the
  // summed squared residual. The mean per-joint distance can break it.
  std::mt19937_64 rng(6);
  int violations = 0, metric_violations = 0;
  for (int i = 0; i < 300; ++i) {
    const Points3 pred = testing::random_points(6, rng), gt = testing::random_points(6, rng);
    const Points3 p = pred.rowwise() - pred.colwise().mean();
    const Points3 g = gt.rowwise() - gt.colwise().mean();
    const double s = std::max(0.0, (p.array() * g.array()).sum() / p.squaredNorm());
    const double raw = (pred - gt).squaredNorm();
    const double scaled = (s * p - g).squaredNorm();
    const double aligned = (procrustes_align(pred, gt).apply(pred) - gt).squaredNorm();
    violations += !(aligned <= scaled + 1e-9 && scaled <= raw + 1e-9);
    const PoseError e = pose_errors(pred, gt);
    metric_violations += !(e.p_mpjpe <= e.n_mpjpe + 1e-9 && e.n_mpjpe <= e.mpjpe + 1e-9);
  }
  CHECK(violations == 0);
  MESSAGE("mean-distance ordering violations: " << metric_violations << "/300");
}

TEST_CASE("evaluation report") {
  std::mt19937_64 rng(7);
  std::vector<Points3> kx, ky, tx, ty;
  for (int i = 0; i < 30; ++i) {
    kx.push_back(testing::random_points(4, rng));
    ky.push_back(kx.back().topRows(3));
  }
  for (int i = 0; i < 5; ++i) {
    tx.push_back(testing::random_points(4, rng));
    ty.push_back(tx.back().topRows(3));
  }
  const EvaluationReport rep = evaluate_regression(kx, ky, tx, ty, RegressorSpec::linear(), 0);
  CHECK(rep.per_frame.size() == 5);
  CHECK(rep.mean.mpjpe < 1e-9);
  const auto j = rep.to_json();
  CHECK(j.contains("regressor"));
  CHECK(j["mpjpe"].contains("mean"));
}

}  // TEST_SUITE
