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

#include "keyvol/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "keyvol/errors.hpp"
#include "keyvol/nn.hpp"

namespace keyvol {

RegressorSpec RegressorSpec::linear() { return RegressorSpec{}; }

RegressorSpec RegressorSpec::mlp() {
  RegressorSpec s;
  s.kind = RegressorKind::kMlp;
  return s;
}

RegressorSpec RegressorSpec::parse(const std::string& name) {
  if (name == "linear") return linear();
  if (name == "mlp") return mlp();
  throw ConfigError("unknown regressor '" + name + "' (expected linear or mlp)");
}

nlohmann::json RegressorSpec::to_json() const {
  if (kind == RegressorKind::kLinear) return {{"kind", "linear"}, {"bias", false}};
  return {{"kind", "mlp"},
          {"hidden", hidden},
          {"activation", "relu"},
          {"optimizer", "adam"},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"holdout_fraction", holdout_fraction},
          {"patience", patience}};
}

Eigen::MatrixXd flatten_frames(const std::vector<Points3>& frames) {
  if (frames.empty()) return {};
  const Eigen::Index n = frames.front().rows();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(frames.size()), 3 * n);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].rows() != n) throw ShapeError("frames have differing point counts");
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) out(static_cast<Eigen::Index>(f), 3 * i + c) = frames[f](i, c);
    }
  }
  return out;
}

namespace {

Eigen::MatrixXd relu(const Eigen::MatrixXd& x) { return x.cwiseMax(0.0); }

Eigen::MatrixXd mlp_forward(const std::vector<MlpLayer>& layers, const Eigen::MatrixXd& x,
                            std::vector<Eigen::MatrixXd>* acts) {
  Eigen::MatrixXd h = x;
  if (acts) acts->assign(1, h);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Eigen::MatrixXd z = h * layers[i].weight.transpose();
    z.rowwise() += layers[i].bias.transpose();
    h = i + 1 < layers.size() ? relu(z) : z;
    if (acts) acts->push_back(h);
  }
  return h;
}

struct AdamSlot {
  Eigen::MatrixXd mw, vw;
  Eigen::VectorXd mb, vb;
};

void fit_mlp(Regressor& reg, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, std::uint64_t seed) {
  const RegressorSpec& spec = reg.spec;
  auto rng = make_rng(seed, 11);
  std::vector<int> widths = {static_cast<int>(x.cols())};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(static_cast<int>(y.cols()));
  reg.layers.clear();
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / widths[i]));
    MlpLayer l{Eigen::MatrixXd(widths[i + 1], widths[i]), Eigen::VectorXd::Zero(widths[i + 1])};
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = dist(rng);
    }
    reg.layers.push_back(std::move(l));
  }
  const auto D = static_cast<std::size_t>(x.rows());
  std::vector<std::size_t> order(D);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t j = D; j > 1; --j) std::swap(order[j - 1], order[static_cast<std::size_t>(rng() % j)]);
  auto n_hold = static_cast<std::size_t>(std::floor(spec.holdout_fraction * static_cast<double>(D)));
  if (D - n_hold < 1) n_hold = 0;
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  auto rows = [](const Eigen::MatrixXd& m, const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
    return out;
  };
  const Eigen::MatrixXd xv = rows(x, hold.empty() ? fit : hold);
  const Eigen::MatrixXd yv = rows(y, hold.empty() ? fit : hold);

  std::vector<AdamSlot> adam;
  for (const auto& l : reg.layers) {
    adam.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                    Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                    Eigen::VectorXd::Zero(l.bias.size()), Eigen::VectorXd::Zero(l.bias.size())});
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;
  auto val_loss = [&]() { return (mlp_forward(reg.layers, xv, nullptr) - yv).squaredNorm() / static_cast<double>(yv.size()); };
  double best = val_loss();
  std::vector<MlpLayer> best_layers = reg.layers;
  int since_best = 0;
  reg.epochs_run = 0;
  for (int epoch = 0; epoch < spec.max_epochs; ++epoch) {
    for (std::size_t j = fit.size(); j > 1; --j) std::swap(fit[j - 1], fit[static_cast<std::size_t>(rng() % j)]);
    for (std::size_t start = 0; start < fit.size(); start += static_cast<std::size_t>(spec.batch_size)) {
      const std::size_t end = std::min(fit.size(), start + static_cast<std::size_t>(spec.batch_size));
      const std::vector<std::size_t> idx(fit.begin() + static_cast<std::ptrdiff_t>(start),
                                         fit.begin() + static_cast<std::ptrdiff_t>(end));
      const Eigen::MatrixXd xb = rows(x, idx), yb = rows(y, idx);
      std::vector<Eigen::MatrixXd> acts;
      const Eigen::MatrixXd out = mlp_forward(reg.layers, xb, &acts);
      Eigen::MatrixXd g = 2.0 * (out - yb) / static_cast<double>(yb.size());
      ++t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (std::size_t i = reg.layers.size(); i-- > 0;) {
        const Eigen::MatrixXd gw = g.transpose() * acts[i];
        const Eigen::VectorXd gb = g.colwise().sum().transpose();
        if (i > 0) {
          g = (g * reg.layers[i].weight).cwiseProduct((acts[i].array() > 0.0).cast<double>().matrix());
        }
        AdamSlot& s = adam[i];
        s.mw = b1 * s.mw + (1.0 - b1) * gw;
        s.vw = b2 * s.vw + (1.0 - b2) * gw.cwiseProduct(gw);
        s.mb = b1 * s.mb + (1.0 - b1) * gb;
        s.vb = b2 * s.vb + (1.0 - b2) * gb.cwiseProduct(gb);
        reg.layers[i].weight.array() -=
            spec.learning_rate * (s.mw.array() / c1) / ((s.vw.array() / c2).sqrt() + eps);
        reg.layers[i].bias.array() -=
            spec.learning_rate * (s.mb.array() / c1) / ((s.vb.array() / c2).sqrt() + eps);
      }
    }
    ++reg.epochs_run;
    const double v = val_loss();
    if (v < best) {
      best = v;
      best_layers = reg.layers;
      since_best = 0;
    } else if (++since_best >= spec.patience) {
      break;
    }
  }
  if (spec.max_epochs > 0) reg.layers = std::move(best_layers);
}

}  // namespace

Eigen::MatrixXd Regressor::predict_flat(const Eigen::MatrixXd& x) const {
  if (x.cols() != 3 * input_points) {
    throw ShapeError("regressor expects " + std::to_string(input_points) + " keypoints per frame");
  }
  if (spec.kind == RegressorKind::kLinear) return x * linear;
  Eigen::MatrixXd xs = (x.rowwise() - x_mean).array().rowwise() / x_scale.array();
  Eigen::MatrixXd ys = mlp_forward(layers, xs, nullptr);
  return (ys.array().rowwise() * y_scale.array()).rowwise() + y_mean.array();
}

Points3 Regressor::predict(const Points3& keypoints) const {
  const Eigen::MatrixXd y = predict_flat(flatten_frames({keypoints}));
  Points3 out(output_points, 3);
  for (int j = 0; j < output_points; ++j) {
    for (int c = 0; c < 3; ++c) out(j, c) = y(0, 3 * j + c);
  }
  return out;
}

Regressor fit_regressor(const std::vector<Points3>& pred_kps, const std::vector<Points3>& gt_joints,
                        const RegressorSpec& spec, std::uint64_t seed) {
  if (pred_kps.empty()) throw ValidationError("regressor needs at least one frame");
  if (pred_kps.size() != gt_joints.size()) {
    throw ShapeError("regressor inputs have " + std::to_string(pred_kps.size()) + " frames, targets " +
                     std::to_string(gt_joints.size()));
  }
  const Eigen::MatrixXd x = flatten_frames(pred_kps);
  const Eigen::MatrixXd y = flatten_frames(gt_joints);
  Regressor reg;
  reg.spec = spec;
  reg.input_points = static_cast<int>(pred_kps.front().rows());
  reg.output_points = static_cast<int>(gt_joints.front().rows());
  if (spec.kind == RegressorKind::kLinear) {
    if (x.rows() < x.cols()) {
      spdlog::warn("linear regressor is underdetermined ({} frames, {} inputs); using the minimum-norm solution",
                   x.rows(), x.cols());
    }
    reg.linear = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(x).solve(y);
    return reg;
  }
  auto standardize = [](const Eigen::MatrixXd& m, Eigen::RowVectorXd& mean, Eigen::RowVectorXd& scale) {
    mean = m.colwise().mean();
    scale = ((m.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();
    for (Eigen::Index i = 0; i < scale.size(); ++i) scale(i) = std::max(scale(i), 1e-8);
    return Eigen::MatrixXd((m.rowwise() - mean).array().rowwise() / scale.array());
  };
  const Eigen::MatrixXd xs = standardize(x, reg.x_mean, reg.x_scale);
  const Eigen::MatrixXd ys = standardize(y, reg.y_mean, reg.y_scale);
  fit_mlp(reg, xs, ys, seed);
  return reg;
}

double mpjpe(const Points3& pred, const Points3& gt) {
  if (pred.rows() != gt.rows() || pred.rows() == 0) {
    throw ShapeError("mpjpe: " + std::to_string(pred.rows()) + " vs " + std::to_string(gt.rows()) + " joints");
  }
  return (pred - gt).rowwise().norm().mean();
}

double n_mpjpe(const Points3& pred, const Points3& gt) {
  if (pred.rows() != gt.rows() || pred.rows() == 0) throw ShapeError("n_mpjpe: joint counts differ");
  const Points3 p = pred.rowwise() - pred.colwise().mean();
  const Points3 g = gt.rowwise() - gt.colwise().mean();
  const double pp = p.squaredNorm();
  double s = 0.0;
  if (pp > 0.0) {
    // A negative uniform scale is a point reflection; keep the scale non-negative.
    s = std::max(0.0, (p.array() * g.array()).sum() / pp);
  } else {
    spdlog::debug("n_mpjpe: prediction collapses to a point, using scale 0");
  }
  return mpjpe(s * p, g);
}

Points3 SimilarityAlignment::apply(const Points3& points) const {
  Points3 out = (scale * (points * rotation.transpose())).rowwise() + translation.transpose();
  return out;
}

SimilarityAlignment procrustes_align(const Points3& pred, const Points3& gt) {
  if (pred.rows() != gt.rows() || pred.rows() == 0) throw ShapeError("procrustes: joint counts differ");
  const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
  const Points3 p = pred.rowwise() - mp;
  const Points3 g = gt.rowwise() - mg;
  const Mat3 cov = g.transpose() * p;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  SimilarityAlignment a;
  a.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  const double var = p.squaredNorm();
  a.scale = var > 0.0 ? (sv.asDiagonal() * d).trace() / var : 0.0;
  a.translation = mg.transpose() - a.scale * a.rotation * mp.transpose();
  a.degenerate = !(sv(1) > 1e-12 * std::max(sv(0), 1e-300));
  return a;
}

double p_mpjpe(const Points3& pred, const Points3& gt) {
  return mpjpe(procrustes_align(pred, gt).apply(pred), gt);
}

PoseError pose_errors(const Points3& pred, const Points3& gt) {
  return {mpjpe(pred, gt), n_mpjpe(pred, gt), p_mpjpe(pred, gt)};
}

nlohmann::json EvaluationReport::to_json() const {
  auto quantiles = [&](auto field) {
    std::vector<double> v;
    for (const auto& e : per_frame) v.push_back(field(e));
    std::sort(v.begin(), v.end());
    nlohmann::json q = nlohmann::json::object();
    if (v.empty()) return q;
    for (double p : {0.0, 0.25, 0.5, 0.75, 0.9, 1.0}) {
      const double pos = p * static_cast<double>(v.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, v.size() - 1);
      char key[16];
      std::snprintf(key, sizeof key, "q%02d", static_cast<int>(std::lround(p * 100)));
      q[key] = v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
    }
    return q;
  };
  return {{"regressor", spec.to_json()},
          {"frames", per_frame.size()},
          {"mpjpe", {{"mean", mean.mpjpe}, {"quantiles", quantiles([](const PoseError& e) { return e.mpjpe; })}}},
          {"n_mpjpe", {{"mean", mean.n_mpjpe}, {"quantiles", quantiles([](const PoseError& e) { return e.n_mpjpe; })}}},
          {"p_mpjpe", {{"mean", mean.p_mpjpe}, {"quantiles", quantiles([](const PoseError& e) { return e.p_mpjpe; })}}}};
}

EvaluationReport evaluate_regression(const std::vector<Points3>& train_kps,
                                     const std::vector<Points3>& train_gt,
                                     const std::vector<Points3>& test_kps,
                                     const std::vector<Points3>& test_gt, const RegressorSpec& spec,
                                     std::uint64_t seed) {
  if (test_kps.size() != test_gt.size()) throw ShapeError("test keypoints and joints differ in frame count");
  const Regressor reg = fit_regressor(train_kps, train_gt, spec, seed);
  EvaluationReport report;
  report.spec = spec;
  for (std::size_t i = 0; i < test_kps.size(); ++i) {
    const PoseError e = pose_errors(reg.predict(test_kps[i]), test_gt[i]);
    report.per_frame.push_back(e);
    report.mean.mpjpe += e.mpjpe;
    report.mean.n_mpjpe += e.n_mpjpe;
    report.mean.p_mpjpe += e.p_mpjpe;
  }
  if (!test_kps.empty()) {
    const double n = static_cast<double>(test_kps.size());
    report.mean.mpjpe /= n;
    report.mean.n_mpjpe /= n;
    report.mean.p_mpjpe /= n;
  }
  return report;
}

}  // namespace keyvol
