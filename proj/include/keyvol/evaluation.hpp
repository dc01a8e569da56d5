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
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "keyvol/geometry.hpp"

namespace keyvol {

enum class RegressorKind { kLinear, kMlp };

struct RegressorSpec {
  RegressorKind kind = RegressorKind::kLinear;
  std::vector<int> hidden = {50, 50};
  int max_epochs = 200;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double holdout_fraction = 0.1;
  int patience = 20;

  static RegressorSpec linear();
  static RegressorSpec mlp();
  static RegressorSpec parse(const std::string& name);
  nlohmann::json to_json() const;
};

// Flattens frames as [x1 y1 z1 ... xN yN zN].
Eigen::MatrixXd flatten_frames(const std::vector<Points3>& frames);

struct MlpLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

class Regressor {
 public:
  RegressorSpec spec;
  int input_points = 0;
  int output_points = 0;
  Eigen::MatrixXd linear;  // 3N x 3J, used by the linear kind
  Eigen::RowVectorXd x_mean, x_scale, y_mean, y_scale;
  std::vector<MlpLayer> layers;
  int epochs_run = 0;

  Points3 predict(const Points3& keypoints) const;
  Eigen::MatrixXd predict_flat(const Eigen::MatrixXd& x) const;
};

Regressor fit_regressor(const std::vector<Points3>& pred_kps, const std::vector<Points3>& gt_joints,
                        const RegressorSpec& spec, std::uint64_t seed);

double mpjpe(const Points3& pred, const Points3& gt);
double n_mpjpe(const Points3& pred, const Points3& gt);

struct SimilarityAlignment {
  Mat3 rotation = Mat3::Identity();
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();
  bool degenerate = false;

  Points3 apply(const Points3& points) const;
};

// Similarity transform taking pred onto gt in the least-squares sense.
SimilarityAlignment procrustes_align(const Points3& pred, const Points3& gt);
double p_mpjpe(const Points3& pred, const Points3& gt);

struct PoseError {
  double mpjpe = 0.0;
  double n_mpjpe = 0.0;
  double p_mpjpe = 0.0;
};

PoseError pose_errors(const Points3& pred, const Points3& gt);

struct EvaluationReport {
  RegressorSpec spec;
  PoseError mean;
  std::vector<PoseError> per_frame;

  nlohmann::json to_json() const;
};

// Fits on the training pairs and scores the held-out pairs.
EvaluationReport evaluate_regression(const std::vector<Points3>& train_kps,
                                     const std::vector<Points3>& train_gt,
                                     const std::vector<Points3>& test_kps,
                                     const std::vector<Points3>& test_gt, const RegressorSpec& spec,
                                     std::uint64_t seed);

}  // namespace keyvol
