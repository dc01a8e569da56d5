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

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "keyvol/geometry.hpp"
#include "keyvol/mesh.hpp"

namespace keyvol {

using MatX = Eigen::MatrixXd;

struct UndirectedTree {
  int num_nodes = 0;
  std::vector<std::pair<int, int>> edges;  // i < j
};

// c_ij = d_ij / d_max + (1 - a_ij); falls back to 1 - a_ij when d_max is 0.
MatX mst_costs(const Points3& keypoints, const MatX& adjacency);
double tree_cost(const UndirectedTree& tree, const MatX& costs);
UndirectedTree build_mst(const Points3& keypoints, const MatX& adjacency);

struct Skeleton {
  Points3 joints;
  std::vector<std::pair<int, int>> edges;  // (parent, child), breadth-first from root
  int root = 0;

  int num_edges() const { return static_cast<int>(edges.size()); }
  // Index of the edge ending at each joint, -1 for the root.
  std::vector<int> incoming_edge() const;
  void validate() const;
};

// Root defaults to the joint with the largest adjacency row sum, lowest index on ties.
Skeleton orient_tree(const UndirectedTree& tree, const Points3& joints, const MatX& adjacency,
                     std::optional<int> root = std::nullopt);

double point_segment_distance(const Vec3& v, const Vec3& a, const Vec3& b);
double default_skinning_sigma(const Skeleton& skeleton);

// V x (N-1), rows normalized Gaussians of the point-to-edge distance.
MatX skinning_weights(const Mesh& mesh, const Skeleton& skeleton, double sigma, double alpha);

struct RigidTransform {
  Mat3 linear = Mat3::Identity();
  Vec3 offset = Vec3::Zero();
  Vec3 apply(const Vec3& v) const { return linear * v + offset; }
};

// Per-edge transforms composed from the root down.
std::vector<RigidTransform> forward_kinematics(const Skeleton& skeleton,
                                               const std::vector<Mat3>& rotations);

Points3 lbs_deform(const Mesh& mesh, const Skeleton& skeleton, const std::vector<Mat3>& rotations,
                   const MatX& weights);

// {"format": "keyvol-pose", "format_version": 1,
//  "rotations": [{"edge": l, "axis_angle": [x, y, z]}, ...]}; missing edges are identity.
std::vector<Mat3> pose_from_json(const nlohmann::json& doc, int num_edges);
nlohmann::json pose_to_json(const std::vector<Vec3>& axis_angles);

struct RigBundle {
  static constexpr int kFormatVersion = 1;

  Mesh mesh;
  Skeleton skeleton;
  MatX weights;    // V x (N-1)
  Points3 keypoints;
  MatX adjacency;  // N x N
  double sigma = 0.0;
  double alpha = 1.0;

  // Throws ValidationError naming the violated invariant.
  void validate() const;
};

RigBundle make_rig(const Mesh& mesh, const Points3& keypoints, const MatX& adjacency,
                   std::optional<double> sigma = std::nullopt, double alpha = 1.0,
                   std::optional<int> root = std::nullopt);

void export_rig_bundle(const RigBundle& bundle, const std::filesystem::path& dir);
RigBundle import_rig_bundle(const std::filesystem::path& dir);

}  // namespace keyvol
