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
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "keyvol/geometry.hpp"
#include "keyvol/mesh.hpp"
#include "keyvol/tensor.hpp"

namespace keyvol {

/// Articulated figure made of capsule limbs, one limb per non-root joint
/// (parent -> child). Limb l belongs to the l-th non-root joint in index
/// order.
struct SceneSpec {
  int joint_count = 0;
  std::vector<int> parents;             // parents[root] == -1
  std::vector<Vec3> rest_offsets;       // root: position; others: offset in parent frame
  std::vector<Vec3> hinge_axes;         // per joint; the root axis is the global yaw axis
  std::vector<std::pair<double, double>> joint_angle_ranges;  // radians, per joint
  std::vector<double> limb_radii;       // per limb
  std::uint64_t appearance_seed = 0;

  int limb_count() const { return joint_count > 0 ? joint_count - 1 : 0; }
  int root() const;
  // Child joint of each limb.
  std::vector<int> limb_children() const;

  void validate() const;

  // Six joints: hip (root), chest, head, two hands and a foot.
  static SceneSpec default_figure();

  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& doc);
};

/// One multi-view observation. Images are K x 3 x H x W in [0, 1], masks
/// K x H x W with values exactly 0 or 1, and each optional feature layer is
/// C_l x K x h_l x w_l with h_l, w_l dividing H, W.
struct MultiViewSample {
  Tensor images;
  Tensor masks;
  CameraRig rig;
  std::vector<Tensor> layer_features;
  std::optional<Tensor> ground_truth_joints;  // J x 3, synthetic oracle only
  nlohmann::json meta = nlohmann::json::object();

  int num_views() const { return rig.num_views(); }
  ImageSize image_size() const { return rig.image_size; }
  bool has_features() const { return !layer_features.empty(); }

  // Throws ShapeError/ValidationError when the invariants above fail.
  void validate() const;
};

inline constexpr double kBackgroundColor = 0.0;

// Joint positions for a pose given as per-joint angles.
Points3 pose_joints(const SceneSpec& spec, const std::vector<double>& angles);

// Deterministic for fixed (spec, rig, seed). Renders capsule limbs with
// z-buffering; features are per-limb soft occupancy channels plus a final
// union channel, at full and half resolution.
MultiViewSample synth_generate(const SceneSpec& spec, const CameraRig& rig, std::uint64_t seed);

// Triangle mesh of the capsule figure for the posed joints (tubes with
// spherical caps), for rigging demos and tests.
Mesh figure_mesh(const SceneSpec& spec, const Points3& joints, int segments = 12);

void write_bundle(const MultiViewSample& sample, const std::filesystem::path& dir);
MultiViewSample read_bundle(const std::filesystem::path& dir);

/// A directory of bundles with a `dataset.json` index.
struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::string> samples;  // bundle directory names relative to root
  nlohmann::json info = nlohmann::json::object();

  std::filesystem::path sample_path(std::size_t i) const { return root / samples.at(i); }
};

// Writes `count` synthetic bundles plus `dataset.json`. Sample i uses a seed
// derived from (seed, i). Partially written output is removed on failure.
DatasetIndex generate_dataset(const std::filesystem::path& dir, int count, const SceneSpec& spec,
                              const CameraRig& rig, std::uint64_t seed, bool with_meshes = false);
DatasetIndex read_dataset(const std::filesystem::path& dir);

}  // namespace keyvol
