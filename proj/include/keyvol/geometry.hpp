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
#include <optional>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

namespace keyvol {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2>;
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;

struct ImageSize {
  int height = 0;
  int width = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

inline constexpr double kDefaultDepthEpsilon = 1e-6;

/// Pinhole camera P = K [R | t].
///
/// Pixels are continuous with the origin at the principal point; with the
/// default zero principal point that is the image center. x grows to the
/// right and y grows downwards. `to_array_index` / `from_array_index`
/// convert to (row, col) coordinates where integer values are pixel centers.
struct CameraProjection {
  Mat3 intrinsics = Mat3::Identity();
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  Mat34 projection = Mat34::Zero();

  // World position of the optical center, -R^T t.
  Vec3 center() const { return -rotation.transpose() * translation; }
};

// Throws ValidationError if `rotation` is not orthonormal with det +1 within
// `tolerance`.
void check_rotation(const Mat3& rotation, double tolerance, const char* what = "rotation");

CameraProjection compose_projection(const Mat3& intrinsics, const Mat3& rotation,
                                    const Vec3& translation);

/// Ordered cameras sharing one image size. View 0 is the input view.
struct CameraRig {
  std::vector<CameraProjection> cameras;
  ImageSize image_size;

  int num_views() const { return static_cast<int>(cameras.size()); }
  const CameraProjection& operator[](std::size_t k) const { return cameras.at(k); }
};

struct ProjectedPoints {
  Points2 pixels;
  Eigen::VectorXd depths;      // third homogeneous coordinate, before division
  std::vector<std::uint8_t> valid;  // 0 where |depth| < eps; pixel is then (0, 0)
};

ProjectedPoints project_points(const Points3& points, const CameraProjection& camera,
                               double eps_depth = kDefaultDepthEpsilon);

// Chain rule through the homogeneous division. Invalid rows get zero gradient.
Points3 project_points_backward(const Points3& points, const CameraProjection& camera,
                                const ProjectedPoints& projected, const Points2& grad_pixels);

// Unit direction (world frame) of the ray through `pixel`.
Vec3 back_project_direction(const CameraProjection& camera, const Vec2& pixel);

// Continuous pixel <-> (row, col) with integer values at pixel centers.
Vec2 to_array_index(const Vec2& pixel, ImageSize size);
Vec2 from_array_index(const Vec2& row_col, ImageSize size);

// Focal length (pixels) for which a half-extent of 1 world unit at the
// orbit radius spans half the image width.
double default_focal(double radius, ImageSize size);

/// Cameras on a circle around the canonical cube, all looking at the origin.
/// Camera k sits at azimuth 360*k/num_views degrees; azimuth 0 is the +z
/// axis, and world +y is up.
CameraRig make_orbit_rig(int num_views, double elevation_deg, double radius, ImageSize size,
                         std::optional<double> focal_px = std::nullopt);

// Per camera: "K", "R" (row-major 3x3) and "t", each as float64 decimal
// strings with 17 significant digits.
nlohmann::json rig_to_json(const CameraRig& rig);
CameraRig rig_from_json(const nlohmann::json& doc);

// Rodrigues rotation from an axis-angle vector.
Mat3 axis_angle_to_matrix(const Vec3& axis_angle);

}  // namespace keyvol
