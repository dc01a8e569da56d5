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

#include "keyvol/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>

#include <Eigen/Geometry>

#include "keyvol/errors.hpp"

namespace keyvol {
using nlohmann::json;

void check_rotation(const Mat3& rotation, double tolerance, const char* what) {
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
  const double det = rotation.determinant();
  if (!rotation.allFinite() || ortho > tolerance || std::abs(det - 1.0) > tolerance) {
    throw ValidationError(std::string(what) + " is not a proper rotation: ||R^T R - I|| = " +
                          std::to_string(ortho) + ", det = " + std::to_string(det));
  }
}

CameraProjection compose_projection(const Mat3& intrinsics, const Mat3& rotation,
                                    const Vec3& translation) {
  check_rotation(rotation, 1e-5);
  CameraProjection cam;
  cam.intrinsics = intrinsics;
  cam.rotation = rotation;
  cam.translation = translation;
  Mat34 extrinsics;
  extrinsics.leftCols<3>() = rotation;
  extrinsics.col(3) = translation;
  cam.projection = intrinsics * extrinsics;
  return cam;
}

ProjectedPoints project_points(const Points3& points, const CameraProjection& camera,
                               double eps_depth) {
  const auto n = points.rows();
  ProjectedPoints out;
  out.pixels.resize(n, 2);
  out.depths.resize(n);
  out.valid.assign(static_cast<std::size_t>(n), 0);
  const Mat34& P = camera.projection;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 h = P.leftCols<3>() * points.row(i).transpose() + P.col(3);
    out.depths(i) = h.z();
    if (std::abs(h.z()) < eps_depth) {
      out.pixels.row(i).setZero();
      continue;
    }
    out.pixels(i, 0) = h.x() / h.z();
    out.pixels(i, 1) = h.y() / h.z();
    out.valid[static_cast<std::size_t>(i)] = 1;
  }
  return out;
}

Points3 project_points_backward(const Points3& points, const CameraProjection& camera,
                                const ProjectedPoints& projected, const Points2& grad_pixels) {
  const auto n = points.rows();
  Points3 grad = Points3::Zero(n, 3);
  const Mat34& P = camera.projection;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!projected.valid[static_cast<std::size_t>(i)]) continue;
    const double w = projected.depths(i);
    const double u = projected.pixels(i, 0);
    const double v = projected.pixels(i, 1);
    // d(u)/dX = (P0 - u P2) / w, same for v with P1.
    const Eigen::RowVector3d du = (P.row(0).head<3>() - u * P.row(2).head<3>()) / w;
    const Eigen::RowVector3d dv = (P.row(1).head<3>() - v * P.row(2).head<3>()) / w;
    grad.row(i) = grad_pixels(i, 0) * du + grad_pixels(i, 1) * dv;
  }
  return grad;
}

Vec3 back_project_direction(const CameraProjection& camera, const Vec2& pixel) {
  const Vec3 cam_dir = camera.intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0);
  return (camera.rotation.transpose() * cam_dir).normalized();
}

Vec2 to_array_index(const Vec2& pixel, ImageSize size) {
  return {pixel.y() + 0.5 * size.height - 0.5, pixel.x() + 0.5 * size.width - 0.5};
}

Vec2 from_array_index(const Vec2& row_col, ImageSize size) {
  return {row_col.y() + 0.5 - 0.5 * size.width, row_col.x() + 0.5 - 0.5 * size.height};
}

double default_focal(double radius, ImageSize size) { return 0.5 * size.width * radius; }

CameraRig make_orbit_rig(int num_views, double elevation_deg, double radius, ImageSize size,
                         std::optional<double> focal_px) {
  if (num_views < 1) throw ValidationError("orbit rig needs at least one view");
  if (!(radius > 0.0)) throw ValidationError("orbit radius must be positive");
  if (size.height <= 0 || size.width <= 0) throw ValidationError("image size must be positive");
  if (std::abs(elevation_deg) >= 89.0) throw ValidationError("orbit elevation must be within (-89, 89) degrees");
  const double focal = focal_px.value_or(default_focal(radius, size));
  if (!(focal > 0.0)) throw ValidationError("focal length must be positive");

  Mat3 K = Mat3::Identity();
  K(0, 0) = focal;
  K(1, 1) = focal;

  const double elev = elevation_deg * std::numbers::pi / 180.0;
  const Vec3 up(0.0, 1.0, 0.0);
  CameraRig rig;
  rig.image_size = size;
  for (int k = 0; k < num_views; ++k) {
    const double azim = 2.0 * std::numbers::pi * k / num_views;
    const Vec3 center = radius * Vec3(std::cos(elev) * std::sin(azim), std::sin(elev),
                                      std::cos(elev) * std::cos(azim));
    const Vec3 forward = (-center).normalized();
    const Vec3 right = forward.cross(up).normalized();
    const Vec3 down = forward.cross(right);
    Mat3 R;
    R.row(0) = right.transpose();
    R.row(1) = down.transpose();
    R.row(2) = forward.transpose();
    rig.cameras.push_back(compose_projection(K, R, -R * center));
  }
  return rig;
}

namespace {

std::string exact_decimal(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename M>
json matrix_strings(const M& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(exact_decimal(m(r, c)));
  }
  return out;
}

double parse_number(const json& v) {
  if (v.is_number()) return v.get<double>();
  return std::stod(v.get<std::string>());
}

template <typename M>
M parse_matrix(const json& values, const char* what) {
  M m;
  if (!values.is_array() || values.size() != static_cast<std::size_t>(m.size())) {
    throw DataError(std::string("camera field '") + what + "' must hold " +
                    std::to_string(m.size()) + " values");
  }
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = parse_number(values[static_cast<std::size_t>(r * m.cols() + c)]);
    }
  }
  return m;
}

}  // namespace

json rig_to_json(const CameraRig& rig) {
  json cams = json::array();
  for (const auto& cam : rig.cameras) {
    cams.push_back({{"K", matrix_strings(cam.intrinsics)},
                    {"R", matrix_strings(cam.rotation)},
                    {"t", matrix_strings(cam.translation)}});
  }
  return {{"image_size", {rig.image_size.height, rig.image_size.width}}, {"cameras", cams}};
}

CameraRig rig_from_json(const json& doc) {
  CameraRig rig;
  try {
    rig.image_size = {doc.at("image_size").at(0).get<int>(), doc.at("image_size").at(1).get<int>()};
    for (const auto& cam : doc.at("cameras")) {
      rig.cameras.push_back(compose_projection(parse_matrix<Mat3>(cam.at("K"), "K"),
                                               parse_matrix<Mat3>(cam.at("R"), "R"),
                                               parse_matrix<Vec3>(cam.at("t"), "t")));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed camera rig: ") + e.what());
  }
  if (rig.cameras.empty()) throw DataError("camera rig has no cameras");
  return rig;
}

Mat3 axis_angle_to_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

}  // namespace keyvol
