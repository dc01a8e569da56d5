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

#include "keyvol/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>

#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

#include "keyvol/errors.hpp"
#include "keyvol/nn.hpp"
#include "keyvol/tensor_io.hpp"

namespace keyvol {
namespace fs = std::filesystem;
using nlohmann::json;

int SceneSpec::root() const {
  for (int j = 0; j < joint_count; ++j) {
    if (parents[static_cast<std::size_t>(j)] < 0) return j;
  }
  return -1;
}

std::vector<int> SceneSpec::limb_children() const {
  std::vector<int> out;
  for (int j = 0; j < joint_count; ++j) {
    if (parents[static_cast<std::size_t>(j)] >= 0) out.push_back(j);
  }
  return out;
}

void SceneSpec::validate() const {
  const auto J = static_cast<std::size_t>(joint_count);
  if (joint_count < 1) throw ValidationError("scene needs at least one joint");
  if (parents.size() != J || rest_offsets.size() != J || hinge_axes.size() != J ||
      joint_angle_ranges.size() != J) {
    throw ValidationError("scene per-joint arrays must have joint_count entries");
  }
  if (limb_radii.size() != static_cast<std::size_t>(limb_count())) {
    throw ValidationError("scene needs one radius per limb");
  }
  int roots = 0;
  for (int p : parents) {
    if (p < 0) ++roots;
    else if (p >= joint_count) throw ValidationError("parent index out of range");
  }
  if (roots != 1) throw ValidationError("limb topology must have exactly one root");
  // Every joint must reach the root without revisiting a joint.
  for (int j = 0; j < joint_count; ++j) {
    int cur = j;
    for (int steps = 0; cur >= 0; ++steps) {
      if (steps > joint_count) throw ValidationError("limb topology contains a cycle");
      cur = parents[static_cast<std::size_t>(cur)];
    }
  }
  for (double r : limb_radii) {
    if (!(r > 0.0)) throw ValidationError("limb radii must be positive");
  }
  for (const auto& [lo, hi] : joint_angle_ranges) {
    if (!(lo <= hi)) throw ValidationError("joint angle range has min > max");
  }
  for (const auto& a : hinge_axes) {
    if (!(a.norm() > 0.0)) throw ValidationError("hinge axes must be nonzero");
  }
}

SceneSpec SceneSpec::default_figure() {
  SceneSpec s;
  s.joint_count = 6;
  s.parents = {-1, 0, 1, 1, 1, 0};
  s.rest_offsets = {Vec3(0.0, -0.05, 0.0), Vec3(0.0, 0.42, 0.0), Vec3(0.0, 0.28, 0.0),
                    Vec3(-0.45, 0.0, 0.0), Vec3(0.45, 0.0, 0.0), Vec3(0.0, -0.55, 0.0)};
  s.hinge_axes = {Vec3::UnitY(), Vec3::UnitX(), Vec3::UnitZ(),
                  Vec3::UnitZ(), Vec3::UnitY(), Vec3::UnitX()};
  const double pi = std::numbers::pi;
  s.joint_angle_ranges = {{-pi, pi}, {-0.5, 0.6}, {-0.6, 0.6}, {-1.2, 1.0}, {-1.2, 1.2}, {-0.9, 0.9}};
  s.limb_radii = {0.09, 0.07, 0.055, 0.055, 0.07};
  s.appearance_seed = 7;
  return s;
}

json SceneSpec::to_json() const {
  json offsets = json::array(), axes = json::array(), ranges = json::array();
  for (int j = 0; j < joint_count; ++j) {
    const auto i = static_cast<std::size_t>(j);
    offsets.push_back({rest_offsets[i].x(), rest_offsets[i].y(), rest_offsets[i].z()});
    axes.push_back({hinge_axes[i].x(), hinge_axes[i].y(), hinge_axes[i].z()});
    ranges.push_back({joint_angle_ranges[i].first, joint_angle_ranges[i].second});
  }
  return {{"joint_count", joint_count}, {"parents", parents},       {"rest_offsets", offsets},
          {"hinge_axes", axes},         {"joint_angle_ranges", ranges}, {"limb_radii", limb_radii},
          {"appearance_seed", appearance_seed}};
}

SceneSpec SceneSpec::from_json(const json& doc) {
  SceneSpec s;
  try {
    s.joint_count = doc.at("joint_count").get<int>();
    s.parents = doc.at("parents").get<std::vector<int>>();
    for (const auto& v : doc.at("rest_offsets")) s.rest_offsets.emplace_back(v[0], v[1], v[2]);
    for (const auto& v : doc.at("hinge_axes")) s.hinge_axes.emplace_back(v[0], v[1], v[2]);
    for (const auto& v : doc.at("joint_angle_ranges")) s.joint_angle_ranges.emplace_back(v[0], v[1]);
    s.limb_radii = doc.at("limb_radii").get<std::vector<double>>();
    s.appearance_seed = doc.value("appearance_seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

void MultiViewSample::validate() const {
  const int K = num_views();
  if (K < 1) throw ValidationError("sample has no views");
  const ImageSize sz = image_size();
  images.expect_shape({K, 3, sz.height, sz.width}, "images");
  masks.expect_shape({K, sz.height, sz.width}, "masks");
  for (double m : masks.values()) {
    if (m != 0.0 && m != 1.0) throw ValidationError("masks must be exactly 0 or 1");
  }
  for (std::size_t l = 0; l < layer_features.size(); ++l) {
    const Tensor& f = layer_features[l];
    const std::string name = "layer_features[" + std::to_string(l) + "]";
    if (f.rank() != 4 || f.dim(1) != K) {
      throw ShapeError(name + ": expected C x " + std::to_string(K) + " x h x w, found " +
                       shape_string(f.shape()));
    }
    if (f.dim(2) <= 0 || f.dim(3) <= 0 || sz.height % f.dim(2) != 0 || sz.width % f.dim(3) != 0) {
      throw ShapeError(name + ": spatial size must divide the image size");
    }
  }
  if (ground_truth_joints && (ground_truth_joints->rank() != 2 || ground_truth_joints->dim(1) != 3)) {
    throw ShapeError("ground_truth_joints must be J x 3");
  }
}

namespace {

Mat3 rotation_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

bool inside_cube(const SceneSpec& spec, const Points3& joints) {
  const auto children = spec.limb_children();
  for (std::size_t l = 0; l < children.size(); ++l) {
    const double r = spec.limb_radii[l];
    const int c = children[l];
    const int p = spec.parents[static_cast<std::size_t>(c)];
    if ((joints.row(c).array().abs() + r).maxCoeff() > 1.0) return false;
    if ((joints.row(p).array().abs() + r).maxCoeff() > 1.0) return false;
  }
  return spec.limb_count() > 0 || (joints.array().abs().maxCoeff() <= 1.0);
}

// Closest points between segments [p1, q1] and [p2, q2]; returns the
// parameters along each.
std::pair<double, double> closest_segment_params(const Vec3& p1, const Vec3& q1, const Vec3& p2,
                                                 const Vec3& q2) {
  constexpr double eps = 1e-14;
  const Vec3 d1 = q1 - p1, d2 = q2 - p2, r = p1 - p2;
  const double a = d1.dot(d1), e = d2.dot(d2), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  if (a <= eps && e <= eps) return {0.0, 0.0};
  if (a <= eps) return {0.0, std::clamp(f / e, 0.0, 1.0)};
  const double c = d1.dot(r);
  if (e <= eps) return {std::clamp(-c / a, 0.0, 1.0), 0.0};
  const double b = d1.dot(d2);
  const double denom = a * e - b * b;
  s = denom > eps ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
  t = (b * s + f) / e;
  if (t < 0.0) {
    t = 0.0;
    s = std::clamp(-c / a, 0.0, 1.0);
  } else if (t > 1.0) {
    t = 1.0;
    s = std::clamp((b - c) / a, 0.0, 1.0);
  }
  return {s, t};
}

// Nearest ray/capsule hit distance, or a negative value on a miss.
double capsule_hit(const Vec3& ro, const Vec3& rd, const Vec3& pa, const Vec3& pb, double ra) {
  const Vec3 ba = pb - pa, oa = ro - pa;
  const double baba = ba.dot(ba), bard = ba.dot(rd), baoa = ba.dot(oa);
  const double rdoa = rd.dot(oa), oaoa = oa.dot(oa);
  const double a = baba - bard * bard;
  if (a > 1e-12) {
    const double b = baba * rdoa - baoa * bard;
    const double c = baba * oaoa - baoa * baoa - ra * ra * baba;
    const double h = b * b - a * c;
    if (h < 0.0) return -1.0;
    const double t = (-b - std::sqrt(h)) / a;
    const double y = baoa + t * bard;
    if (y > 0.0 && y < baba) return t;
  }
  // Spherical caps.
  double best = -1.0;
  for (const Vec3* center : {&pa, &pb}) {
    const Vec3 oc = ro - *center;
    const double b = rd.dot(oc);
    const double c = oc.dot(oc) - ra * ra;
    const double h = b * b - c;
    if (h > 0.0) {
      const double t = -b - std::sqrt(h);
      if (t > 0.0 && (best < 0.0 || t < best)) best = t;
    }
  }
  return best;
}

struct Limb {
  Vec3 a, b;
  double radius;
  Vec3 color;
};

struct RayHit {
  int limb = -1;
  double t = 0.0;
  Vec3 normal = Vec3::Zero();
};

RayHit trace(const std::vector<Limb>& limbs, const Vec3& ro, const Vec3& rd) {
  RayHit hit;
  for (std::size_t l = 0; l < limbs.size(); ++l) {
    const double t = capsule_hit(ro, rd, limbs[l].a, limbs[l].b, limbs[l].radius);
    if (t > 0.0 && (hit.limb < 0 || t < hit.t)) {
      hit.limb = static_cast<int>(l);
      hit.t = t;
    }
  }
  if (hit.limb >= 0) {
    const Limb& L = limbs[static_cast<std::size_t>(hit.limb)];
    const Vec3 p = ro + hit.t * rd;
    const Vec3 ba = L.b - L.a;
    const double h = std::clamp((p - L.a).dot(ba) / std::max(ba.dot(ba), 1e-300), 0.0, 1.0);
    hit.normal = (p - (L.a + h * ba)).normalized();
  }
  return hit;
}

constexpr double kOcclusionAttenuation = 0.3;
constexpr double kRayLength = 100.0;

// Per-limb soft occupancy channels plus a union channel for one view at the
// given resolution; `scale` maps this resolution to the camera's.
void render_features(const std::vector<Limb>& limbs, const CameraProjection& cam, ImageSize full,
                     int scale, Tensor& out, int view) {
  const int h = full.height / scale, w = full.width / scale;
  const int C = static_cast<int>(out.dim(0));
  const int K = static_cast<int>(out.dim(1));
  const double focal = cam.intrinsics(0, 0) / scale;
  const Vec3 ro = cam.center();
  const ImageSize layer{h, w};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      // Pixel center at this resolution, expressed in full-resolution pixels.
      const Vec2 px = from_array_index(Vec2(r, c), layer) * scale;
      const Vec3 rd = back_project_direction(cam, px);
      const RayHit hit = trace(limbs, ro, rd);
      double union_occ = 0.0;
      for (std::size_t l = 0; l < limbs.size(); ++l) {
        const Limb& L = limbs[l];
        const auto [s, t] = closest_segment_params(ro, ro + kRayLength * rd, L.a, L.b);
        const Vec3 on_ray = ro + s * kRayLength * rd;
        const Vec3 on_limb = L.a + t * (L.b - L.a);
        const double dist = (on_ray - on_limb).norm();
        const double depth = std::max(s * kRayLength, 1e-6);
        const double footprint = depth / focal;
        const double excess = std::max(0.0, dist - L.radius);
        double occ = std::exp(-excess * excess / (2.0 * footprint * footprint));
        if (hit.limb >= 0 && hit.limb != static_cast<int>(l) && hit.t < depth - L.radius) {
          occ *= kOcclusionAttenuation;
        }
        out[((l * static_cast<std::size_t>(K) + view) * h + r) * w + c] = occ;
        union_occ = std::max(union_occ, occ);
      }
      out[((static_cast<std::size_t>(C - 1) * K + view) * h + r) * w + c] = union_occ;
    }
  }
}

}  // namespace

Points3 pose_joints(const SceneSpec& spec, const std::vector<double>& angles) {
  const auto J = static_cast<std::size_t>(spec.joint_count);
  if (angles.size() != J) throw ValidationError("pose needs one angle per joint");
  std::vector<Mat3> global(J, Mat3::Identity());
  Points3 joints(spec.joint_count, 3);
  std::vector<bool> done(J, false);
  // Parents may have larger indices than children, so resolve by recursion
  // depth rather than index order.
  std::function<void(std::size_t)> solve = [&](std::size_t j) {
    if (done[j]) return;
    const int p = spec.parents[j];
    const Mat3 local = rotation_about(spec.hinge_axes[j], angles[j]);
    if (p < 0) {
      global[j] = local;
      joints.row(static_cast<Eigen::Index>(j)) = spec.rest_offsets[j].transpose();
    } else {
      const auto pi = static_cast<std::size_t>(p);
      solve(pi);
      global[j] = global[pi] * local;
      joints.row(static_cast<Eigen::Index>(j)) =
          joints.row(p) + (global[j] * spec.rest_offsets[j]).transpose();
    }
    done[j] = true;
  };
  for (std::size_t j = 0; j < J; ++j) solve(j);
  return joints;
}

MultiViewSample synth_generate(const SceneSpec& spec, const CameraRig& rig, std::uint64_t seed) {
  spec.validate();
  if (rig.num_views() < 1) throw ValidationError("rig has no cameras");
  const ImageSize size = rig.image_size;
  if (size.height % 2 != 0 || size.width % 2 != 0) {
    throw ValidationError("synthetic images need even height and width");
  }
  const auto J = static_cast<std::size_t>(spec.joint_count);
  const int K = rig.num_views();

  auto rng = make_rng(seed, 1);
  std::vector<double> angles(J);
  for (std::size_t j = 0; j < J; ++j) {
    const auto [lo, hi] = spec.joint_angle_ranges[j];
    angles[j] = std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  Points3 joints = pose_joints(spec, angles);
  for (int attempt = 0; !inside_cube(spec, joints); ++attempt) {
    if (attempt >= 8) throw ValidationError("figure does not fit the canonical cube even at rest");
    spdlog::warn("synthetic pose (seed {}) leaves the canonical cube; halving joint angles", seed);
    for (auto& a : angles) a *= 0.5;
    joints = pose_joints(spec, angles);
  }

  auto color_rng = make_rng(spec.appearance_seed, 2);
  std::uniform_real_distribution<double> color_dist(0.3, 1.0);
  std::vector<Limb> limbs;
  const auto children = spec.limb_children();
  for (std::size_t l = 0; l < children.size(); ++l) {
    const int c = children[l];
    const int p = spec.parents[static_cast<std::size_t>(c)];
    Vec3 color(color_dist(color_rng), color_dist(color_rng), color_dist(color_rng));
    limbs.push_back({joints.row(p).transpose(), joints.row(c).transpose(), spec.limb_radii[l], color});
  }

  MultiViewSample sample;
  sample.rig = rig;
  sample.images = Tensor({K, 3, size.height, size.width}, kBackgroundColor);
  sample.masks = Tensor({K, size.height, size.width});
  const int C = static_cast<int>(limbs.size()) + 1;
  sample.layer_features = {Tensor({C, K, size.height, size.width}),
                           Tensor({C, K, size.height / 2, size.width / 2})};
  const std::size_t plane = static_cast<std::size_t>(size.height) * size.width;

  for (int k = 0; k < K; ++k) {
    const CameraProjection& cam = rig.cameras[static_cast<std::size_t>(k)];
    const Vec3 ro = cam.center();
    for (int r = 0; r < size.height; ++r) {
      for (int c = 0; c < size.width; ++c) {
        const Vec3 rd = back_project_direction(cam, from_array_index(Vec2(r, c), size));
        const RayHit hit = trace(limbs, ro, rd);
        if (hit.limb < 0) continue;
        const std::size_t pix = static_cast<std::size_t>(r) * size.width + c;
        sample.masks[static_cast<std::size_t>(k) * plane + pix] = 1.0;
        const double shade = 0.35 + 0.65 * std::abs(hit.normal.dot(rd));
        const Vec3& color = limbs[static_cast<std::size_t>(hit.limb)].color;
        for (int ch = 0; ch < 3; ++ch) {
          sample.images[(static_cast<std::size_t>(k) * 3 + ch) * plane + pix] = color[ch] * shade;
        }
      }
    }
    render_features(limbs, cam, size, 1, sample.layer_features[0], k);
    render_features(limbs, cam, size, 2, sample.layer_features[1], k);
  }

  Tensor gt({spec.joint_count, 3});
  for (int j = 0; j < spec.joint_count; ++j) {
    for (int a = 0; a < 3; ++a) gt[static_cast<std::size_t>(j) * 3 + a] = joints(j, a);
  }
  sample.ground_truth_joints = std::move(gt);
  sample.meta = {{"source", "synthetic"}, {"seed", seed}, {"joint_angles", angles}};
  return sample;
}

Mesh figure_mesh(const SceneSpec& spec, const Points3& joints, int segments) {
  Mesh mesh;
  std::vector<Vec3> verts;
  const int rings = std::max(2, segments / 2);  // per hemisphere
  const auto children = spec.limb_children();
  for (std::size_t l = 0; l < children.size(); ++l) {
    const int c = children[l];
    const int p = spec.parents[static_cast<std::size_t>(c)];
    const Vec3 a = joints.row(p).transpose(), b = joints.row(c).transpose();
    const double r = spec.limb_radii[l];
    Vec3 axis = b - a;
    const double len = axis.norm();
    axis = len > 0.0 ? Vec3(axis / len) : Vec3::UnitY();
    const Vec3 helper = std::abs(axis.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 u = axis.cross(helper).normalized(), v = axis.cross(u);
    const int base = static_cast<int>(verts.size());
    // Latitude rows from the bottom pole to the top pole; the lower
    // hemisphere is centered on a and the upper on b.
    const int rows = 2 * rings + 2;
    for (int i = 0; i < rows; ++i) {
      const bool upper = i > rings;
      const int k = upper ? i - 1 : i;
      const double phi = -0.5 * std::numbers::pi + std::numbers::pi * k / (2 * rings);
      const Vec3 center = upper ? b : a;
      for (int s = 0; s < segments; ++s) {
        const double theta = 2.0 * std::numbers::pi * s / segments;
        verts.push_back(center + r * std::sin(phi) * axis +
                        r * std::cos(phi) * (std::cos(theta) * u + std::sin(theta) * v));
      }
    }
    for (int i = 0; i + 1 < rows; ++i) {
      for (int s = 0; s < segments; ++s) {
        const int s1 = (s + 1) % segments;
        const int v00 = base + i * segments + s, v01 = base + i * segments + s1;
        const int v10 = base + (i + 1) * segments + s, v11 = base + (i + 1) * segments + s1;
        mesh.faces.push_back({v00, v01, v11});
        mesh.faces.push_back({v00, v11, v10});
      }
    }
  }
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  return mesh;
}

void write_bundle(const MultiViewSample& sample, const fs::path& dir) {
  sample.validate();
  const int K = sample.num_views();
  TensorArchive archive("feature-bundle");
  archive.put("images", sample.images, DType::kFloat32);
  archive.put("masks", sample.masks, DType::kUInt8);
  Tensor intr({K, 3, 3}), rot({K, 3, 3}), trans({K, 3});
  for (int k = 0; k < K; ++k) {
    const auto& cam = sample.rig.cameras[static_cast<std::size_t>(k)];
    for (int i = 0; i < 3; ++i) {
      trans[static_cast<std::size_t>(k * 3 + i)] = cam.translation(i);
      for (int j = 0; j < 3; ++j) {
        intr[static_cast<std::size_t>((k * 3 + i) * 3 + j)] = cam.intrinsics(i, j);
        rot[static_cast<std::size_t>((k * 3 + i) * 3 + j)] = cam.rotation(i, j);
      }
    }
  }
  archive.put("camera_intrinsics", intr, DType::kFloat64);
  archive.put("camera_rotations", rot, DType::kFloat64);
  archive.put("camera_translations", trans, DType::kFloat64);
  for (std::size_t l = 0; l < sample.layer_features.size(); ++l) {
    archive.put("features_" + std::to_string(l), sample.layer_features[l], DType::kFloat32);
  }
  if (sample.ground_truth_joints) {
    archive.put("ground_truth_joints", *sample.ground_truth_joints, DType::kFloat64);
  }
  archive.meta() = sample.meta;
  archive.meta()["num_views"] = K;
  archive.meta()["image_size"] = {sample.image_size().height, sample.image_size().width};
  archive.meta()["num_layers"] = sample.layer_features.size();
  archive.write_directory(dir);
}

MultiViewSample read_bundle(const fs::path& dir) {
  const TensorArchive archive = TensorArchive::read_directory(dir);
  if (archive.kind() != "feature-bundle") {
    throw DataError(dir.string() + " is a '" + archive.kind() + "' archive, not a feature bundle");
  }
  const json& meta = archive.meta();
  int K = 0, H = 0, W = 0;
  std::size_t L = 0;
  try {
    K = meta.at("num_views").get<int>();
    H = meta.at("image_size").at(0).get<int>();
    W = meta.at("image_size").at(1).get<int>();
    L = meta.value("num_layers", std::size_t{0});
  } catch (const json::exception& e) {
    throw DataError("bundle manifest incomplete: " + std::string(e.what()));
  }
  MultiViewSample s;
  s.images = archive.get("images", {K, 3, H, W});
  s.masks = archive.get("masks", {K, H, W});
  const Tensor intr = archive.get("camera_intrinsics", {K, 3, 3});
  const Tensor rot = archive.get("camera_rotations", {K, 3, 3});
  const Tensor trans = archive.get("camera_translations", {K, 3});
  s.rig.image_size = {H, W};
  for (int k = 0; k < K; ++k) {
    Mat3 Km, R;
    Vec3 t;
    for (int i = 0; i < 3; ++i) {
      t(i) = trans[static_cast<std::size_t>(k * 3 + i)];
      for (int j = 0; j < 3; ++j) {
        Km(i, j) = intr[static_cast<std::size_t>((k * 3 + i) * 3 + j)];
        R(i, j) = rot[static_cast<std::size_t>((k * 3 + i) * 3 + j)];
      }
    }
    s.rig.cameras.push_back(compose_projection(Km, R, t));
  }
  for (std::size_t l = 0; l < L; ++l) {
    const std::string name = "features_" + std::to_string(l);
    const Tensor f = archive.get(name);
    if (f.rank() != 4 || f.dim(1) != K) {
      throw ShapeError("entry '" + name + "': expected view axis of size " + std::to_string(K) +
                       ", found shape " + shape_string(f.shape()));
    }
    s.layer_features.push_back(f);
  }
  if (archive.contains("ground_truth_joints")) s.ground_truth_joints = archive.get("ground_truth_joints");
  s.meta = meta;
  for (const char* key : {"num_views", "image_size", "num_layers"}) s.meta.erase(key);
  s.validate();
  return s;
}

DatasetIndex generate_dataset(const fs::path& dir, int count, const SceneSpec& spec,
                              const CameraRig& rig, std::uint64_t seed, bool with_meshes) {
  if (count < 0) throw ValidationError("sample count must be non-negative");
  spec.validate();
  const bool existed = fs::exists(dir);
  DatasetIndex index;
  index.root = dir;
  try {
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%05d", i);
      const std::uint64_t sample_seed = make_rng(seed, 1000 + static_cast<std::uint64_t>(i))();
      const MultiViewSample sample = synth_generate(spec, rig, sample_seed);
      write_bundle(sample, dir / name);
      if (with_meshes) {
        const Tensor& gt = *sample.ground_truth_joints;
        Points3 joints(spec.joint_count, 3);
        for (int j = 0; j < spec.joint_count; ++j) {
          for (int a = 0; a < 3; ++a) joints(j, a) = gt[static_cast<std::size_t>(j * 3 + a)];
        }
        write_obj(figure_mesh(spec, joints), dir / name / "mesh.obj");
      }
      index.samples.emplace_back(name);
    }
    index.info = {{"format", "keyvol-dataset"},
                  {"version", 1},
                  {"count", count},
                  {"seed", seed},
                  {"scene", spec.to_json()},
                  {"rig", rig_to_json(rig)},
                  {"samples", index.samples}};
    write_text_file(dir / "dataset.json", index.info.dump(2));
  } catch (...) {
    std::error_code ec;
    if (!existed) fs::remove_all(dir, ec);
    else for (const auto& s : index.samples) fs::remove_all(dir / s, ec);
    throw;
  }
  return index;
}

DatasetIndex read_dataset(const fs::path& dir) {
  const fs::path path = dir / "dataset.json";
  if (!fs::exists(path)) throw DataError("no dataset index at " + path.string());
  DatasetIndex index;
  index.root = dir;
  try {
    index.info = json::parse(read_text_file(path));
    index.samples = index.info.at("samples").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError("malformed dataset index " + path.string() + ": " + e.what());
  }
  return index;
}

}  // namespace keyvol
