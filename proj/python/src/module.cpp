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

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <string>
#include <vector>

#include "keyvol/backbone.hpp"
#include "keyvol/errors.hpp"
#include "keyvol/evaluation.hpp"
#include "keyvol/geometry.hpp"
#include "keyvol/hashing.hpp"
#include "keyvol/keypoints.hpp"
#include "keyvol/rigging.hpp"

namespace py = pybind11;
using namespace keyvol;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict camera_dict(const CameraProjection& cam) {
  py::dict d;
  d["K"] = cam.intrinsics;
  d["R"] = cam.rotation;
  d["t"] = cam.translation;
  d["P"] = cam.projection;
  return d;
}

CameraProjection camera_from(const Eigen::Matrix<double, 3, 4>& P) {
  CameraProjection cam;
  cam.projection = P;
  return cam;
}

Skeleton skeleton_from(const Points3& joints, const std::vector<std::pair<int, int>>& edges, int root) {
  Skeleton s;
  s.joints = joints;
  s.edges = edges;
  s.root = root;
  s.validate();
  return s;
}

Mesh mesh_from(const Points3& vertices, const std::vector<std::array<int, 3>>& faces) {
  Mesh m;
  m.vertices = vertices;
  m.faces = faces;
  return m;
}

}  // namespace

PYBIND11_MODULE(_keyvol, m) {
  m.doc() = "Bindings for the keyvol core library";

  auto base = py::register_exception<Error>(m, "KeyvolError", PyExc_RuntimeError);
  auto validation = py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", validation.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def(
      "orbit_rig",
      [](int views, double elevation_deg, double radius, int height, int width) {
        const CameraRig rig = make_orbit_rig(views, elevation_deg, radius, {height, width});
        py::list cams;
        for (const auto& c : rig.cameras) cams.append(camera_dict(c));
        return cams;
      },
      py::arg("views"), py::arg("elevation_deg"), py::arg("radius"), py::arg("height"), py::arg("width"),
      "Cameras on a circle around the origin, each as a dict with K, R, t and P.");

  m.def(
      "project_points",
      [](const Points3& points, const Eigen::Matrix<double, 3, 4>& P) {
        const ProjectedPoints p = project_points(points, camera_from(P));
        std::vector<bool> valid(p.valid.begin(), p.valid.end());
        return py::make_tuple(p.pixels, valid);
      },
      py::arg("points"), py::arg("P"), "Pixels (centered, y down) and validity flags.");

  m.def("axis_angle_to_matrix", &axis_angle_to_matrix, py::arg("axis_angle"));

  m.def(
      "integral_regression",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits, const Vec3& lo,
         const Vec3& hi) {
        if (logits.ndim() != 4) throw ShapeError("logits must be N x M x M x M");
        VoxelGrid grid;
        grid.resolution = static_cast<int>(logits.shape(1));
        grid.lo = lo;
        grid.hi = hi;
        return Points3(integral_regression({from_numpy(logits), grid}).positions);
      },
      py::arg("logits"), py::arg("lo") = Vec3::Constant(-1.0), py::arg("hi") = Vec3::Constant(1.0));

  m.def(
      "build_skeleton",
      [](const Points3& keypoints, const MatX& adjacency, std::optional<int> root) {
        const Skeleton s = orient_tree(build_mst(keypoints, adjacency), keypoints, adjacency, root);
        return py::make_tuple(s.edges, s.root);
      },
      py::arg("keypoints"), py::arg("adjacency"), py::arg("root") = py::none(),
      "Minimum spanning tree oriented from the root; returns (edges, root).");

  m.def(
      "skinning_weights",
      [](const Points3& vertices, const Points3& joints, const std::vector<std::pair<int, int>>& edges, int root,
         double sigma, double alpha) {
        return skinning_weights(mesh_from(vertices, {}), skeleton_from(joints, edges, root), sigma, alpha);
      },
      py::arg("vertices"), py::arg("joints"), py::arg("edges"), py::arg("root"), py::arg("sigma"),
      py::arg("alpha") = 1.0);

  m.def(
      "lbs_deform",
      [](const Points3& vertices, const Points3& joints, const std::vector<std::pair<int, int>>& edges, int root,
         const std::vector<Mat3>& rotations, const MatX& weights) {
        return Points3(lbs_deform(mesh_from(vertices, {}), skeleton_from(joints, edges, root), rotations, weights));
      },
      py::arg("vertices"), py::arg("joints"), py::arg("edges"), py::arg("root"), py::arg("rotations"),
      py::arg("weights"));

  m.def("mpjpe", &mpjpe, py::arg("pred"), py::arg("gt"));
  m.def("n_mpjpe", &n_mpjpe, py::arg("pred"), py::arg("gt"));
  m.def("p_mpjpe", &p_mpjpe, py::arg("pred"), py::arg("gt"));

  m.def(
      "synth_sample",
      [](std::uint64_t seed, int views, int size, double elevation_deg, double radius) {
        const CameraRig rig = make_orbit_rig(views, elevation_deg, radius, {size, size});
        const MultiViewSample s = synth_generate(SceneSpec::default_figure(), rig, seed);
        py::dict d;
        d["images"] = to_numpy(s.images);
        d["masks"] = to_numpy(s.masks);
        d["joints"] = to_numpy(*s.ground_truth_joints);
        py::list feats;
        for (const auto& f : s.layer_features) feats.append(to_numpy(f));
        d["features"] = feats;
        return d;
      },
      py::arg("seed"), py::arg("views") = 4, py::arg("size") = 64, py::arg("elevation_deg") = 10.0,
      py::arg("radius") = 2.5, "One synthetic multi-view sample of the default figure.");

  m.def(
      "import_rig_bundle",
      [](const std::filesystem::path& dir) {
        const RigBundle b = import_rig_bundle(dir);
        py::dict d;
        d["vertices"] = b.mesh.vertices;
        d["faces"] = b.mesh.faces;
        d["joints"] = b.skeleton.joints;
        d["edges"] = b.skeleton.edges;
        d["root"] = b.skeleton.root;
        d["weights"] = b.weights;
        d["keypoints"] = b.keypoints;
        d["adjacency"] = b.adjacency;
        return d;
      },
      py::arg("dir"));

  m.def(
      "directory_hash", [](const std::filesystem::path& dir) { return directory_hash(dir); }, py::arg("dir"));
}
