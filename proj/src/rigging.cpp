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

#include "keyvol/rigging.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include <spdlog/spdlog.h>

#include "keyvol/errors.hpp"
#include "keyvol/tensor_io.hpp"

namespace keyvol {

namespace {

void check_adjacency(const Points3& keypoints, const MatX& adjacency) {
  const Eigen::Index n = keypoints.rows();
  if (adjacency.rows() != n || adjacency.cols() != n) {
    throw ShapeError("adjacency must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                     std::to_string(adjacency.rows()) + "x" + std::to_string(adjacency.cols()));
  }
}

struct DisjointSets {
  std::vector<int> parent;
  explicit DisjointSets(int n) : parent(static_cast<std::size_t>(n)) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[static_cast<std::size_t>(b)] = a;
    return true;
  }
};

}  // namespace

MatX mst_costs(const Points3& keypoints, const MatX& adjacency) {
  check_adjacency(keypoints, adjacency);
  const Eigen::Index n = keypoints.rows();
  MatX d = MatX::Zero(n, n);
  double dmax = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      d(i, j) = d(j, i) = (keypoints.row(i) - keypoints.row(j)).norm();
      dmax = std::max(dmax, d(i, j));
    }
  }
  if (dmax <= 0.0) spdlog::warn("all keypoints coincide; MST costs use the adjacency alone");
  MatX c = MatX::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      c(i, j) = (dmax > 0.0 ? d(i, j) / dmax : 0.0) + (1.0 - adjacency(i, j));
    }
  }
  return c;
}

double tree_cost(const UndirectedTree& tree, const MatX& costs) {
  auto edges = tree.edges;
  std::sort(edges.begin(), edges.end());
  double total = 0.0;
  for (const auto& [i, j] : edges) total += costs(i, j);
  return total;
}

UndirectedTree build_mst(const Points3& keypoints, const MatX& adjacency) {
  const int n = static_cast<int>(keypoints.rows());
  if (n < 2) throw ValidationError("MST needs at least two keypoints");
  const MatX c = mst_costs(keypoints, adjacency);
  struct Candidate {
    double cost;
    int i, j;
  };
  std::vector<Candidate> cand;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) cand.push_back({c(i, j), i, j});
  }
  std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  UndirectedTree tree{n, {}};
  DisjointSets sets(n);
  for (const auto& e : cand) {
    if (sets.unite(e.i, e.j)) tree.edges.emplace_back(e.i, e.j);
    if (static_cast<int>(tree.edges.size()) == n - 1) break;
  }
  return tree;
}

std::vector<int> Skeleton::incoming_edge() const {
  std::vector<int> in(static_cast<std::size_t>(joints.rows()), -1);
  for (std::size_t l = 0; l < edges.size(); ++l) in[static_cast<std::size_t>(edges[l].second)] = static_cast<int>(l);
  return in;
}

void Skeleton::validate() const {
  const auto n = static_cast<int>(joints.rows());
  if (n < 2) throw ValidationError("skeleton needs at least two joints");
  if (static_cast<int>(edges.size()) != n - 1) {
    throw ValidationError("skeleton must have N-1 edges, has " + std::to_string(edges.size()));
  }
  if (root < 0 || root >= n) throw ValidationError("skeleton root out of range");
  std::vector<int> parent(static_cast<std::size_t>(n), -2);
  parent[static_cast<std::size_t>(root)] = -1;
  for (const auto& [p, c] : edges) {
    if (p < 0 || p >= n || c < 0 || c >= n) throw ValidationError("skeleton edge index out of range");
    if (c == root || parent[static_cast<std::size_t>(c)] != -2) {
      throw ValidationError("skeleton joint " + std::to_string(c) + " has more than one parent");
    }
    // Edges are stored parent-before-child, so the parent is already placed.
    if (parent[static_cast<std::size_t>(p)] == -2) {
      throw ValidationError("skeleton edge (" + std::to_string(p) + "," + std::to_string(c) +
                            ") is not reachable from the root in order");
    }
    parent[static_cast<std::size_t>(c)] = p;
  }
}

Skeleton orient_tree(const UndirectedTree& tree, const Points3& joints, const MatX& adjacency,
                     std::optional<int> root) {
  const int n = tree.num_nodes;
  if (joints.rows() != n) throw ShapeError("joint count does not match the tree");
  if (static_cast<int>(tree.edges.size()) != n - 1) {
    throw ValidationError("tree over " + std::to_string(n) + " nodes must have " + std::to_string(n - 1) +
                          " edges, has " + std::to_string(tree.edges.size()));
  }
  std::vector<std::vector<int>> nbr(static_cast<std::size_t>(n));
  for (const auto& [i, j] : tree.edges) {
    if (i < 0 || j < 0 || i >= n || j >= n || i == j) throw ValidationError("tree edge index out of range");
    nbr[static_cast<std::size_t>(i)].push_back(j);
    nbr[static_cast<std::size_t>(j)].push_back(i);
  }
  for (auto& v : nbr) std::sort(v.begin(), v.end());
  int r = 0;
  if (root) {
    r = *root;
    if (r < 0 || r >= n) throw ValidationError("root index out of range");
  } else {
    check_adjacency(joints, adjacency);
    double best = -1.0;
    for (int i = 0; i < n; ++i) {
      const double s = adjacency.row(i).sum();
      if (s > best) {
        best = s;
        r = i;
      }
    }
  }
  Skeleton sk;
  sk.joints = joints;
  sk.root = r;
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::deque<int> queue{r};
  seen[static_cast<std::size_t>(r)] = 1;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    for (int v : nbr[static_cast<std::size_t>(u)]) {
      if (seen[static_cast<std::size_t>(v)]) continue;
      seen[static_cast<std::size_t>(v)] = 1;
      sk.edges.emplace_back(u, v);
      queue.push_back(v);
    }
  }
  if (static_cast<int>(sk.edges.size()) != n - 1) throw ValidationError("tree is disconnected");
  return sk;
}

double point_segment_distance(const Vec3& v, const Vec3& a, const Vec3& b) {
  const Vec3 d = b - a;
  const double len2 = d.squaredNorm();
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp((v - a).dot(d) / len2, 0.0, 1.0);
  return (v - (a + t * d)).norm();
}

double default_skinning_sigma(const Skeleton& skeleton) {
  const Eigen::RowVector3d lo = skeleton.joints.colwise().minCoeff();
  const Eigen::RowVector3d hi = skeleton.joints.colwise().maxCoeff();
  return 0.1 * (hi - lo).norm();
}

MatX skinning_weights(const Mesh& mesh, const Skeleton& skeleton, double sigma, double alpha) {
  if (!(sigma > 0.0)) throw ValidationError("skinning sigma must be positive");
  if (!(alpha > 0.0)) throw ValidationError("skinning alpha must be positive");
  skeleton.validate();
  const int V = mesh.num_vertices();
  const int E = skeleton.num_edges();
  MatX w(V, E);
  int fallbacks = 0;
  for (int i = 0; i < V; ++i) {
    const Vec3 v = mesh.vertices.row(i).transpose();
    double sum = 0.0;
    int nearest = 0;
    double nearest_d = std::numeric_limits<double>::infinity();
    for (int l = 0; l < E; ++l) {
      const auto [p, c] = skeleton.edges[static_cast<std::size_t>(l)];
      const double d = point_segment_distance(v, skeleton.joints.row(p).transpose(), skeleton.joints.row(c).transpose());
      if (d < nearest_d) {
        nearest_d = d;
        nearest = l;
      }
      w(i, l) = std::exp(-alpha * d * d / (2.0 * sigma * sigma));
      sum += w(i, l);
    }
    if (sum > 0.0) {
      w.row(i) /= sum;
    } else {
      w.row(i).setZero();
      w(i, nearest) = 1.0;
      ++fallbacks;
    }
  }
  if (fallbacks > 0) spdlog::warn("{} vertices were too far from every edge; bound to the nearest edge", fallbacks);
  return w;
}

std::vector<RigidTransform> forward_kinematics(const Skeleton& skeleton,
                                               const std::vector<Mat3>& rotations) {
  skeleton.validate();
  if (static_cast<int>(rotations.size()) != skeleton.num_edges()) {
    throw ShapeError("pose has " + std::to_string(rotations.size()) + " rotations for " +
                     std::to_string(skeleton.num_edges()) + " edges");
  }
  for (std::size_t l = 0; l < rotations.size(); ++l) {
    check_rotation(rotations[l], 1e-6, ("rotation of edge " + std::to_string(l)).c_str());
  }
  const std::vector<int> incoming = skeleton.incoming_edge();
  std::vector<RigidTransform> T(rotations.size());
  // Edges are breadth-first, so each parent edge is final before its children.
  for (std::size_t l = 0; l < skeleton.edges.size(); ++l) {
    const int p = skeleton.edges[l].first;
    const Vec3 j = skeleton.joints.row(p).transpose();
    RigidTransform local{rotations[l], j - rotations[l] * j};
    const int up = incoming[static_cast<std::size_t>(p)];
    if (up < 0) {
      T[l] = local;
    } else {
      const RigidTransform& parent = T[static_cast<std::size_t>(up)];
      T[l] = {parent.linear * local.linear, parent.linear * local.offset + parent.offset};
    }
  }
  return T;
}

Points3 lbs_deform(const Mesh& mesh, const Skeleton& skeleton, const std::vector<Mat3>& rotations,
                   const MatX& weights) {
  if (weights.rows() != mesh.num_vertices() || weights.cols() != skeleton.num_edges()) {
    throw ShapeError("skinning weights must be " + std::to_string(mesh.num_vertices()) + "x" +
                     std::to_string(skeleton.num_edges()));
  }
  const std::vector<RigidTransform> T = forward_kinematics(skeleton, rotations);
  Points3 out(mesh.vertices.rows(), 3);
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    const Vec3 v = mesh.vertices.row(i).transpose();
    // Blending displacements keeps the rest pose exact under identity rotations.
    Vec3 delta = Vec3::Zero();
    for (std::size_t l = 0; l < T.size(); ++l) {
      const double w = weights(i, static_cast<Eigen::Index>(l));
      if (w == 0.0) continue;
      delta += w * ((T[l].linear - Mat3::Identity()) * v + T[l].offset);
    }
    out.row(i) = (v + delta).transpose();
  }
  return out;
}

std::vector<Mat3> pose_from_json(const nlohmann::json& doc, int num_edges) {
  if (doc.value("format_version", 0) != 1) throw DataError("unsupported pose format version");
  std::vector<Mat3> rot(static_cast<std::size_t>(num_edges), Mat3::Identity());
  for (const auto& r : doc.at("rotations")) {
    const int l = r.at("edge").get<int>();
    if (l < 0 || l >= num_edges) throw DataError("pose edge " + std::to_string(l) + " out of range");
    const auto aa = r.at("axis_angle").get<std::vector<double>>();
    if (aa.size() != 3) throw DataError("axis_angle must have three entries");
    rot[static_cast<std::size_t>(l)] = axis_angle_to_matrix(Vec3(aa[0], aa[1], aa[2]));
  }
  return rot;
}

nlohmann::json pose_to_json(const std::vector<Vec3>& axis_angles) {
  nlohmann::json rotations = nlohmann::json::array();
  for (std::size_t l = 0; l < axis_angles.size(); ++l) {
    const Vec3& a = axis_angles[l];
    rotations.push_back({{"edge", l}, {"axis_angle", {a.x(), a.y(), a.z()}}});
  }
  return {{"format", "keyvol-pose"}, {"format_version", 1}, {"rotations", std::move(rotations)}};
}

void RigBundle::validate() const {
  mesh.validate();
  skeleton.validate();
  const auto n = skeleton.joints.rows();
  if (keypoints.rows() != n) throw ValidationError("rig keypoints: expected " + std::to_string(n) + " rows");
  if (adjacency.rows() != n || adjacency.cols() != n) throw ValidationError("rig adjacency: expected NxN");
  if (weights.rows() != mesh.num_vertices() || weights.cols() != skeleton.num_edges()) {
    throw ValidationError("weights.shape: expected " + std::to_string(mesh.num_vertices()) + "x" +
                          std::to_string(skeleton.num_edges()));
  }
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    if ((weights.row(i).array() < 0.0).any() || !weights.row(i).allFinite()) {
      throw ValidationError("weights.nonnegative: row " + std::to_string(i) + " has a negative or non-finite entry");
    }
    const double s = weights.row(i).sum();
    if (std::abs(s - 1.0) > 1e-6) {
      throw ValidationError("weights.row_sum: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

RigBundle make_rig(const Mesh& mesh, const Points3& keypoints, const MatX& adjacency,
                   std::optional<double> sigma, double alpha, std::optional<int> root) {
  RigBundle b;
  b.mesh = mesh;
  b.keypoints = keypoints;
  b.adjacency = adjacency;
  b.skeleton = orient_tree(build_mst(keypoints, adjacency), keypoints, adjacency, root);
  b.sigma = sigma.value_or(default_skinning_sigma(b.skeleton));
  b.alpha = alpha;
  b.weights = skinning_weights(mesh, b.skeleton, b.sigma, alpha);
  return b;
}

namespace {

Tensor to_tensor(const MatX& m) {
  Tensor t({m.rows(), m.cols()});
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  }
  return t;
}

MatX to_matrix(const Tensor& t) {
  MatX m(t.dim(0), t.dim(1));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t[static_cast<std::size_t>(i * m.cols() + j)];
  }
  return m;
}

}  // namespace

void export_rig_bundle(const RigBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json edges = nlohmann::json::array(), joints = nlohmann::json::array(),
                 adjacency = nlohmann::json::array();
  for (const auto& [p, c] : bundle.skeleton.edges) edges.push_back({p, c});
  for (Eigen::Index i = 0; i < bundle.skeleton.joints.rows(); ++i) {
    joints.push_back({bundle.skeleton.joints(i, 0), bundle.skeleton.joints(i, 1), bundle.skeleton.joints(i, 2)});
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < bundle.adjacency.cols(); ++j) row.push_back(bundle.adjacency(i, j));
    adjacency.push_back(std::move(row));
  }
  const nlohmann::json rig = {
      {"format", "keyvol-rig"},
      {"format_version", RigBundle::kFormatVersion},
      {"num_joints", bundle.skeleton.joints.rows()},
      {"num_edges", bundle.skeleton.num_edges()},
      {"num_vertices", bundle.mesh.num_vertices()},
      {"root", bundle.skeleton.root},
      {"joints", joints},
      {"edges", edges},
      {"adjacency", adjacency},
      {"parameters", {{"sigma", bundle.sigma}, {"alpha", bundle.alpha}}},
      {"deformation", "lbs-fk"},
      {"mesh", "mesh.obj"},
      {"tensors", "tensors"},
  };
  write_text_file(dir / "rig.json", rig.dump(2));
  write_obj(bundle.mesh, dir / "mesh.obj");
  TensorArchive archive("rig-tensors");
  archive.put("weights", to_tensor(bundle.weights), DType::kFloat64);
  archive.put("keypoints", to_tensor(bundle.keypoints), DType::kFloat64);
  archive.write_directory(dir / "tensors");
}

RigBundle import_rig_bundle(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "rig.json")) throw DataError("no rig.json in " + dir.string());
  const auto rig = nlohmann::json::parse(read_text_file(dir / "rig.json"));
  if (rig.value("format", "") != "keyvol-rig") throw DataError("rig.json is not a keyvol rig");
  if (rig.value("format_version", 0) != RigBundle::kFormatVersion) {
    throw DataError("unsupported rig format version " + rig.value("format_version", nlohmann::json(0)).dump());
  }
  RigBundle b;
  b.mesh = read_obj(dir / rig.at("mesh").get<std::string>());
  const int n = rig.at("num_joints").get<int>();
  b.skeleton.root = rig.at("root").get<int>();
  b.skeleton.joints = Points3(n, 3);
  const auto& joints = rig.at("joints");
  if (static_cast<int>(joints.size()) != n) throw DataError("rig.json joints: expected " + std::to_string(n));
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) b.skeleton.joints(i, c) = joints[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
  }
  for (const auto& e : rig.at("edges")) b.skeleton.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  b.adjacency = MatX(n, n);
  const auto& adj = rig.at("adjacency");
  if (static_cast<int>(adj.size()) != n) throw DataError("rig.json adjacency: expected " + std::to_string(n) + " rows");
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) b.adjacency(i, j) = adj[static_cast<std::size_t>(i)].at(static_cast<std::size_t>(j)).get<double>();
  }
  b.sigma = rig.at("parameters").at("sigma").get<double>();
  b.alpha = rig.at("parameters").at("alpha").get<double>();
  const TensorArchive archive = TensorArchive::read_directory(dir / rig.at("tensors").get<std::string>());
  b.weights = to_matrix(archive.get("weights", {b.mesh.num_vertices(), n - 1}));
  b.keypoints = to_matrix(archive.get("keypoints", {n, 3}));
  b.validate();
  return b;
}

}  // namespace keyvol
