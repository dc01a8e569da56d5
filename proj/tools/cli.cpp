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

#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "json.hpp"

#include "keyvol/backbone.hpp"
#include "keyvol/errors.hpp"
#include "keyvol/evaluation.hpp"
#include "keyvol/hashing.hpp"
#include "keyvol/keypoints.hpp"
#include "keyvol/rigging.hpp"
#include "keyvol/tensor_io.hpp"
#include "keyvol/training.hpp"

// httplib pulls in <resolv.h>, whose _res macro clashes with Eigen internals.
#include <httplib.h>

#ifndef KEYVOL_VERSION
#define KEYVOL_VERSION "dev"
#endif

namespace keyvol::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

struct Manifest {
  std::string command;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::uint64_t seed = 0;
  Clock::time_point start = Clock::now();

  void write(const fs::path& dir, const std::vector<std::string>& hash_exclude = {"run_manifest.json"}) const {
    const double wall = std::chrono::duration<double>(Clock::now() - start).count();
    json doc = {{"command", command},
                {"code_version", KEYVOL_VERSION},
                {"config", config},
                {"inputs", inputs},
                {"outputs", outputs},
                {"seed", seed},
                {"wall_time_s", wall},
                {"output_hash", directory_hash(dir, hash_exclude)}};
    write_text_file(dir / "run_manifest.json", doc.dump(2));
  }
};

json read_json_file(const fs::path& path, bool is_config) {
  if (!fs::exists(path)) {
    const std::string msg = "file not found: " + path.string();
    if (is_config) throw ConfigError(msg);
    throw DataError(msg);
  }
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    const std::string msg = "cannot parse " + path.string() + ": " + e.what();
    if (is_config) throw ConfigError(msg);
    throw DataError(msg);
  }
}

Points3 tensor_points(const Tensor& t) {
  Points3 p(t.dim(0), 3);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (int c = 0; c < 3; ++c) p(i, c) = t[static_cast<std::size_t>(i * 3 + c)];
  }
  return p;
}

json matrix_json(const MatX& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatX matrix_from_json(const json& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  MatX m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != n) throw DataError("adjacency must be square");
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
  }
  return m;
}

std::vector<MultiViewSample> load_samples(const DatasetIndex& index, std::size_t begin, std::size_t end) {
  std::vector<MultiViewSample> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(read_bundle(index.sample_path(i)));
  return out;
}

// ---- generate-synthetic ---------------------------------------------------

struct GenerateArgs {
  int count = 1;
  std::string out;
  std::uint64_t seed = 0;
  int views = 4;
  int size = 64;
  double elevation = 10.0;
  double radius = 2.5;
  bool meshes = false;
  std::string config;
};

void cmd_generate(const GenerateArgs& a) {
  Manifest m;
  m.command = "generate-synthetic";
  SceneSpec spec = SceneSpec::default_figure();
  if (!a.config.empty()) {
    const json doc = read_json_file(a.config, true);
    try {
      if (doc.contains("scene")) spec = SceneSpec::from_json(doc.at("scene"));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("scene config: ") + e.what());
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("scene config: ") + e.what());
    }
  }
  if (a.count < 0) throw ConfigError("--count must be non-negative");
  CameraRig rig;
  try {
    rig = make_orbit_rig(a.views, a.elevation, a.radius, {a.size, a.size});
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  m.seed = a.seed;
  m.config = {{"count", a.count},       {"views", a.views},   {"size", a.size},
              {"elevation_deg", a.elevation}, {"radius", a.radius}, {"meshes", a.meshes},
              {"scene", spec.to_json()}};
  const fs::path out = a.out;
  const DatasetIndex index = generate_dataset(out, a.count, spec, rig, a.seed, a.meshes);
  m.outputs = {{"dataset", out.string()}, {"samples", index.samples.size()}};
  m.write(out);
  std::printf("wrote %zu samples to %s\n", index.samples.size(), out.string().c_str());
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string dataset, config, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> views, keypoints, grid, steps, train_count;
  std::optional<double> lr_main, lr_recon;
  std::string device = "cpu";
};

TrainConfig resolve_config(const TrainArgs& a) {
  json doc = a.config.empty() ? json::object() : read_json_file(a.config, true);
  if (a.seed) doc["seed"] = *a.seed;
  if (a.views) doc["views"] = *a.views;
  if (a.keypoints) doc["keypoints"] = *a.keypoints;
  if (a.grid) doc["grid"] = *a.grid;
  if (a.steps) doc["steps"] = *a.steps;
  if (a.lr_main) doc["lr_main"] = *a.lr_main;
  if (a.lr_recon) doc["lr_recon"] = *a.lr_recon;
  return TrainConfig::from_json(doc);
}

void cmd_train(const TrainArgs& a) {
  Manifest m;
  m.command = "train";
  const TrainConfig config = resolve_config(a);
  if (a.device != "cpu") spdlog::warn("device '{}' requested; this build runs on the CPU", a.device);
  const DatasetIndex index = read_dataset(a.dataset);
  std::size_t count = index.samples.size();
  if (a.train_count) {
    if (*a.train_count < 1 || static_cast<std::size_t>(*a.train_count) > count) {
      throw ConfigError("--train-count must be between 1 and the dataset size");
    }
    count = static_cast<std::size_t>(*a.train_count);
  }
  if (count == 0) throw DataError("dataset " + a.dataset + " is empty");
  const auto data = load_samples(index, 0, count);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_text_file(out / "config.json", config.to_json().dump(2));
  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = fs::path(a.resume);
  train(data, config, out, resume);
  m.seed = config.seed;
  m.config = config.to_json();
  m.config["device"] = a.device;
  m.inputs = {{"dataset", a.dataset}, {"dataset_hash", directory_hash(a.dataset)}, {"samples", count}};
  if (resume) m.inputs["resume"] = resume->string();
  m.outputs = {{"checkpoint", (out / "checkpoint.tar").string()}, {"log", (out / "train_log.jsonl").string()}};
  // The log carries wall-clock times, so it stays out of the content hash.
  m.write(out, {"run_manifest.json", "train_log.jsonl"});
  std::printf("trained %d steps into %s\n", config.steps, out.string().c_str());
}

// ---- infer -------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, bundle, out;
  std::optional<int> keypoints, grid;
};

json infer_json(const Model& model, const MultiViewSample& sample) {
  const KeypointSet3D kps = predict_keypoints(model, sample);
  json doc = keypoints_to_json(kps);
  doc["adjacency"] = matrix_json(model.adjacency());
  json views = json::array();
  for (int k = 0; k < sample.num_views(); ++k) {
    const ProjectedPoints proj = project_points(kps.positions, sample.rig.cameras[static_cast<std::size_t>(k)]);
    json pts = json::array();
    for (Eigen::Index i = 0; i < kps.positions.rows(); ++i) {
      const Vec2 rc = to_array_index(proj.pixels.row(i).transpose(), sample.image_size());
      pts.push_back({{"pixel", {proj.pixels(i, 0), proj.pixels(i, 1)}},
                     {"row_col", {rc.x(), rc.y()}},
                     {"valid", proj.valid[static_cast<std::size_t>(i)] != 0}});
    }
    views.push_back({{"view", k}, {"keypoints", std::move(pts)}});
  }
  doc["projections"] = std::move(views);
  return doc;
}

void cmd_infer(const InferArgs& a) {
  Manifest m;
  m.command = "infer";
  const Model model = load_model(a.checkpoint);
  if (a.keypoints && *a.keypoints != model.config.keypoints) {
    throw ConfigError("config mismatch: --keypoints " + std::to_string(*a.keypoints) + " but checkpoint has N=" +
                      std::to_string(model.config.keypoints));
  }
  if (a.grid && *a.grid != model.config.grid) {
    throw ConfigError("config mismatch: --grid " + std::to_string(*a.grid) + " but checkpoint has M=" +
                      std::to_string(model.config.grid));
  }
  const MultiViewSample sample = read_bundle(a.bundle);
  const json doc = infer_json(model, sample);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_text_file(out / "keypoints.json", doc.dump(2));
  m.seed = model.config.seed;
  m.config = model.config.to_json();
  m.inputs = {{"checkpoint", a.checkpoint}, {"bundle", a.bundle}};
  m.outputs = {{"keypoints", (out / "keypoints.json").string()}};
  m.write(out);
  std::printf("wrote %s\n", (out / "keypoints.json").string().c_str());
}

// ---- evaluate ------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint, dataset, out, regressor = "linear";
  std::optional<int> fit_count;
  std::uint64_t seed = 0;
};

void cmd_evaluate(const EvaluateArgs& a) {
  Manifest m;
  m.command = "evaluate";
  const RegressorSpec spec = RegressorSpec::parse(a.regressor);
  const Model model = load_model(a.checkpoint);
  const DatasetIndex index = read_dataset(a.dataset);
  const std::size_t D = index.samples.size();
  if (D < 2) throw DataError("evaluation needs at least two labeled samples");
  std::size_t fit = a.fit_count ? static_cast<std::size_t>(*a.fit_count) : (3 * D) / 4;
  if (fit < 1 || fit >= D) throw ConfigError("--fit-count must leave at least one held-out sample");
  std::vector<Points3> fk, fg, tk, tg;
  for (std::size_t i = 0; i < D; ++i) {
    const MultiViewSample s = read_bundle(index.sample_path(i));
    if (!s.ground_truth_joints) throw DataError(index.samples[i] + " has no ground-truth joints");
    const Points3 kps = predict_keypoints(model, s).positions;
    (i < fit ? fk : tk).push_back(kps);
    (i < fit ? fg : tg).push_back(tensor_points(*s.ground_truth_joints));
  }
  const EvaluationReport report = evaluate_regression(fk, fg, tk, tg, spec, a.seed);
  json doc = report.to_json();
  doc["dataset_hash"] = directory_hash(a.dataset);
  doc["checkpoint"] = a.checkpoint;
  doc["fit_frames"] = fit;
  doc["test_frames"] = D - fit;
  doc["input_layout"] = "per frame [x1 y1 z1 ... xN yN zN]";
  const fs::path out = a.out;
  fs::create_directories(out);
  write_text_file(out / "metrics.json", doc.dump(2));
  m.seed = a.seed;
  m.config = {{"regressor", spec.to_json()}, {"fit_count", fit}};
  m.inputs = {{"checkpoint", a.checkpoint}, {"dataset", a.dataset}};
  m.outputs = {{"metrics", (out / "metrics.json").string()}};
  m.write(out);
  std::printf("mpjpe %.6f n_mpjpe %.6f p_mpjpe %.6f\n", report.mean.mpjpe, report.mean.n_mpjpe, report.mean.p_mpjpe);
}

// ---- rig -----------------------------------------------------------------------

struct RigArgs {
  std::string keypoints, checkpoint, bundle, mesh, out;
  std::optional<double> sigma;
  double alpha = 1.0;
  std::optional<int> root;
};

void cmd_rig(const RigArgs& a) {
  Manifest m;
  m.command = "rig";
  if (a.mesh.empty() || !fs::exists(a.mesh)) throw DataError("mesh not found: " + a.mesh);
  Points3 kps;
  MatX adjacency;
  if (!a.keypoints.empty()) {
    const json doc = read_json_file(a.keypoints, false);
    kps = keypoints_from_json(doc).positions;
    adjacency = doc.contains("adjacency") ? matrix_from_json(doc.at("adjacency"))
                                          : MatX::Constant(kps.rows(), kps.rows(), 0.5);
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i) adjacency(i, i) = 0.0;
    m.inputs["keypoints"] = a.keypoints;
  } else if (!a.checkpoint.empty() && !a.bundle.empty()) {
    const Model model = load_model(a.checkpoint);
    kps = predict_keypoints(model, read_bundle(a.bundle)).positions;
    adjacency = model.adjacency();
    m.inputs["checkpoint"] = a.checkpoint;
    m.inputs["bundle"] = a.bundle;
  } else {
    throw ConfigError("rig needs --keypoints, or --checkpoint together with --bundle");
  }
  const Mesh mesh = read_obj(a.mesh);
  const RigBundle bundle = make_rig(mesh, kps, adjacency, a.sigma, a.alpha, a.root);
  const fs::path out = a.out;
  export_rig_bundle(bundle, out);
  m.inputs["mesh"] = a.mesh;
  m.config = {{"sigma", bundle.sigma}, {"alpha", bundle.alpha}, {"root", bundle.skeleton.root}};
  m.outputs = {{"rig", out.string()}, {"edges", bundle.skeleton.num_edges()}};
  m.write(out);
  std::printf("rig with %d edges written to %s\n", bundle.skeleton.num_edges(), out.string().c_str());
}

// ---- pose ----------------------------------------------------------------------

struct PoseArgs {
  std::string rig, pose, out;
};

void cmd_pose(const PoseArgs& a) {
  Manifest m;
  m.command = "pose";
  const RigBundle bundle = import_rig_bundle(a.rig);
  const json pose = read_json_file(a.pose, false);
  const auto rotations = pose_from_json(pose, bundle.skeleton.num_edges());
  Mesh posed = bundle.mesh;
  posed.vertices = lbs_deform(bundle.mesh, bundle.skeleton, rotations, bundle.weights);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_obj(posed, out / "posed.obj");
  write_text_file(out / "pose.json", pose.dump(2));
  m.inputs = {{"rig", a.rig}, {"pose", a.pose}};
  m.outputs = {{"mesh", (out / "posed.obj").string()}};
  m.write(out);
  std::printf("wrote %s\n", (out / "posed.obj").string().c_str());
}

// ---- serve ---------------------------------------------------------------------

struct ServeArgs {
  std::string dir = ".";
  std::string host = "127.0.0.1";
  int port = 8080;
};

void cmd_serve(const ServeArgs& a) {
  if (!fs::is_directory(a.dir)) throw DataError("not a directory: " + a.dir);
  httplib::Server server;
  if (!server.set_mount_point("/", a.dir)) throw DataError("cannot serve " + a.dir);
  server.set_file_extension_and_mimetype_mapping("obj", "text/plain");
  std::printf("serving %s on http://%s:%d/\n", a.dir.c_str(), a.host.c_str(), a.port);
  std::fflush(stdout);
  if (!server.listen(a.host, a.port)) throw Error("cannot listen on " + a.host + ":" + std::to_string(a.port));
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"keyvol: 3D keypoints from multi-view feature volumes, training and rigging"};
  app.require_subcommand(1);
  app.set_version_flag("--version", KEYVOL_VERSION);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

  std::function<void()> action;

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-synthetic", "write a synthetic multi-view dataset");
  g->add_option("--count", gen.count, "number of samples")->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--views", gen.views, "cameras on the orbit")->capture_default_str();
  g->add_option("--size", gen.size, "image height and width")->capture_default_str();
  g->add_option("--elevation", gen.elevation, "orbit elevation in degrees")->capture_default_str();
  g->add_option("--radius", gen.radius, "orbit radius")->capture_default_str();
  g->add_flag("--meshes", gen.meshes, "also write the posed figure mesh per sample");
  g->add_option("--config", gen.config, "JSON with an optional \"scene\" object");
  g->callback([&] { action = [&] { cmd_generate(gen); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the keypoint model");
  t->add_option("--dataset", tr.dataset, "dataset directory")->required();
  t->add_option("--config", tr.config, "training config JSON");
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--seed", tr.seed);
  t->add_option("--views", tr.views);
  t->add_option("--keypoints", tr.keypoints);
  t->add_option("--grid", tr.grid);
  t->add_option("--steps", tr.steps);
  t->add_option("--lr-main", tr.lr_main);
  t->add_option("--lr-recon", tr.lr_recon);
  t->add_option("--train-count", tr.train_count, "use only the first n samples");
  t->add_option("--resume", tr.resume, "checkpoint to continue from");
  t->add_option("--device", tr.device, "accepted for compatibility; computation runs on the CPU");
  t->callback([&] { action = [&] { cmd_train(tr); }; });

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "predict 3D keypoints for a feature bundle");
  i->add_option("--checkpoint", inf.checkpoint)->required();
  i->add_option("--bundle", inf.bundle)->required();
  i->add_option("--out", inf.out)->required();
  i->add_option("--keypoints", inf.keypoints, "expected N, checked against the checkpoint");
  i->add_option("--grid", inf.grid, "expected M, checked against the checkpoint");
  i->callback([&] { action = [&] { cmd_infer(inf); }; });

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "regress joints from keypoints and report pose errors");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--dataset", ev.dataset)->required();
  e->add_option("--out", ev.out)->required();
  e->add_option("--regressor", ev.regressor)->check(CLI::IsMember({"linear", "mlp"}))->capture_default_str();
  e->add_option("--fit-count", ev.fit_count, "frames used to fit the regressor (default 3/4)");
  e->add_option("--seed", ev.seed)->capture_default_str();
  e->callback([&] { action = [&] { cmd_evaluate(ev); }; });

  RigArgs rg;
  auto* r = app.add_subcommand("rig", "build a skeleton and skinning weights for a mesh");
  r->add_option("--keypoints", rg.keypoints, "keypoints JSON (may include an adjacency)");
  r->add_option("--checkpoint", rg.checkpoint);
  r->add_option("--bundle", rg.bundle, "feature bundle to infer keypoints from");
  r->add_option("--mesh", rg.mesh, "OBJ mesh")->required();
  r->add_option("--out", rg.out)->required();
  r->add_option("--sigma", rg.sigma, "default 0.1 x skeleton bounding-box diagonal");
  r->add_option("--alpha", rg.alpha)->capture_default_str();
  r->add_option("--root", rg.root);
  r->callback([&] { action = [&] { cmd_rig(rg); }; });

  PoseArgs ps;
  auto* p = app.add_subcommand("pose", "deform a rig bundle with a pose file");
  p->add_option("--rig", ps.rig)->required();
  p->add_option("--pose", ps.pose)->required();
  p->add_option("--out", ps.out)->required();
  p->callback([&] { action = [&] { cmd_pose(ps); }; });

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "serve a directory of static files for the viewer");
  s->add_option("--dir", sv.dir)->capture_default_str();
  s->add_option("--host", sv.host)->capture_default_str();
  s->add_option("--port", sv.port)->capture_default_str();
  s->callback([&] { action = [&] { cmd_serve(sv); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));
  try {
    if (action) action();
    return kOk;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kConfig;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kNumeric;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const ValidationError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kGeneric;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("keyvol");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace keyvol::cli
