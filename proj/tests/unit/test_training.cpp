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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "keyvol/backbone.hpp"
#include "keyvol/errors.hpp"
#include "keyvol/training.hpp"
#include "testing.hpp"

using namespace keyvol;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.views = 2;
  c.keypoints = 4;
  c.grid = 8;
  c.feature_channels = 6;
  c.head_hidden = 6;
  c.steps = 6;
  c.lr_main = 1e-3;
  c.seed = 3;
  return c;
}

std::vector<MultiViewSample> tiny_data(int count) {
  const CameraRig rig = make_orbit_rig(2, 10.0, 2.5, {16, 16});
  std::vector<MultiViewSample> out;
  for (int i = 0; i < count; ++i) out.push_back(synth_generate(SceneSpec::default_figure(), rig, 100 + static_cast<std::uint64_t>(i)));
  return out;
}

std::vector<int> channels_of(const MultiViewSample& s) {
  std::vector<int> c;
  for (const auto& f : s.layer_features) c.push_back(static_cast<int>(f.dim(0)));
  return c;
}

Tensor first_view(const MultiViewSample& s) {
  const auto H = s.images.dim(2), W = s.images.dim(3);
  return Tensor({3, H, W}, std::vector<double>(s.images.storage().begin(), s.images.storage().begin() + 3 * H * W));
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("config validation and JSON round trip") {
  const TrainConfig c = tiny_config();
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto bad = c.to_json();
  bad["views"] = 0;
  CHECK_THROWS_AS(TrainConfig::from_json(bad), ConfigError);
  bad = c.to_json();
  bad["lambda_mask"] = -1.0;
  CHECK_THROWS_AS(TrainConfig::from_json(bad), ConfigError);
  bad = c.to_json();
  bad["no_such_key"] = 1;
  CHECK_THROWS_AS(TrainConfig::from_json(bad), ConfigError);
  CHECK(TrainConfig::from_json(nlohmann::json::object()).to_json() == TrainConfig{}.to_json());
}

TEST_CASE("affine augmentation") {
  std::mt19937_64 rng(1);
  const Tensor img = testing::random_tensor({3, 12, 12}, rng, 0.0, 1.0);
  SUBCASE("identity parameters") { CHECK(affine_apply(img, AffineParams{}) == img); }
  SUBCASE("fixed seed") {
    auto r1 = make_rng(5, 9), r2 = make_rng(5, 9);
    CHECK(affine_augment(img, r1) == affine_augment(img, r2));
  }
  SUBCASE("quarter turn of a symmetric pattern") {
    Tensor pattern({1, 16, 16});
    for (int r = 0; r < 16; ++r) {
      for (int c = 0; c < 16; ++c) {
        const double y = r - 7.5, x = c - 7.5;
        pattern.at({0, r, c}) = std::exp(-(x * x + y * y) / 20.0) + 0.2 * std::cos(0.5 * x) * std::cos(0.5 * y);
      }
    }
    AffineParams quarter;
    quarter.angle = std::numbers::pi / 2.0;
    Tensor diff = affine_apply(pattern, quarter);
    diff.add_(pattern, -1.0);
    CHECK(diff.max_abs() < 1e-3);
  }
  SUBCASE("sampled parameters respect the ranges") {
    const AugmentRanges ranges;
    for (int i = 0; i < 200; ++i) {
      const AffineParams p = sample_affine(ranges, {64, 64}, rng);
      CHECK(std::abs(p.angle) <= 15.0 * std::numbers::pi / 180.0 + 1e-12);
      CHECK(std::abs(p.tx) <= 0.05 * 64 + 1e-12);
      CHECK(std::abs(p.ty) <= 0.05 * 64 + 1e-12);
      CHECK(p.scale >= 0.9);
      CHECK(p.scale <= 1.1);
    }
  }
}

TEST_CASE("reconstruction network contracts") {
  auto rng = make_rng(2, 0);
  const ReconParams p = ReconParams::init(rng);
  const Tensor img = testing::random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  const EdgeMap edge{testing::random_tensor({1, 16, 16}, rng, 0.0, 1.0), 0};
  const ReconOutput out = reconstruct_view(img, edge, p);
  CHECK(out.image.shape() == Shape{3, 16, 16});
  for (double v : out.image.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  SUBCASE("zero inputs give a bias image") {
    const Tensor zero_img({3, 16, 16});
    const EdgeMap zero_edge{Tensor({1, 16, 16}), 0};
    const Tensor a = reconstruct_view(zero_img, zero_edge, p).image;
    CHECK(reconstruct_view(zero_img, zero_edge, p).image == a);
    // With a zero input the first encoder weights never touch a nonzero value.
    ReconParams q = p;
    q.enc1.weight.fill(0.37);
    CHECK(reconstruct_view(zero_img, zero_edge, q).image == a);
  }
}

TEST_CASE("perceptual loss") {
  std::mt19937_64 rng(3);
  const PerceptualExtractor ext = PerceptualExtractor::make(7);
  CHECK(ext.stages.size() == 4);
  const Tensor a = testing::random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  const Tensor b = testing::random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  CHECK(perceptual_loss(a, a, ext) == 0.0);
  CHECK(perceptual_loss(a, b, ext) > 0.0);
  CHECK(perceptual_loss(a, b, ext) == perceptual_loss(b, a, ext));
  Tensor x = a;
  auto loss = [&] { return perceptual_loss(x, b, ext); };
  Tensor grad;
  perceptual_loss(x, b, ext, &grad);
  const auto r = testing::check_gradient(x.values(), grad.values(), loss, 20, rng);
  CHECK_MESSAGE(r.ok(20), r.worst);
}

TEST_CASE("mask loss") {
  const Tensor ones({1, 4, 4}, 1.0);
  CHECK(mask_loss(ones, ones) == 0.0);
  CHECK(mask_loss(Tensor({1, 4, 4}), ones) == doctest::Approx(1.0));
  CHECK(mask_loss(Tensor({1, 4, 4}, 0.5), ones) == doctest::Approx(0.25));
  CHECK_THROWS_AS(mask_loss(ones, Tensor({1, 4, 4}, 0.5)), ValidationError);
  std::mt19937_64 rng(4);
  Tensor e = testing::random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  Tensor m({1, 4, 4});
  for (std::size_t i = 0; i < 16; i += 3) m[i] = 1.0;
  auto loss = [&] { return mask_loss(e, m); };
  Tensor grad;
  mask_loss(e, m, &grad);
  CHECK(testing::check_gradient(e.values(), grad.values(), loss, 16, rng).ok(16));
}

TEST_CASE("total loss") {
  TrainConfig c;
  c.lambda_vgg = 1.0;
  c.lambda_mask = 0.5;
  CHECK(total_loss({{2.0, 4.0}}, c) == doctest::Approx(4.0));
  CHECK(total_loss({{0.0, 0.0}, {0.0, 0.0}}, c) == 0.0);
  const std::vector<ViewLoss> v{{0.0, 1.0}, {0.0, 3.0}};
  const double base = total_loss(v, c);
  c.lambda_mask = 1.0;
  CHECK(total_loss(v, c) == doctest::Approx(2.0 * base));
}

TEST_CASE("every parameter group receives gradient") {
  TrainConfig c = tiny_config();
  c.volume_final_gain = 0.5;
  const auto data = tiny_data(1);
  const Model model = Model::init(c, channels_of(data[0]), data[0].image_size());
  Model grads = model.zeros_like();
  const PerceptualExtractor ext = PerceptualExtractor::make(c.perceptual_seed);
  const MultiViewSample s = select_views(data[0], c.views);
  const double loss = sample_loss_and_grad(model, s, first_view(s), ext, &grads, 1.0, nullptr);
  CHECK(std::isfinite(loss));
  std::map<std::string, double> norms;
  for (const auto& [name, t] : grads.named_tensors()) {
    const std::string group = name.substr(0, name.find('.'));
    norms[group] += t->dot(*t);
  }
  for (const char* g : {"aggregator", "head", "volume", "adjacency", "recon"}) {
    CAPTURE(g);
    CHECK(norms[g] > 0.0);
  }
}

TEST_CASE("end-to-end gradient against finite differences") {
  TrainConfig c = tiny_config();
  c.volume_final_gain = 0.5;
  const auto data = tiny_data(1);
  Model model = Model::init(c, channels_of(data[0]), data[0].image_size());
  // Equal edge weights make the per-pixel max tie exactly at segment endpoints.
  for (std::size_t j = 0; j < model.adjacency_logits.numel(); ++j) {
    model.adjacency_logits[j] = 0.37 * std::sin(3.1 * static_cast<double>(j) + 0.4);
  }
  Model grads = model.zeros_like();
  const PerceptualExtractor ext = PerceptualExtractor::make(c.perceptual_seed);
  const MultiViewSample s = select_views(data[0], c.views);
  const Tensor app = first_view(s);
  sample_loss_and_grad(model, s, app, ext, &grads, 1.0, nullptr);
  auto loss = [&] { return sample_loss_and_grad(model, s, app, ext, nullptr, 1.0, nullptr); };
  std::mt19937_64 rng(5);
  auto params = model.named_tensors();
  auto gparams = grads.named_tensors();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params[i].first;
    if (name != "adjacency.logits" && name != "head.w2" && name != "aggregator.layer_weights" &&
        name != "volume.0.weight" && name != "recon.out.weight") {
      continue;
    }
    CAPTURE(name);
    Tensor* g = gparams[i].second;
    auto nonzero = [&](std::size_t j) { return (*g)[j] != 0.0; };
    const auto r = testing::check_gradient(params[i].second->values(), g->values(), loss, 4, rng, nonzero, 1e-5, 1e-3);
    CHECK_MESSAGE(r.ok(1), r.worst);
  }
}

TEST_CASE("training smoke run, decomposition and resume equivalence") {
  const auto data = tiny_data(3);
  TrainConfig c = tiny_config();
  c.batch_size = 2;
  Trainer full(c, data);
  std::vector<StepStats> ref;
  full.run(std::nullopt, [&](const StepStats& s) { ref.push_back(s); });
  REQUIRE(ref.size() == 6);
  for (const auto& s : ref) {
    CHECK(std::isfinite(s.loss));
    CHECK(std::abs(total_loss(s.per_view, c) - s.loss) < 1e-9);
  }

  Trainer first(c, data);
  first.run(3);
  const fs::path ckpt = fs::temp_directory_path() / "keyvol_unit_resume.tar";
  first.save_checkpoint(ckpt);
  Trainer resumed = Trainer::resume(ckpt, data);
  CHECK(resumed.steps_done() == 3);
  std::vector<StepStats> tail;
  resumed.run(std::nullopt, [&](const StepStats& s) { tail.push_back(s); });
  REQUIRE(tail.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(tail[i].loss - ref[3 + i].loss) <= 1e-6);
  fs::remove(ckpt);

  Trainer again(c, data);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(again.step().loss - ref[static_cast<std::size_t>(i)].loss) <= 1e-6);
}

TEST_CASE("checkpoints reload the model") {
  const auto data = tiny_data(1);
  TrainConfig c = tiny_config();
  c.steps = 2;
  Trainer t(c, data);
  t.run();
  const fs::path ckpt = fs::temp_directory_path() / "keyvol_unit_ckpt.tar";
  t.save_checkpoint(ckpt);
  std::int64_t step = 0;
  const Model m = load_model(ckpt, &step);
  CHECK(step == 2);
  CHECK(predict_keypoints(m, data[0]).positions == predict_keypoints(t.model(), data[0]).positions);
  fs::remove(ckpt);
}

TEST_CASE("incompatible inputs are refused") {
  auto data = tiny_data(1);
  TrainConfig c = tiny_config();
  const Model m = Model::init(c, channels_of(data[0]), data[0].image_size());
  MultiViewSample no_features = data[0];
  no_features.layer_features.clear();
  CHECK_THROWS_AS(predict_keypoints(m, no_features), DataError);
  c.views = 3;
  CHECK_THROWS_AS(Trainer(c, data), DataError);
}

}  // TEST_SUITE
