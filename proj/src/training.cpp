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

#include "keyvol/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

#include "keyvol/errors.hpp"
#include "keyvol/tensor_io.hpp"

namespace keyvol {

namespace {

constexpr std::uint64_t kOrderStream = 1ull << 20;
constexpr std::uint64_t kAugmentStream = 1ull << 40;

template <typename T>
void read_field(const nlohmann::json& doc, const char* key, T& out) {
  auto it = doc.find(key);
  if (it == doc.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

Tensor view_slice(const Tensor& t, std::int64_t k) {
  Shape shape(t.shape().begin() + 1, t.shape().end());
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  const auto begin = t.storage().begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(k));
  return Tensor(std::move(shape), std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n)));
}

void add_conv(nn::ConvParams& acc, const nn::ConvGrads& g) {
  acc.weight.add_(g.weight);
  acc.bias.add_(g.bias);
}

}  // namespace

// ---- config --------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (views < 1) fail("views must be at least 1");
  if (keypoints < 2) fail("keypoints must be at least 2");
  if (grid < 2) fail("grid must be at least 2");
  if (feature_channels < 1 || head_hidden < 1) fail("channel widths must be positive");
  if (lambda_vgg < 0.0 || lambda_mask < 0.0) fail("loss weights must be non-negative");
  if (!(lr_main >= 0.0) || !(lr_recon >= 0.0)) fail("learning rates must be non-negative");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (steps <= 0) fail("steps must be positive");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (sigma_line < 0.0) fail("sigma_line must be non-negative");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (augment_ranges.min_scale <= 0.0 || augment_ranges.max_scale < augment_ranges.min_scale) {
    fail("augmentation scale range is invalid");
  }
  if (augment_ranges.max_rotation_deg < 0.0 || augment_ranges.max_translation < 0.0) {
    fail("augmentation ranges must be non-negative");
  }
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
}

double TrainConfig::sigma_for(ImageSize size) const {
  return sigma_line > 0.0 ? sigma_line : default_sigma_line(size);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"views", views},
          {"keypoints", keypoints},
          {"grid", grid},
          {"feature_channels", feature_channels},
          {"head_hidden", head_hidden},
          {"lambda_vgg", lambda_vgg},
          {"lambda_mask", lambda_mask},
          {"lr_main", lr_main},
          {"lr_recon", lr_recon},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"steps", steps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"sigma_line", sigma_line},
          {"temperature", temperature},
          {"augment", augment},
          {"augment_ranges",
           {{"max_rotation_deg", augment_ranges.max_rotation_deg},
            {"max_translation", augment_ranges.max_translation},
            {"min_scale", augment_ranges.min_scale},
            {"max_scale", augment_ranges.max_scale}}},
          {"perceptual_seed", perceptual_seed},
          {"volume_final_gain", volume_final_gain},
          {"checkpoint_every", checkpoint_every},
          {"diffusion_timestep", diffusion_timestep},
          {"diffusion_steps", diffusion_steps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  const nlohmann::json known = c.to_json();
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  read_field(doc, "views", c.views);
  read_field(doc, "keypoints", c.keypoints);
  read_field(doc, "grid", c.grid);
  read_field(doc, "feature_channels", c.feature_channels);
  read_field(doc, "head_hidden", c.head_hidden);
  read_field(doc, "lambda_vgg", c.lambda_vgg);
  read_field(doc, "lambda_mask", c.lambda_mask);
  read_field(doc, "lr_main", c.lr_main);
  read_field(doc, "lr_recon", c.lr_recon);
  read_field(doc, "weight_decay", c.weight_decay);
  read_field(doc, "clip_norm", c.clip_norm);
  read_field(doc, "steps", c.steps);
  read_field(doc, "batch_size", c.batch_size);
  read_field(doc, "seed", c.seed);
  read_field(doc, "sigma_line", c.sigma_line);
  read_field(doc, "temperature", c.temperature);
  read_field(doc, "augment", c.augment);
  if (auto it = doc.find("augment_ranges"); it != doc.end()) {
    if (!it->is_object()) throw ConfigError("augment_ranges must be an object");
    const nlohmann::json known_ranges = known.at("augment_ranges");
    for (const auto& [key, value] : it->items()) {
      if (!known_ranges.contains(key)) throw ConfigError("unknown augment_ranges field '" + key + "'");
    }
    read_field(*it, "max_rotation_deg", c.augment_ranges.max_rotation_deg);
    read_field(*it, "max_translation", c.augment_ranges.max_translation);
    read_field(*it, "min_scale", c.augment_ranges.min_scale);
    read_field(*it, "max_scale", c.augment_ranges.max_scale);
  }
  read_field(doc, "perceptual_seed", c.perceptual_seed);
  read_field(doc, "volume_final_gain", c.volume_final_gain);
  read_field(doc, "checkpoint_every", c.checkpoint_every);
  read_field(doc, "diffusion_timestep", c.diffusion_timestep);
  read_field(doc, "diffusion_steps", c.diffusion_steps);
  c.validate();
  return c;
}

// ---- augmentation --------------------------------------------------------

AffineParams sample_affine(const AugmentRanges& ranges, ImageSize size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> scale(ranges.min_scale, ranges.max_scale);
  AffineParams p;
  p.angle = unit(rng) * ranges.max_rotation_deg * std::numbers::pi / 180.0;
  p.tx = unit(rng) * ranges.max_translation * size.width;
  p.ty = unit(rng) * ranges.max_translation * size.height;
  p.scale = scale(rng);
  return p;
}

Tensor affine_apply(const Tensor& image, const AffineParams& params) {
  if (image.rank() != 3) throw ShapeError("affine_apply expects C x H x W, got " + shape_string(image.shape()));
  if (!(params.scale > 0.0)) throw ValidationError("affine scale must be positive");
  const auto C = image.dim(0);
  const ImageSize size{static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2))};
  const int H = size.height, W = size.width;
  const double c = std::cos(params.angle), s = std::sin(params.angle);
  Tensor out(image.shape());
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int r = 0; r < H; ++r) {
    for (int col = 0; col < W; ++col) {
      const Vec2 u = from_array_index(Vec2(r, col), size) - Vec2(params.tx, params.ty);
      // Inverse rotation and scale.
      const Vec2 src((c * u.x() + s * u.y()) / params.scale, (-s * u.x() + c * u.y()) / params.scale);
      const Vec2 rc = to_array_index(src, size);
      const double r0f = std::floor(rc.x()), c0f = std::floor(rc.y());
      const double fr = rc.x() - r0f, fc = rc.y() - c0f;
      const int r0 = static_cast<int>(r0f), c0 = static_cast<int>(c0f);
      const int rr[2] = {r0, r0 + 1};
      const int cc[2] = {c0, c0 + 1};
      const double wr[2] = {1.0 - fr, fr};
      const double wc[2] = {1.0 - fc, fc};
      for (std::int64_t ch = 0; ch < C; ++ch) {
        const double* src_plane = image.data() + static_cast<std::size_t>(ch) * plane;
        double v = 0.0;
        for (int a = 0; a < 2; ++a) {
          if (rr[a] < 0 || rr[a] >= H || wr[a] == 0.0) continue;
          for (int b = 0; b < 2; ++b) {
            if (cc[b] < 0 || cc[b] >= W || wc[b] == 0.0) continue;
            v += wr[a] * wc[b] * src_plane[static_cast<std::size_t>(rr[a]) * W + cc[b]];
          }
        }
        out[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(r) * W + col] = v;
      }
    }
  }
  return out;
}

Tensor affine_augment(const Tensor& image, std::mt19937_64& rng, const AugmentRanges& ranges) {
  if (image.rank() != 3) throw ShapeError("affine_augment expects C x H x W");
  const ImageSize size{static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2))};
  return affine_apply(image, sample_affine(ranges, size, rng));
}

// ---- reconstruction network ----------------------------------------------

ReconParams ReconParams::init(std::mt19937_64& rng) {
  ReconParams p;
  p.enc1 = nn::init_conv2d(3, 16, 3, rng);
  p.enc2 = nn::init_conv2d(16, 32, 3, rng);
  p.dec1 = nn::init_conv2d(33, 32, 3, rng);
  p.dec2 = nn::init_conv2d(33, 16, 3, rng);
  p.dec3 = nn::init_conv2d(17, 16, 3, rng);
  p.out = nn::init_conv2d(16, 3, 3, rng, 0.5);
  return p;
}

AppearanceCode encode_appearance(const Tensor& image, const ReconParams& params) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0) {
    throw ShapeError("appearance input must be 3 x H x W with H, W divisible by 4, got " +
                     shape_string(image.shape()));
  }
  AppearanceCode c;
  c.input = image;
  c.pre1 = nn::conv2d(image, params.enc1, 2, 1);
  c.act1 = c.pre1;
  nn::leaky_relu_(c.act1, params.slope);
  c.pre2 = nn::conv2d(c.act1, params.enc2, 2, 1);
  c.code = c.pre2;
  nn::leaky_relu_(c.code, params.slope);
  return c;
}

Tensor decode_view(const AppearanceCode& code, const Tensor& edge, const ReconParams& params,
                   DecodeCache* cache) {
  const Shape expected{1, code.input.dim(1), code.input.dim(2)};
  Tensor e1 = edge.reshaped(expected);
  Tensor e2 = nn::avg_pool2(e1);
  Tensor e4 = nn::avg_pool2(e2);
  Tensor in1 = nn::concat_channels(code.code, e4);
  Tensor pre1 = nn::conv2d(in1, params.dec1, 1, 1);
  Tensor a1 = pre1;
  nn::leaky_relu_(a1, params.slope);
  Tensor in2 = nn::concat_channels(nn::upsample_nearest2(a1), e2);
  Tensor pre2 = nn::conv2d(in2, params.dec2, 1, 1);
  Tensor a2 = pre2;
  nn::leaky_relu_(a2, params.slope);
  Tensor in3 = nn::concat_channels(nn::upsample_nearest2(a2), e1);
  Tensor pre3 = nn::conv2d(in3, params.dec3, 1, 1);
  Tensor in4 = pre3;
  nn::leaky_relu_(in4, params.slope);
  Tensor out = nn::conv2d(in4, params.out, 1, 1);
  for (auto& v : out.values()) v = nn::sigmoid(v);
  if (cache) {
    *cache = DecodeCache{std::move(e4), std::move(e2), std::move(e1), std::move(in1), std::move(pre1),
                         std::move(in2), std::move(pre2), std::move(in3), std::move(pre3),
                         std::move(in4), out};
  }
  return out;
}

ReconOutput reconstruct_view(const Tensor& appearance, const EdgeMap& edge,
                             const ReconParams& params) {
  const AppearanceCode code = encode_appearance(appearance, params);
  return {decode_view(code, edge.values, params), edge};
}

Tensor decode_view_backward(const Tensor& grad_image, const AppearanceCode& code,
                            const ReconParams& params, const DecodeCache& cache,
                            ReconParams& grads, Tensor& grad_code) {
  Tensor g = grad_image;
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= cache.out[i] * (1.0 - cache.out[i]);
  nn::ConvGrads go = nn::conv2d_backward(g, cache.in4, params.out, 1, 1);
  add_conv(grads.out, go);
  nn::leaky_relu_backward_(go.input, cache.pre3, params.slope);
  nn::ConvGrads g3 = nn::conv2d_backward(go.input, cache.in3, params.dec3, 1, 1);
  add_conv(grads.dec3, g3);
  auto [g_u2, g_e1] = nn::split_channels(g3.input, g3.input.dim(0) - 1);
  Tensor g_a2 = nn::upsample_nearest2_backward(g_u2, cache.pre2.shape());
  nn::leaky_relu_backward_(g_a2, cache.pre2, params.slope);
  nn::ConvGrads g2 = nn::conv2d_backward(g_a2, cache.in2, params.dec2, 1, 1);
  add_conv(grads.dec2, g2);
  auto [g_u1, g_e2] = nn::split_channels(g2.input, g2.input.dim(0) - 1);
  Tensor g_a1 = nn::upsample_nearest2_backward(g_u1, cache.pre1.shape());
  nn::leaky_relu_backward_(g_a1, cache.pre1, params.slope);
  nn::ConvGrads g1 = nn::conv2d_backward(g_a1, cache.in1, params.dec1, 1, 1);
  add_conv(grads.dec1, g1);
  auto [g_code, g_e4] = nn::split_channels(g1.input, code.code.dim(0));
  if (grad_code.empty()) grad_code = Tensor::zeros_like(code.code);
  grad_code.add_(g_code);
  g_e2.add_(nn::avg_pool2_backward(g_e4, cache.e2.shape()));
  g_e1.add_(nn::avg_pool2_backward(g_e2, cache.e1.shape()));
  return g_e1;
}

void encode_appearance_backward(const Tensor& grad_code, const AppearanceCode& code,
                                const ReconParams& params, ReconParams& grads) {
  Tensor g = grad_code;
  nn::leaky_relu_backward_(g, code.pre2, params.slope);
  nn::ConvGrads g2 = nn::conv2d_backward(g, code.act1, params.enc2, 2, 1);
  add_conv(grads.enc2, g2);
  nn::leaky_relu_backward_(g2.input, code.pre1, params.slope);
  nn::ConvGrads g1 = nn::conv2d_backward(g2.input, code.input, params.enc1, 2, 1, false);
  add_conv(grads.enc1, g1);
}

// ---- losses --------------------------------------------------------------

PerceptualExtractor PerceptualExtractor::make(std::uint64_t seed) {
  auto rng = make_rng(seed, 3);
  PerceptualExtractor e;
  e.seed = seed;
  const int widths[5] = {3, 8, 16, 32, 32};
  for (int s = 0; s < 4; ++s) e.stages.push_back(nn::init_conv2d(widths[s], widths[s + 1], 3, rng));
  return e;
}

double perceptual_loss(const Tensor& pred, const Tensor& ref, const PerceptualExtractor& extractor,
                       Tensor* grad_pred) {
  if (!pred.same_shape(ref)) {
    throw ShapeError("perceptual loss: " + shape_string(pred.shape()) + " vs " + shape_string(ref.shape()));
  }
  const std::size_t S = extractor.stages.size();
  std::vector<Tensor> inputs, pre, fp;
  Tensor a = pred, b = ref;
  double loss = 0.0;
  std::vector<Tensor> diffs;
  for (std::size_t s = 0; s < S; ++s) {
    Tensor pa = nn::conv2d(a, extractor.stages[s], 2, 1);
    Tensor pb = nn::conv2d(b, extractor.stages[s], 2, 1);
    if (grad_pred) {
      inputs.push_back(a);
      pre.push_back(pa);
    }
    nn::leaky_relu_(pa, 0.0);
    nn::leaky_relu_(pb, 0.0);
    double acc = 0.0;
    Tensor sign(pa.shape());
    for (std::size_t i = 0; i < pa.numel(); ++i) {
      const double d = pa[i] - pb[i];
      acc += std::abs(d);
      sign[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
    const double count = static_cast<double>(pa.numel());
    loss += acc / count;
    if (grad_pred) {
      sign.scale_(1.0 / count);
      diffs.push_back(std::move(sign));
    }
    a = std::move(pa);
    b = std::move(pb);
  }
  if (grad_pred) {
    Tensor g;
    for (std::size_t s = S; s-- > 0;) {
      if (g.empty()) {
        g = diffs[s];
      } else {
        g.add_(diffs[s]);
      }
      nn::leaky_relu_backward_(g, pre[s], 0.0);
      g = nn::conv2d_backward(g, inputs[s], extractor.stages[s], 2, 1).input;
    }
    *grad_pred = std::move(g);
  }
  return loss;
}

double mask_loss(const Tensor& edge_map, const Tensor& mask, Tensor* grad_edge) {
  if (edge_map.numel() != mask.numel() || edge_map.numel() == 0) {
    throw ShapeError("mask loss: edge map " + shape_string(edge_map.shape()) + " vs mask " +
                     shape_string(mask.shape()));
  }
  for (double m : mask.values()) {
    if (m != 0.0 && m != 1.0) throw ValidationError("mask must be binary");
  }
  const double n = static_cast<double>(mask.numel());
  double acc = 0.0;
  if (grad_edge) *grad_edge = Tensor(edge_map.shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    const double d = edge_map[i] - mask[i];
    acc += d * d;
    if (grad_edge) (*grad_edge)[i] = 2.0 * d / n;
  }
  return acc / n;
}

double total_loss(const std::vector<ViewLoss>& per_view, const TrainConfig& config) {
  if (per_view.empty()) throw ValidationError("total_loss needs at least one view");
  double acc = 0.0;
  for (const auto& v : per_view) acc += config.lambda_vgg * v.vgg + config.lambda_mask * v.mask;
  return acc / static_cast<double>(per_view.size());
}

// ---- model ---------------------------------------------------------------

Model Model::init(const TrainConfig& config, const std::vector<int>& layer_channels,
                  ImageSize image_size) {
  config.validate();
  if (layer_channels.empty()) throw DataError("model needs at least one feature layer");
  Model m;
  m.config = config;
  m.layer_channels = layer_channels;
  m.image_size = image_size;
  auto rng = make_rng(config.seed, 0);
  m.aggregator = AggregatorParams::init(layer_channels, config.feature_channels, image_size, rng);
  m.head = HeadParams::init(config.feature_channels, config.head_hidden, config.keypoints, rng);
  m.volume = VolumeNetParams::init(config.keypoints, rng, config.volume_final_gain);
  m.adjacency_logits = Tensor({config.keypoints, config.keypoints});
  m.recon = ReconParams::init(rng);
  return m;
}

Model Model::zeros_like() const {
  Model z = *this;
  for (auto& [name, t] : z.named_tensors()) t->fill(0.0);
  return z;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_tensors(std::vector<int>* groups) {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto add = [&](std::string name, Tensor* t, int group) {
    out.emplace_back(std::move(name), t);
    if (groups) groups->push_back(group);
  };
  add("aggregator.layer_weights", &aggregator.layer_weights, 0);
  for (std::size_t l = 0; l < aggregator.bottlenecks.size(); ++l) {
    add("aggregator.bottleneck." + std::to_string(l), &aggregator.bottlenecks[l], 0);
  }
  add("head.w1", &head.w1, 0);
  add("head.b1", &head.b1, 0);
  add("head.w2", &head.w2, 0);
  add("head.b2", &head.b2, 0);
  for (std::size_t i = 0; i < volume.layers.size(); ++i) {
    add("volume." + std::to_string(i) + ".weight", &volume.layers[i].weight, 0);
    add("volume." + std::to_string(i) + ".bias", &volume.layers[i].bias, 0);
  }
  add("adjacency.logits", &adjacency_logits, 0);
  const std::pair<const char*, nn::ConvParams*> recon_layers[] = {
      {"enc1", &recon.enc1}, {"enc2", &recon.enc2}, {"dec1", &recon.dec1},
      {"dec2", &recon.dec2}, {"dec3", &recon.dec3}, {"out", &recon.out}};
  for (const auto& [name, conv] : recon_layers) {
    add(std::string("recon.") + name + ".weight", &conv->weight, 1);
    add(std::string("recon.") + name + ".bias", &conv->bias, 1);
  }
  return out;
}

MatX Model::adjacency() const {
  const Eigen::Index n = adjacency_logits.dim(0);
  MatX logits(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) logits(i, j) = adjacency_logits[static_cast<std::size_t>(i * n + j)];
  }
  return adjacency_weights(logits);
}

std::vector<ParamRef> param_refs(Model& model, Model& grads) {
  std::vector<int> groups;
  auto values = model.named_tensors(&groups);
  auto gs = grads.named_tensors();
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < values.size(); ++i) {
    refs.push_back({values[i].first, values[i].second, gs[i].second, groups[i]});
  }
  return refs;
}

MultiViewSample select_views(const MultiViewSample& sample, int views) {
  const int K = sample.num_views();
  if (views > K) {
    throw DataError("sample has " + std::to_string(K) + " views, " + std::to_string(views) + " requested");
  }
  if (views == K) return sample;
  MultiViewSample out;
  out.rig.image_size = sample.rig.image_size;
  out.rig.cameras.assign(sample.rig.cameras.begin(), sample.rig.cameras.begin() + views);
  const std::size_t img = 3 * static_cast<std::size_t>(sample.images.dim(2)) * sample.images.dim(3);
  const std::size_t msk = static_cast<std::size_t>(sample.masks.dim(1)) * sample.masks.dim(2);
  out.images = Tensor({views, 3, sample.images.dim(2), sample.images.dim(3)},
                      std::vector<double>(sample.images.storage().begin(),
                                          sample.images.storage().begin() + static_cast<std::ptrdiff_t>(img * views)));
  out.masks = Tensor({views, sample.masks.dim(1), sample.masks.dim(2)},
                     std::vector<double>(sample.masks.storage().begin(),
                                         sample.masks.storage().begin() + static_cast<std::ptrdiff_t>(msk * views)));
  for (const Tensor& f : sample.layer_features) {
    const std::int64_t C = f.dim(0), h = f.dim(2), w = f.dim(3);
    Tensor t({C, views, h, w});
    const std::size_t plane = static_cast<std::size_t>(h * w);
    for (std::int64_t c = 0; c < C; ++c) {
      std::copy_n(f.data() + static_cast<std::size_t>(c * K) * plane, plane * views,
                  t.data() + static_cast<std::size_t>(c * views) * plane);
    }
    out.layer_features.push_back(std::move(t));
  }
  out.ground_truth_joints = sample.ground_truth_joints;
  out.meta = sample.meta;
  return out;
}

void check_compatible(const Model& model, const MultiViewSample& sample) {
  if (!sample.has_features()) {
    throw DataError("sample has no layer features; lifting needs a feature stack");
  }
  if (sample.num_views() != model.config.views) {
    throw ConfigError("model expects " + std::to_string(model.config.views) + " views, sample has " +
                      std::to_string(sample.num_views()));
  }
  if (sample.image_size() != model.image_size) {
    throw ConfigError("model was built for " + std::to_string(model.image_size.height) + "x" +
                      std::to_string(model.image_size.width) + " images, sample is " +
                      std::to_string(sample.image_size().height) + "x" +
                      std::to_string(sample.image_size().width));
  }
  if (sample.layer_features.size() != model.layer_channels.size()) {
    throw ConfigError("model expects " + std::to_string(model.layer_channels.size()) +
                      " feature layers, sample has " + std::to_string(sample.layer_features.size()));
  }
  for (std::size_t l = 0; l < model.layer_channels.size(); ++l) {
    if (sample.layer_features[l].dim(0) != model.layer_channels[l]) {
      throw ConfigError("feature layer " + std::to_string(l) + " has " +
                        std::to_string(sample.layer_features[l].dim(0)) + " channels, model expects " +
                        std::to_string(model.layer_channels[l]));
    }
  }
}

KeypointSet3D lift_keypoints(const Model& model, const MultiViewSample& sample, LiftTrace* trace) {
  check_compatible(model, sample);
  LiftTrace local;
  LiftTrace& t = trace ? *trace : local;
  t.stack = sample.layer_features;
  t.f_agg = aggregate_features(t.stack, model.aggregator, &t.agg_cache);
  t.f_kp = keypoint_head(t.f_agg, model.head, &t.head_cache);
  VoxelGrid grid;
  grid.resolution = model.config.grid;
  t.plan = plan_unprojection(sample.rig, grid, model.image_size);
  t.per_view = unproject(t.f_kp, t.plan);
  t.fused = attention_fuse(t.per_view, grid, model.config.temperature);
  t.heatmaps = volume_net_apply(t.fused, model.volume, &t.vol_cache);
  t.keypoints = integral_regression(t.heatmaps, &t.int_cache);
  return t.keypoints;
}

KeypointSet3D predict_keypoints(const Model& model, const MultiViewSample& sample) {
  return lift_keypoints(model, select_views(sample, model.config.views));
}

double sample_loss_and_grad(const Model& model, const MultiViewSample& sample,
                            const Tensor& appearance, const PerceptualExtractor& extractor,
                            Model* grads, double weight, std::vector<ViewLoss>* per_view) {
  LiftTrace tr;
  lift_keypoints(model, sample, &tr);
  const TrainConfig& cfg = model.config;
  const ImageSize size = model.image_size;
  const int K = sample.num_views();
  const MatX W = model.adjacency();
  const double sigma = cfg.sigma_for(size);
  const AppearanceCode code = encode_appearance(appearance, model.recon);
  const Points3& kps = tr.keypoints.positions;

  Tensor grad_code;
  Points3 grad_pos = Points3::Zero(kps.rows(), 3);
  MatX grad_w = MatX::Zero(W.rows(), W.cols());
  std::vector<ViewLoss> losses(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const CameraProjection& cam = sample.rig.cameras[static_cast<std::size_t>(k)];
    const ProjectedPoints proj = project_points(kps, cam);
    EdgeMapCache ec;
    const EdgeMap edge = render_edge_map(proj.pixels, proj.valid, W, size, sigma, &ec, k);
    DecodeCache dc;
    const Tensor pred = decode_view(code, edge.values, model.recon, grads ? &dc : nullptr);
    const Tensor target = view_slice(sample.images, k);
    const Tensor mask = view_slice(sample.masks, k);
    Tensor g_pred, g_edge;
    ViewLoss& lv = losses[static_cast<std::size_t>(k)];
    lv.vgg = perceptual_loss(pred, target, extractor, grads ? &g_pred : nullptr);
    lv.mask = mask_loss(edge.values, mask, grads ? &g_edge : nullptr);
    if (!grads) continue;
    const double scale = weight / K;
    g_pred.scale_(cfg.lambda_vgg * scale);
    g_edge.scale_(cfg.lambda_mask * scale);
    Tensor g_e = decode_view_backward(g_pred, code, model.recon, dc, grads->recon, grad_code);
    g_e.add_(g_edge.reshaped(g_e.shape()));
    const EdgeMapGrads eg = render_edge_map_backward(g_e, proj.pixels, W, size, sigma, ec);
    grad_w += eg.weights;
    grad_pos += project_points_backward(kps, cam, proj, eg.keypoints);
  }
  const double loss = total_loss(losses, cfg);
  if (per_view) *per_view = losses;
  if (!grads) return loss;

  encode_appearance_backward(grad_code, code, model.recon, grads->recon);

  const Eigen::Index n = W.rows();
  MatX logits(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) logits(i, j) = model.adjacency_logits[static_cast<std::size_t>(i * n + j)];
  }
  const MatX g_logits = adjacency_weights_backward(grad_w, logits);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) grads->adjacency_logits[static_cast<std::size_t>(i * n + j)] += g_logits(i, j);
  }

  const Tensor g_heat = integral_regression_backward(grad_pos, tr.keypoints, tr.int_cache);
  VolumeNetGrads vg = volume_net_backward(g_heat, model.volume, tr.vol_cache, true);
  for (std::size_t i = 0; i < vg.layers.size(); ++i) add_conv(grads->volume.layers[i], vg.layers[i]);
  const Tensor g_per_view = attention_fuse_backward(vg.input, tr.per_view, tr.fused, cfg.temperature);
  const Tensor g_fkp = unproject_backward(g_per_view, tr.plan);
  const HeadGrads hg = keypoint_head_backward(g_fkp, tr.f_agg, model.head, tr.head_cache, true);
  grads->head.w1.add_(hg.w1);
  grads->head.b1.add_(hg.b1);
  grads->head.w2.add_(hg.w2);
  grads->head.b2.add_(hg.b2);
  const AggregatorGrads ag =
      aggregate_features_backward(hg.input, tr.stack, model.aggregator, tr.agg_cache, false);
  grads->aggregator.layer_weights.add_(ag.layer_weights);
  for (std::size_t l = 0; l < ag.bottlenecks.size(); ++l) grads->aggregator.bottlenecks[l].add_(ag.bottlenecks[l]);
  return loss;
}

// ---- trainer -------------------------------------------------------------

Trainer::Trainer(TrainConfig config, std::vector<MultiViewSample> data)
    : optimizer_({config.lr_main, config.lr_recon},
                 AdamW::Options{0.9, 0.999, 1e-8, config.weight_decay}) {
  config.validate();
  if (data.empty()) throw DataError("training needs at least one sample");
  for (auto& s : data) s = select_views(s, config.views);
  std::vector<int> channels;
  for (const Tensor& f : data.front().layer_features) channels.push_back(static_cast<int>(f.dim(0)));
  model_ = Model::init(config, channels, data.front().image_size());
  for (const auto& s : data) check_compatible(model_, s);
  grads_ = model_.zeros_like();
  data_ = std::move(data);
  extractor_ = PerceptualExtractor::make(config.perceptual_seed);
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t step) const {
  const std::size_t D = data_.size();
  const auto B = static_cast<std::size_t>(model_.config.batch_size);
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(D);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t i = static_cast<std::size_t>(step) * B + b;
    const auto epoch = static_cast<std::int64_t>(i / D);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      auto rng = make_rng(model_.config.seed, kOrderStream + static_cast<std::uint64_t>(epoch));
      for (std::size_t j = D; j > 1; --j) {
        const std::size_t r = static_cast<std::size_t>(rng() % j);
        std::swap(perm[j - 1], perm[r]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[i % D]);
  }
  return out;
}

StepStats Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& cfg = model_.config;
  const auto batch = batch_indices(step_);
  for (auto& [name, t] : grads_.named_tensors()) t->fill(0.0);
  StepStats stats;
  stats.per_view.assign(static_cast<std::size_t>(cfg.views), ViewLoss{});
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const MultiViewSample& sample = data_[batch[b]];
    Tensor appearance = view_slice(sample.images, 0);
    if (cfg.augment) {
      auto rng = make_rng(cfg.seed, kAugmentStream + static_cast<std::uint64_t>(step_) * batch.size() + b);
      appearance = affine_augment(appearance, rng, cfg.augment_ranges);
    }
    std::vector<ViewLoss> pv;
    stats.loss += w * sample_loss_and_grad(model_, sample, appearance, extractor_, &grads_, w, &pv);
    for (std::size_t k = 0; k < pv.size(); ++k) {
      stats.per_view[k].vgg += w * pv[k].vgg;
      stats.per_view[k].mask += w * pv[k].mask;
    }
  }
  auto refs = param_refs(model_, grads_);
  const bool finite = std::isfinite(stats.loss);
  stats.grad_norm = finite ? clip_grad_norm(refs, cfg.clip_norm) : stats.loss;
  if (!finite || !std::isfinite(stats.grad_norm)) {
    std::string where = "(no dump directory)";
    if (!dump_dir.empty()) {
      const auto dir = dump_dir / ("nonfinite_step_" + std::to_string(step_ + 1));
      std::filesystem::create_directories(dir);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        write_bundle(data_[batch[b]], dir / ("sample_" + std::to_string(batch[b])));
      }
      nlohmann::json info = {{"step", step_ + 1}, {"loss", stats.loss}, {"grad_norm", stats.grad_norm},
                             {"batch", batch}, {"config", cfg.to_json()}};
      write_text_file(dir / "diagnostic.json", info.dump(2));
      where = dir.string();
    }
    throw NumericError("non-finite loss or gradient at step " + std::to_string(step_ + 1) +
                       "; batch dumped to " + where);
  }
  optimizer_.step(refs);
  ++step_;
  stats.step = step_;
  stats.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

void Trainer::run(std::optional<int> until, const std::function<void(const StepStats&)>& log) {
  const std::int64_t end = until.value_or(model_.config.steps);
  while (step_ < end) {
    const StepStats s = step();
    if (log) log(s);
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& file) const {
  Model& model = const_cast<Model&>(model_);
  Model& grads = const_cast<Model&>(grads_);
  TensorArchive archive("checkpoint");
  for (auto& [name, t] : model.named_tensors()) archive.put("param." + name, *t, DType::kFloat64);
  optimizer_.save(archive, param_refs(model, grads));
  archive.meta()["config"] = model_.config.to_json();
  archive.meta()["step"] = step_;
  archive.meta()["layer_channels"] = model_.layer_channels;
  archive.meta()["image_size"] = {model_.image_size.height, model_.image_size.width};
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  archive.write_tar(file);
}

namespace {

Model model_from_archive(const TensorArchive& archive, std::optional<TrainConfig> config_override) {
  if (archive.kind() != "checkpoint") throw DataError("archive kind '" + archive.kind() + "' is not a checkpoint");
  const auto& meta = archive.meta();
  TrainConfig config = TrainConfig::from_json(meta.at("config"));
  if (config_override) {
    const TrainConfig& o = *config_override;
    if (o.views != config.views || o.keypoints != config.keypoints || o.grid != config.grid ||
        o.feature_channels != config.feature_channels || o.head_hidden != config.head_hidden) {
      throw ConfigError("resume config changes the model architecture");
    }
    config = o;
  }
  const auto channels = meta.at("layer_channels").get<std::vector<int>>();
  const ImageSize size{meta.at("image_size").at(0).get<int>(), meta.at("image_size").at(1).get<int>()};
  Model m = Model::init(config, channels, size);
  for (auto& [name, t] : m.named_tensors()) *t = archive.get("param." + name, t->shape());
  return m;
}

}  // namespace

Model load_model(const std::filesystem::path& checkpoint, std::int64_t* step) {
  if (!std::filesystem::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  const TensorArchive archive = TensorArchive::read_tar(checkpoint);
  Model m = model_from_archive(archive, std::nullopt);
  if (step) *step = archive.meta().at("step").get<std::int64_t>();
  return m;
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, std::vector<MultiViewSample> data,
                        std::optional<TrainConfig> override_config) {
  if (!std::filesystem::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  const TensorArchive archive = TensorArchive::read_tar(checkpoint);
  Model m = model_from_archive(archive, override_config);
  Trainer t(m.config, std::move(data));
  if (t.model_.layer_channels != m.layer_channels || !(t.model_.image_size == m.image_size)) {
    throw DataError("checkpoint does not match the dataset's feature layout");
  }
  t.model_ = std::move(m);
  t.grads_ = t.model_.zeros_like();
  t.optimizer_.load(archive, param_refs(t.model_, t.grads_));
  t.step_ = archive.meta().at("step").get<std::int64_t>();
  return t;
}

nlohmann::json step_record(const StepStats& stats) {
  nlohmann::json vgg = nlohmann::json::array(), mask = nlohmann::json::array();
  for (const auto& v : stats.per_view) {
    vgg.push_back(v.vgg);
    mask.push_back(v.mask);
  }
  return {{"step", stats.step},       {"loss", stats.loss},           {"vgg", vgg},
          {"mask", mask},             {"grad_norm", stats.grad_norm}, {"wall_time", stats.wall_time}};
}

Model train(const std::vector<MultiViewSample>& data, const TrainConfig& config,
            const std::filesystem::path& out_dir,
            const std::optional<std::filesystem::path>& resume_from) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  Trainer trainer = resume_from ? Trainer::resume(*resume_from, data, config) : Trainer(config, data);
  trainer.dump_dir = out_dir;
  std::ofstream log(out_dir / "train_log.jsonl", resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot open training log in " + out_dir.string());
  const auto ckpt = out_dir / "checkpoint.tar";
  trainer.run(std::nullopt, [&](const StepStats& s) {
    log << step_record(s).dump() << '\n';
    if (s.step % 100 == 0 || s.step == 1) {
      spdlog::info("step {} loss {:.5f} grad {:.3f}", s.step, s.loss, s.grad_norm);
    }
    if (config.checkpoint_every > 0 && s.step % config.checkpoint_every == 0) {
      log.flush();
      trainer.save_checkpoint(ckpt);
    }
  });
  log.flush();
  trainer.save_checkpoint(ckpt);
  return trainer.model();
}

}  // namespace keyvol
