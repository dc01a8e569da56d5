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
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "keyvol/backbone.hpp"
#include "keyvol/keypoints.hpp"
#include "keyvol/lifting.hpp"
#include "keyvol/nn.hpp"
#include "keyvol/structure.hpp"

namespace keyvol {

struct AugmentRanges {
  double max_rotation_deg = 15.0;
  double max_translation = 0.05;  // fraction of image size
  double min_scale = 0.9;
  double max_scale = 1.1;
};

struct TrainConfig {
  int views = 4;
  int keypoints = 8;
  int grid = 24;
  int feature_channels = 32;
  int head_hidden = 32;
  double lambda_vgg = 1.0;
  double lambda_mask = 0.5;
  double lr_main = 1e-4;
  double lr_recon = 1e-3;
  double weight_decay = 0.01;
  double clip_norm = 5.0;
  int steps = 2000;
  int batch_size = 1;
  std::uint64_t seed = 0;
  double sigma_line = 0.0;  // 0 selects default_sigma_line(image size)
  double temperature = 1.0;
  bool augment = true;
  AugmentRanges augment_ranges;
  std::uint64_t perceptual_seed = 7;
  double volume_final_gain = 0.0;  // 0 starts from uniform heatmaps
  int checkpoint_every = 500;
  // Recorded with the run only; the synthetic backbone has no diffusion step.
  int diffusion_timestep = 500;
  int diffusion_steps = 1000;

  void validate() const;
  double sigma_for(ImageSize size) const;
  nlohmann::json to_json() const;
  // Missing keys take defaults, unknown keys and bad values raise ConfigError.
  static TrainConfig from_json(const nlohmann::json& doc);
};

// ---- augmentation --------------------------------------------------------

struct AffineParams {
  double angle = 0.0;  // radians
  double tx = 0.0;     // pixels
  double ty = 0.0;
  double scale = 1.0;
};

AffineParams sample_affine(const AugmentRanges& ranges, ImageSize size, std::mt19937_64& rng);
// Output pixel u samples the input at the inverse transform of u, about the
// image center, bilinear with zero fill.
Tensor affine_apply(const Tensor& image, const AffineParams& params);
Tensor affine_augment(const Tensor& image, std::mt19937_64& rng,
                      const AugmentRanges& ranges = AugmentRanges{});

// ---- reconstruction network ----------------------------------------------

struct ReconParams {
  nn::ConvParams enc1, enc2;             // 3 -> 16 -> 32, stride 2
  nn::ConvParams dec1, dec2, dec3, out;  // edge map concatenated at 1/4, 1/2, 1
  double slope = 0.1;

  static ReconParams init(std::mt19937_64& rng);
};

struct AppearanceCode {
  Tensor input, pre1, act1, pre2, code;
};

struct DecodeCache {
  Tensor e4, e2, e1;  // edge map at 1/4, 1/2, full resolution
  Tensor in1, pre1, in2, pre2, in3, pre3, in4;
  Tensor out;  // after the sigmoid
};

struct ReconOutput {
  Tensor image;  // 3 x H x W in [0, 1]
  EdgeMap edge;
};

AppearanceCode encode_appearance(const Tensor& image, const ReconParams& params);
Tensor decode_view(const AppearanceCode& code, const Tensor& edge, const ReconParams& params,
                   DecodeCache* cache = nullptr);
ReconOutput reconstruct_view(const Tensor& appearance, const EdgeMap& edge,
                             const ReconParams& params);

// Parameter gradients accumulate into `grads`, which has the shapes of
// `params`. Returns the gradient with respect to the edge map and adds the
// code gradient into `grad_code`.
Tensor decode_view_backward(const Tensor& grad_image, const AppearanceCode& code,
                            const ReconParams& params, const DecodeCache& cache,
                            ReconParams& grads, Tensor& grad_code);
void encode_appearance_backward(const Tensor& grad_code, const AppearanceCode& code,
                                const ReconParams& params, ReconParams& grads);

// ---- losses --------------------------------------------------------------

struct PerceptualExtractor {
  std::vector<nn::ConvParams> stages;  // stride 2, ReLU
  std::uint64_t seed = 0;

  static PerceptualExtractor make(std::uint64_t seed);
};

double perceptual_loss(const Tensor& pred, const Tensor& ref, const PerceptualExtractor& extractor,
                       Tensor* grad_pred = nullptr);

double mask_loss(const Tensor& edge_map, const Tensor& mask, Tensor* grad_edge = nullptr);

struct ViewLoss {
  double vgg = 0.0;
  double mask = 0.0;
};

double total_loss(const std::vector<ViewLoss>& per_view, const TrainConfig& config);

// ---- model ---------------------------------------------------------------

struct Model {
  TrainConfig config;
  std::vector<int> layer_channels;
  ImageSize image_size;
  AggregatorParams aggregator;
  HeadParams head;
  VolumeNetParams volume;
  Tensor adjacency_logits;  // N x N
  ReconParams recon;

  static Model init(const TrainConfig& config, const std::vector<int>& layer_channels,
                    ImageSize image_size);
  Model zeros_like() const;
  // Fixed order; group 0 is the keypoint branch, group 1 the reconstruction net.
  std::vector<std::pair<std::string, Tensor*>> named_tensors(std::vector<int>* groups = nullptr);
  MatX adjacency() const;
};

std::vector<ParamRef> param_refs(Model& model, Model& grads);

// First `views` views of a sample, features included.
MultiViewSample select_views(const MultiViewSample& sample, int views);

void check_compatible(const Model& model, const MultiViewSample& sample);

struct LiftTrace {
  std::vector<Tensor> stack;
  AggregateCache agg_cache;
  Tensor f_agg;
  HeadCache head_cache;
  Tensor f_kp;
  UnprojectionPlan plan;
  Tensor per_view;
  FeatureVolume fused;
  VolumeNetCache vol_cache;
  HeatmapVolume heatmaps;
  IntegralCache int_cache;
  KeypointSet3D keypoints;
};

// Sample must already hold exactly config.views views.
KeypointSet3D lift_keypoints(const Model& model, const MultiViewSample& sample,
                             LiftTrace* trace = nullptr);

// Selects the first config.views views, then lifts.
KeypointSet3D predict_keypoints(const Model& model, const MultiViewSample& sample);

struct StepStats {
  std::int64_t step = 0;
  double loss = 0.0;
  std::vector<ViewLoss> per_view;  // averaged over the batch
  double grad_norm = 0.0;
  double wall_time = 0.0;
};

// Loss for one sample with all gradients accumulated into `grads`
// (scaled by `weight`). `appearance` is the augmented input view.
double sample_loss_and_grad(const Model& model, const MultiViewSample& sample,
                            const Tensor& appearance, const PerceptualExtractor& extractor,
                            Model* grads, double weight, std::vector<ViewLoss>* per_view);

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<MultiViewSample> data);

  // Restores parameters, optimizer state and step; data must match.
  static Trainer resume(const std::filesystem::path& checkpoint, std::vector<MultiViewSample> data,
                        std::optional<TrainConfig> override_config = std::nullopt);

  StepStats step();
  // Runs until `config.steps` (or `until` if given). `log` receives each step.
  void run(std::optional<int> until = std::nullopt,
           const std::function<void(const StepStats&)>& log = {});

  void save_checkpoint(const std::filesystem::path& file) const;

  const Model& model() const { return model_; }
  const TrainConfig& config() const { return model_.config; }
  std::int64_t steps_done() const { return step_; }
  std::vector<std::size_t> batch_indices(std::int64_t step) const;

  // Where a non-finite loss dumps its batch.
  std::filesystem::path dump_dir;

 private:
  Model model_;
  Model grads_;
  std::vector<MultiViewSample> data_;
  PerceptualExtractor extractor_;
  AdamW optimizer_;
  std::int64_t step_ = 0;
};

Model load_model(const std::filesystem::path& checkpoint, std::int64_t* step = nullptr);

nlohmann::json step_record(const StepStats& stats);

// Trains with a JSON-lines log and periodic checkpoints in out_dir.
Model train(const std::vector<MultiViewSample>& data, const TrainConfig& config,
            const std::filesystem::path& out_dir,
            const std::optional<std::filesystem::path>& resume_from = std::nullopt);

}  // namespace keyvol
